"""Denoising diffusion: cosine schedule, closed-form forward process,
reverse sampling with a learned variance-interpolation coefficient, the
hybrid training loss, and a deterministic training loop with EMA weights.

Schedule arrays are indexed by timestep t in 1..T, with index 0 a sentinel
(alpha_bar[0] = 1). The reverse step reconstructs x0 from the predicted
noise, clamps it to [-1, 1] (dynamic clipping), and uses the Gaussian
posterior mean; its variance interpolates between the posterior variance
and beta_t in log space, so v=0 and v=1 hit the endpoints exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndcore, parallel
from .denoiser import Denoiser, DenoiserConfig, build, forward, save_checkpoint
from .ndcore import Tensor
from .ndcore.array import NdError, require_finite
from .rng import substream


class DiffusionError(ValueError):
    pass


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray
    posterior_log_variance_clipped: np.ndarray
    posterior_coef_x0: np.ndarray
    posterior_coef_xt: np.ndarray

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        T = betas.shape[0]
        if T < 1:
            raise DiffusionError("schedule needs at least one step")
        if np.any(betas <= 0.0) or np.any(betas > 0.999):
            raise DiffusionError("betas must lie in (0, 0.999]")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar[0] = 1.0
        pv = np.zeros(T + 1)
        c0 = np.zeros(T + 1)
        c1 = np.zeros(T + 1)
        t = np.arange(1, T + 1)
        denom = 1.0 - alpha_bar[t]
        pv[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / denom
        c0[t] = beta[t] * np.sqrt(alpha_bar[t - 1]) / denom
        c1[t] = (1.0 - alpha_bar[t - 1]) * np.sqrt(alpha[t]) / denom
        # t=1 has zero posterior variance; clip its log to the t=2 value so
        # log-space interpolation and the KL term stay finite
        pv_clipped = pv.copy()
        pv_clipped[1] = pv[2] if T >= 2 else beta[1]
        with np.errstate(divide="ignore"):
            log_pv = np.log(pv_clipped)
        log_pv[0] = 0.0
        return cls(T, beta, alpha, alpha_bar, pv, log_pv, c0, c1)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine noise schedule: alpha_bar follows cos^2(((t/T + s)/(1 + s)) * pi/2)
    normalized to 1 at t=0, with betas capped at 0.999."""
    if T < 1:
        raise DiffusionError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.minimum(1.0 - ratio, 0.999)
    return NoiseSchedule.from_betas(betas)


# ---------------------------------------------------------------------------
# forward process


def diffuse(x0: np.ndarray, noise: np.ndarray, alpha_bar_t) -> np.ndarray:
    """Closed-form marginal: sqrt(abar)*x0 + sqrt(1-abar)*noise."""
    a = np.asarray(alpha_bar_t, dtype=x0.dtype)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Sample x_t | x_0 for integer t (scalar or per-sample array) in [1, T]."""
    schedule.check_t(t)
    abar = _per_sample(schedule.alpha_bar, t, x0)
    return diffuse(x0, noise, abar)


def _per_sample(arr: np.ndarray, t, like: np.ndarray):
    t = np.asarray(t)
    vals = arr[t]
    if t.ndim == 0:
        return like.dtype.type(vals)
    return vals.reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def _draw_normal(rng, shape, dtype) -> np.ndarray:
    """Draw standard normal noise from one Generator or a per-sample list."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape, dtype=dtype)
    if len(rng) != shape[0]:
        raise DiffusionError(
            f"need one rng per sample: got {len(rng)} for batch {shape[0]}"
        )
    return np.stack([r.standard_normal(shape[1:], dtype=dtype) for r in rng])


# ---------------------------------------------------------------------------
# reverse process


def posterior_mean_from_eps(
    schedule: NoiseSchedule, x_t: np.ndarray, t, eps_hat: np.ndarray
) -> np.ndarray:
    """Gaussian posterior mean with x0 reconstructed from the predicted noise
    and clamped to [-1, 1]."""
    schedule.check_t(t)
    abar = _per_sample(schedule.alpha_bar, t, x_t)
    x0_hat = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    np.clip(x0_hat, -1.0, 1.0, out=x0_hat)
    c0 = _per_sample(schedule.posterior_coef_x0, t, x_t)
    c1 = _per_sample(schedule.posterior_coef_xt, t, x_t)
    return c0 * x0_hat + c1 * x_t


def variance_from_v(schedule: NoiseSchedule, t, v_hat: np.ndarray) -> np.ndarray:
    """Interpolated variance beta^v * posterior_variance^(1-v); the power form
    makes the v=0 and v=1 endpoints exact."""
    schedule.check_t(t)
    beta = _per_sample(schedule.beta, t, v_hat)
    pv = _per_sample(schedule.posterior_variance, t, v_hat)
    return np.power(beta, v_hat) * np.power(pv, 1.0 - v_hat)


def reverse_step(
    schedule: NoiseSchedule, model: Denoiser, x_t: np.ndarray, t: int, rng
) -> np.ndarray:
    """One reverse transition x_t -> x_{t-1}. At t=1 no noise is added and the
    output (the denoised image) is clamped to [-1, 1]."""
    schedule.check_t(t)
    eps_hat, v_hat = model(x_t, t)
    if not np.isfinite(eps_hat).all() or not np.isfinite(v_hat).all():
        raise DiffusionError(f"non-finite denoiser output at t={t}")
    mean = posterior_mean_from_eps(schedule, x_t, t, eps_hat)
    if t == 1:
        return np.clip(mean, -1.0, 1.0)
    var = variance_from_v(schedule, t, v_hat)
    noise = _draw_normal(rng, x_t.shape, x_t.dtype)
    return mean + np.sqrt(var) * noise


def renoise_step(schedule: NoiseSchedule, x_prev: np.ndarray, t: int, rng) -> np.ndarray:
    """Single-step forward kernel x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps."""
    schedule.check_t(t)
    a = x_prev.dtype.type(schedule.alpha[t])
    b = x_prev.dtype.type(schedule.beta[t])
    noise = _draw_normal(rng, x_prev.shape, x_prev.dtype)
    return np.sqrt(a) * x_prev + np.sqrt(b) * noise


# ---------------------------------------------------------------------------
# loss


def loss_terms(
    schedule: NoiseSchedule,
    eps: np.ndarray,
    eps_hat: Tensor,
    v_hat: Tensor,
    x0: np.ndarray,
    x_t: np.ndarray,
    t: np.ndarray,
    vlb_weight: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, l_simple, l_vlb) from model outputs.

    l_simple is the mean squared noise-prediction error. l_vlb is the mean
    per-pixel KL between the model Gaussian and the true posterior, with the
    model mean frozen so gradients flow only through the variance channel.
    The true-posterior variance uses the t=1-clipped value, matching the
    lower interpolation endpoint.
    """
    resid = ndcore.sub(ndcore.constant(eps), eps_hat)
    l_simple = ndcore.mean(ndcore.mul(resid, resid))

    dt = x0.dtype
    log_beta_full = np.concatenate([[0.0], np.log(schedule.beta[1:])])
    log_beta = _per_sample(log_beta_full, t, x0)
    log_pvc = _per_sample(schedule.posterior_log_variance_clipped, t, x0)
    pvc = np.exp(log_pvc).astype(dt)
    gap = (log_beta - log_pvc).astype(dt)

    mu_true = (
        _per_sample(schedule.posterior_coef_x0, t, x0) * x0
        + _per_sample(schedule.posterior_coef_xt, t, x0) * x_t
    )
    mu_model = posterior_mean_from_eps(schedule, x_t, t, eps_hat.value)  # frozen
    dmu2 = ((mu_true - mu_model) ** 2).astype(dt)

    vgap = ndcore.mul(v_hat, ndcore.constant(gap))  # log sigma^2 - log pvc
    precision = ndcore.exp(ndcore.neg(ndcore.add(vgap, ndcore.constant(log_pvc.astype(dt)))))
    kl = ndcore.add(
        ndcore.mul(vgap, np.asarray(0.5, dtype=dt)),
        ndcore.mul(precision, ndcore.constant((0.5 * (pvc + dmu2)).astype(dt))),
    )
    kl = ndcore.sub(kl, np.asarray(0.5, dtype=dt))
    l_vlb = ndcore.mean(kl)
    total = ndcore.add(l_simple, ndcore.mul(l_vlb, np.asarray(vlb_weight, dtype=dt)))
    return total, l_simple, l_vlb


def loss(
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    params,
    x0: np.ndarray,
    rng: np.random.Generator,
    vlb_weight: float = 0.001,
) -> tuple[Tensor, dict]:
    """Hybrid training loss on a batch; timesteps are drawn uniformly in [1,T]."""
    if x0.shape[0] < 1:
        raise DiffusionError("empty batch")
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    noise = rng.standard_normal(x0.shape, dtype=x0.dtype)
    x_t = q_sample(schedule, x0, t, noise)
    eps_hat, v_hat = forward(config, params, x_t, t)
    total, l_simple, l_vlb = loss_terms(
        schedule, noise, eps_hat, v_hat, x0, x_t, t, vlb_weight
    )
    stats = {
        "loss_simple": float(l_simple.value),
        "loss_vlb": float(l_vlb.value),
    }
    return total, stats


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    total_steps: int = 8000
    ema_decay: float = 0.999
    vlb_weight: float = 0.001
    seed: int = 0
    diffusion_steps: int = 64
    checkpoint_interval: int = 2000

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.total_steps + 1,
               self.ema_decay, self.diffusion_steps, self.checkpoint_interval) <= 0:
            raise DiffusionError("train config fields must be positive")
        if not 0.0 <= self.vlb_weight <= 1.0:
            raise DiffusionError("vlb_weight must lie in [0, 1]")


def train(
    train_cfg: TrainConfig,
    model_cfg: DenoiserConfig,
    patches: np.ndarray,
    out_dir=None,
    progress: bool = False,
) -> Denoiser:
    """Train the denoiser on an array of patches [M,1,H,W] in [-1,1].

    Emits an EMA checkpoint every `checkpoint_interval` steps plus a final one
    at the root of out_dir, and appends to metrics.jsonl every 100 steps.
    Returns the EMA copy of the parameters. Deterministic given the config
    and a fixed worker-thread setting.
    """
    parallel.max_workers()  # pin kernel thread counts before the first step
    if patches.ndim != 4 or patches.shape[1] != 1:
        raise DiffusionError(f"patches must be [M,1,H,W], got {patches.shape}")
    patches = patches.astype(np.float32, copy=False)
    schedule = cosine_schedule(train_cfg.diffusion_steps)
    init = build(model_cfg, seed=int(substream(train_cfg.seed, "train.init").integers(2**31)))
    tensors = {k: ndcore.param(v.copy(), name=k) for k, v in init.items()}
    ema = {k: v.copy() for k, v in init.items()}
    opt = ndcore.Adam(lr=train_cfg.learning_rate)
    rng_batch = substream(train_cfg.seed, "train.batch")
    rng_step = substream(train_cfg.seed, "train.step")

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    last_ckpt = None
    extra = {"diffusion_steps": train_cfg.diffusion_steps}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")

    t0 = time.time()
    try:
        for step in range(1, train_cfg.total_steps + 1):
            idx = rng_batch.integers(0, patches.shape[0], size=train_cfg.batch_size)
            x0 = patches[idx]
            try:
                total, stats = loss(
                    schedule, model_cfg, tensors, x0, rng_step, train_cfg.vlb_weight
                )
                if not np.isfinite(total.value):
                    raise NdError("loss is not finite")
                grads = ndcore.backprop(total, tensors)
            except NdError as exc:
                raise TrainError(
                    f"non-finite loss at step {step}"
                    + (f"; last checkpoint: {last_ckpt}" if last_ckpt else "")
                ) from exc
            opt.step(tensors, grads)
            d = train_cfg.ema_decay
            for k, p in tensors.items():
                ema[k] *= d
                ema[k] += (1.0 - d) * p.value
            if metrics_fh is not None and step % 100 == 0:
                metrics_fh.write(json.dumps({
                    "step": step,
                    "loss_simple": stats["loss_simple"],
                    "loss_vlb": stats["loss_vlb"],
                    "lr": train_cfg.learning_rate,
                }) + "\n")
                metrics_fh.flush()
            if progress and step % 100 == 0:
                rate = step / (time.time() - t0)
                print(f"step {step}/{train_cfg.total_steps} "
                      f"loss_simple={stats['loss_simple']:.4f} "
                      f"({rate:.2f} it/s)", flush=True)
            if out_dir is not None and step % train_cfg.checkpoint_interval == 0:
                last_ckpt = out_dir / "steps" / f"{step:06d}"
                save_checkpoint(last_ckpt, model_cfg, ema, extra)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    model = Denoiser(model_cfg, {k: v.copy() for k, v in ema.items()})
    if out_dir is not None:
        save_checkpoint(out_dir, model_cfg, model.params, extra)
    return model


# ---------------------------------------------------------------------------
# sampling


def generate(
    schedule: NoiseSchedule, model: Denoiser, n: int, rng, batch_size: int = 64
) -> np.ndarray:
    """Unconditional samples [n,1,S,S] in [-1,1], from pure noise through the
    full reverse chain."""
    size = model.config.input_size
    out = []
    remaining = n
    while remaining > 0:
        b = min(batch_size, remaining)
        x = _draw_normal(rng, (b, 1, size, size), np.float32)
        for t in range(schedule.T, 0, -1):
            x = reverse_step(schedule, model, x, t, rng)
        out.append(x)
        remaining -= b
    result = np.concatenate(out) if len(out) > 1 else out[0]
    return require_finite(result, "generate")
