"""Fréchet latent distance over a small texture classifier.

A four-stage convolutional classifier is trained supervised on the synthetic
texture classes; its global-average-pooled features (D=128) define the latent
space. Image sets are summarized by Gaussian moments there, compared with the
squared Fréchet distance, and the metric is validated by a battery of
increasing perturbations whose distance curves must rise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ndcore
from .denoiser import _num_groups  # same grouping rule as the denoiser
from .ndcore import Tensor
from .rng import substream
from .synthlab import Corpus


class MetricsError(ValueError):
    pass


FEATURE_DIM = 128
STAGE_CHANNELS = (16, 32, 64, FEATURE_DIM)


@dataclass(frozen=True)
class EmbedderConfig:
    input_size: int = 64
    n_classes: int = 8
    stage_channels: tuple[int, ...] = STAGE_CHANNELS

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]


def _embedder_plan(config: EmbedderConfig):
    plan = []
    cin = 1
    for i, cout in enumerate(config.stage_channels):
        plan += [
            (f"stage{i}.conv.w", (cout, cin, 3, 3), "he"),
            (f"stage{i}.conv.b", (cout,), "zeros"),
            (f"stage{i}.gn.g", (cout,), "ones"),
            (f"stage{i}.gn.b", (cout,), "zeros"),
        ]
        cin = cout
    plan += [
        ("head.w", (config.feature_dim, config.n_classes), "he"),
        ("head.b", (config.n_classes,), "zeros"),
    ]
    return plan


def _build_embedder(config: EmbedderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xE3B,)))
    params = {}
    for path, shape, init in _embedder_plan(config):
        if init == "zeros":
            params[path] = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            params[path] = np.ones(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            params[path] = (
                rng.standard_normal(shape, dtype=np.float32) / np.sqrt(fan_in)
            ).astype(np.float32)
    return params


def _embedder_forward(config: EmbedderConfig, params, x: np.ndarray):
    """Returns (features [N,D], logits [N,K]) as Tensors."""
    p = {k: (v if isinstance(v, Tensor) else ndcore.constant(v)) for k, v in params.items()}
    n = x.shape[0]
    s = config.input_size
    h = ndcore.reshape(ndcore.constant(np.asarray(x, dtype=np.float32)), (n, s, s, 1))
    for i, cout in enumerate(config.stage_channels):
        h = ndcore.conv2d_nhwc(h, p[f"stage{i}.conv.w"], 2, 1)
        h = ndcore.add(h, p[f"stage{i}.conv.b"])
        h = ndcore.group_norm_nhwc(h, _num_groups(cout), p[f"stage{i}.gn.g"], p[f"stage{i}.gn.b"])
        h = ndcore.silu(h)
    feats = ndcore.global_avg_pool(h)  # [N, D]
    logits = ndcore.add(
        ndcore.matmul(feats, p["head.w"]),
        ndcore.reshape(p["head.b"], (1, config.n_classes)),
    )
    return feats, logits


@dataclass
class EmbeddingModel:
    """Frozen classifier used both as FCD feature extractor and as the
    downstream classification-consistency referee."""

    config: EmbedderConfig
    params: dict[str, np.ndarray]
    eval_accuracy: float

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self._run(images, batch_size, want_logits=False)

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self._run(images, batch_size, want_logits=True)

    def _run(self, images, batch_size, want_logits):
        out = []
        for i in range(0, images.shape[0], batch_size):
            feats, logits = _embedder_forward(
                self.config, self.params, images[i : i + batch_size]
            )
            out.append((logits if want_logits else feats).value)
        return np.concatenate(out)

    def save(self, ckpt_dir) -> None:
        import json

        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "input_size": self.config.input_size,
            "n_classes": self.config.n_classes,
            "stage_channels": list(self.config.stage_channels),
            "eval_accuracy": self.eval_accuracy,
        }
        (ckpt_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        import struct

        from .ndcore.array import write_ndt

        with open(ckpt_dir / "params.ndt", "wb") as fh:
            for path in sorted(self.params):
                enc = path.encode()
                fh.write(struct.pack("<H", len(enc)))
                fh.write(enc)
                write_ndt(fh, self.params[path])

    @classmethod
    def load(cls, ckpt_dir) -> "EmbeddingModel":
        import json
        import struct

        from .ndcore.array import read_ndt

        ckpt_dir = Path(ckpt_dir)
        doc = json.loads((ckpt_dir / "config.json").read_text())
        config = EmbedderConfig(
            input_size=doc["input_size"],
            n_classes=doc["n_classes"],
            stage_channels=tuple(doc["stage_channels"]),
        )
        params = {}
        with open(ckpt_dir / "params.ndt", "rb") as fh:
            while True:
                head = fh.read(2)
                if not head:
                    break
                (plen,) = struct.unpack("<H", head)
                path = fh.read(plen).decode()
                params[path] = read_ndt(fh)
        return cls(config, params, doc.get("eval_accuracy", float("nan")))


ACCURACY_FLOOR = 0.95


def train_embedder(
    corpus: Corpus,
    seed: int,
    steps: int = 2500,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
) -> EmbeddingModel:
    """Supervised training on the corpus classes; raises MetricsError if the
    held-out accuracy floor (95%) is not met within the step budget."""
    k = len(corpus.classes)
    config = EmbedderConfig(input_size=corpus.size, n_classes=k)
    init = _build_embedder(config, seed=int(substream(seed, "embed.init").integers(2**31)))
    tensors = {kk: ndcore.param(v.copy(), kk) for kk, v in init.items()}
    opt = ndcore.Adam(lr=learning_rate)
    rng = substream(seed, "embed.batch")
    xs = corpus.train_patches
    ys = corpus.labels[corpus.train_idx]
    for _step in range(steps):
        idx = rng.integers(0, xs.shape[0], size=batch_size)
        _, logits = _embedder_forward(config, tensors, xs[idx])
        loss = ndcore.cross_entropy(logits, ys[idx])
        grads = ndcore.backprop(loss, tensors)
        opt.step(tensors, grads)
    model = EmbeddingModel(config, {kk: t.value.copy() for kk, t in tensors.items()}, 0.0)
    pred = model.logits(corpus.eval_patches).argmax(axis=1)
    acc = float((pred == corpus.labels[corpus.eval_idx]).mean())
    model.eval_accuracy = acc
    if acc < ACCURACY_FLOOR:
        raise MetricsError(
            f"embedder eval accuracy {acc:.3f} below the {ACCURACY_FLOOR} floor "
            f"after {steps} steps"
        )
    return model


# ---------------------------------------------------------------------------
# Gaussian moments and the Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray  # [D]
    sigma: np.ndarray  # [D,D], symmetric
    n: int

    def __post_init__(self):
        if self.sigma.shape != (self.mu.shape[0], self.mu.shape[0]):
            raise MetricsError(
                f"covariance shape {self.sigma.shape} does not match mean "
                f"dim {self.mu.shape[0]}"
            )
        asym = float(np.abs(self.sigma - self.sigma.T).max())
        if asym > 1e-8:
            raise MetricsError(f"covariance not symmetric (max asymmetry {asym:.2e})")


def embed_stats(model: EmbeddingModel, images: np.ndarray) -> GaussianStats:
    """Sample mean and (n-1)-normalized covariance of the embedded set."""
    n = images.shape[0]
    floor = max(64, model.config.feature_dim // 2)
    if n < floor:
        raise MetricsError(f"need at least {floor} images for stable moments, got {n}")
    feats = model.features(images).astype(np.float64)
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = (centered.T @ centered) / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma, n=n)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians; matrix square roots by
    symmetric eigendecomposition with negative eigenvalues clipped to zero."""
    if a.mu.shape != b.mu.shape:
        raise MetricsError(f"dimension mismatch {a.mu.shape} vs {b.mu.shape}")
    from scipy.linalg import eigh

    wa, va = eigh(a.sigma)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = root_a @ b.sigma @ root_a
    wi = eigh((inner + inner.T) / 2.0, eigvals_only=True)
    tr_root_inner = float(np.sqrt(np.clip(wi, 0.0, None)).sum())
    diff = a.mu - b.mu
    d2 = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root_inner)
    if d2 < -1e-6:
        raise MetricsError(f"Fréchet distance came out negative beyond tolerance: {d2}")
    return max(d2, 0.0)


def fcd(model: EmbeddingModel, images_a: np.ndarray, images_b: np.ndarray) -> float:
    return frechet_distance(embed_stats(model, images_a), embed_stats(model, images_b))


# ---------------------------------------------------------------------------
# perturbation battery


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # gaussian_noise | gaussian_blur | salt_pepper | dataset_mix
    levels: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "gaussian_blur", "salt_pepper", "dataset_mix"):
            raise MetricsError(f"unknown perturbation kind {self.kind!r}")
        lv = tuple(float(v) for v in self.levels)
        if len(lv) < 2 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise MetricsError(f"levels must be strictly increasing: {lv}")
        if lv[0] != 0.0:
            raise MetricsError("level 0 must be the identity (0.0)")
        object.__setattr__(self, "levels", lv)


DEFAULT_LEVELS = {
    "gaussian_noise": (0.0, 0.05, 0.1, 0.2, 0.4),
    "gaussian_blur": (0.0, 0.5, 1.0, 2.0, 4.0),
    "salt_pepper": (0.0, 0.01, 0.03, 0.1, 0.3),
    "dataset_mix": (0.0, 0.25, 0.5, 0.75, 1.0),
}


def alien_images(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Out-of-domain filler: random rectangles and stripes in [-1,1]."""
    out = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        img = np.full((size, size), rng.uniform(-1, 1), dtype=np.float32)
        if rng.uniform() < 0.5:
            for _ in range(rng.integers(3, 9)):
                x0, y0 = rng.integers(0, size, 2)
                w, h = rng.integers(4, size // 2, 2)
                img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(-1, 1)
        else:
            period = rng.integers(4, 17)
            phase = rng.uniform(0, period)
            hi, lo = rng.uniform(-1, 1, 2)
            coords = np.arange(size)
            grid = coords[None, :] if rng.uniform() < 0.5 else coords[:, None]
            stripe = ((grid + phase) // (period // 2 + 1)) % 2 == 0
            img = np.where(np.broadcast_to(stripe, (size, size)), hi, lo).astype(np.float32)
        out[i, 0] = img
    return out


def perturb(
    images: np.ndarray, kind: str, level: float, rng: np.random.Generator,
    aliens: np.ndarray | None = None,
) -> np.ndarray:
    """Apply one perturbation at one level; level 0 returns the input."""
    if level == 0.0:
        return images
    if kind == "gaussian_noise":
        return np.clip(
            images + rng.normal(0.0, level, size=images.shape).astype(np.float32),
            -1.0, 1.0,
        )
    if kind == "gaussian_blur":
        out = np.empty_like(images)
        for i in range(images.shape[0]):
            out[i, 0] = ndimage.gaussian_filter(images[i, 0], sigma=level)
        return out
    if kind == "salt_pepper":
        out = images.copy()
        flip = rng.uniform(size=images.shape) < level
        values = np.where(rng.uniform(size=images.shape) < 0.5, -1.0, 1.0).astype(np.float32)
        out[flip] = values[flip]
        return out
    if kind == "dataset_mix":
        if aliens is None:
            raise MetricsError("dataset_mix needs alien images")
        n = images.shape[0]
        k = int(np.ceil(level * n))
        out = images.copy()
        out[:k] = aliens[:k]
        return out
    raise MetricsError(f"unknown perturbation kind {kind!r}")


def perturbation_battery(
    model: EmbeddingModel,
    real: np.ndarray,
    spec: PerturbationSpec,
    rng: np.random.Generator,
    aliens: np.ndarray | None = None,
) -> list[dict]:
    """FCD(real, perturb(real, level)) per level. For dataset_mix, alien
    images are generated from rng unless supplied (e.g. a user directory)."""
    if spec.kind == "dataset_mix" and aliens is None:
        aliens = alien_images(rng, real.shape[0], real.shape[-1])
    ref = embed_stats(model, real)
    curve = []
    for level in spec.levels:
        images = perturb(real, spec.kind, level, rng, aliens)
        curve.append({
            "level": level,
            "fcd": frechet_distance(ref, embed_stats(model, images)),
        })
    return curve
