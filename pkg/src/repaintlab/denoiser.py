"""Residual U-Net that predicts, from (x_t, t), the per-pixel noise estimate
and a raw variance-interpolation logit (squashed to [0,1] by the caller via
sigmoid; see forward()).

Architecture (per residual block): group_norm -> silu -> conv, twice, with a
projection of the timestep embedding added after the first conv; a 1x1 skip
convolution whenever the channel count changes. Self-attention layers are
inserted after each residual block whose feature-map side length is listed in
`attention_resolutions`, in both the encoding and decoding paths. The final
output projection is zero-initialized, so a freshly built network predicts
exactly zero noise and raw variance logit zero.

Checkpoint layout: a directory holding `config.json` and `params.ndt`, the
latter a concatenation of (u16 path length, UTF-8 path, NDT1 record) entries
in sorted path order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore
from .ndcore import Tensor
from .ndcore.array import NdError, read_ndt, write_ndt


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    input_size: int = 64
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2, 4)
    res_blocks_encoder: tuple[int, ...] = (2, 2, 2, 1)
    attention_resolutions: tuple[int, ...] = (8, 16, 32)
    time_embed_dim: int = 128
    out_channels: int = 2  # noise estimate + variance logit, per input channel

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        object.__setattr__(self, "res_blocks_encoder", tuple(self.res_blocks_encoder))
        object.__setattr__(
            self, "attention_resolutions", tuple(sorted(self.attention_resolutions))
        )
        levels = len(self.channel_mult)
        if len(self.res_blocks_encoder) != levels:
            raise DenoiserError(
                f"res_blocks_encoder has {len(self.res_blocks_encoder)} entries "
                f"for {levels} levels"
            )
        size = self.input_size
        if size < 2 ** (levels - 1) or size & (size - 1):
            raise DenoiserError(
                f"input_size {size} is not a power of two covering {levels} levels"
            )
        if self.time_embed_dim % 2:
            raise DenoiserError("time_embed_dim must be even")
        produced = {size >> lvl for lvl in range(levels)}
        missing = set(self.attention_resolutions) - produced
        if missing:
            raise DenoiserError(
                f"attention resolution(s) {sorted(missing)} not produced by the "
                f"level structure (feature maps: {sorted(produced, reverse=True)})"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_mult[level]

    def resolution(self, level: int) -> int:
        return self.input_size >> level


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


# parameter plan: (path, shape, init) with init in {"he", "zeros", "ones"}


def _res_block_plan(prefix: str, cin: int, cout: int, temb: int):
    plan = [
        (f"{prefix}.gn1.g", (cin,), "ones"),
        (f"{prefix}.gn1.b", (cin,), "zeros"),
        (f"{prefix}.conv1.w", (cout, cin, 3, 3), "he"),
        (f"{prefix}.conv1.b", (cout,), "zeros"),
        (f"{prefix}.emb.w", (cout, temb), "he"),
        (f"{prefix}.emb.b", (cout,), "zeros"),
        (f"{prefix}.gn2.g", (cout,), "ones"),
        (f"{prefix}.gn2.b", (cout,), "zeros"),
        (f"{prefix}.conv2.w", (cout, cout, 3, 3), "zeros"),
        (f"{prefix}.conv2.b", (cout,), "zeros"),
    ]
    if cin != cout:
        plan.append((f"{prefix}.skip.w", (cout, cin, 1, 1), "he"))
        plan.append((f"{prefix}.skip.b", (cout,), "zeros"))
    return plan


def _attn_plan(prefix: str, c: int):
    return [
        (f"{prefix}.gn.g", (c,), "ones"),
        (f"{prefix}.gn.b", (c,), "zeros"),
        (f"{prefix}.qkv.w", (3 * c, c), "he"),
        (f"{prefix}.out.w", (c, c), "zeros"),
    ]


def parameter_plan(config: DenoiserConfig):
    """Ordered list of (path, shape, init) for every parameter."""
    temb = config.time_embed_dim
    ch0 = config.channels(0)
    plan = [
        ("time.fc1.w", (temb, temb), "he"),
        ("time.fc1.b", (temb,), "zeros"),
        ("time.fc2.w", (temb, temb), "he"),
        ("time.fc2.b", (temb,), "zeros"),
        ("stem.w", (ch0, 1, 3, 3), "he"),
        ("stem.b", (ch0,), "zeros"),
    ]
    for lvl in range(config.levels):
        ch = config.channels(lvl)
        attn = config.resolution(lvl) in config.attention_resolutions
        for i in range(config.res_blocks_encoder[lvl]):
            plan += _res_block_plan(f"enc{lvl}.res{i}", ch, ch, temb)
            if attn:
                plan += _attn_plan(f"enc{lvl}.attn{i}", ch)
        if lvl + 1 < config.levels:
            nxt = config.channels(lvl + 1)
            plan.append((f"down{lvl}.w", (nxt, ch, 3, 3), "he"))
            plan.append((f"down{lvl}.b", (nxt,), "zeros"))
    for lvl in reversed(range(config.levels)):
        ch = config.channels(lvl)
        attn = config.resolution(lvl) in config.attention_resolutions
        for i in range(config.res_blocks_encoder[lvl]):
            plan += _res_block_plan(f"dec{lvl}.res{i}", 2 * ch, ch, temb)
            if attn:
                plan += _attn_plan(f"dec{lvl}.attn{i}", ch)
        if lvl > 0:
            prv = config.channels(lvl - 1)
            plan.append((f"up{lvl}.w", (prv, ch, 3, 3), "he"))
            plan.append((f"up{lvl}.b", (prv,), "zeros"))
    plan += [
        ("head.gn.g", (ch0,), "ones"),
        ("head.gn.b", (ch0,), "zeros"),
        ("head.w", (config.out_channels, ch0, 3, 3), "zeros"),
        ("head.b", (config.out_channels,), "zeros"),
    ]
    return plan


def param_count(config: DenoiserConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_plan(config))


def build(config: DenoiserConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministically initialized parameter map (float32)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x6E65,)))
    params: dict[str, np.ndarray] = {}
    for path, shape, init in parameter_plan(config):
        if init == "zeros":
            params[path] = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            params[path] = np.ones(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            std = 1.0 / np.sqrt(fan_in)
            params[path] = (rng.standard_normal(shape, dtype=np.float32) * std).astype(
                np.float32
            )
    return params


# ---------------------------------------------------------------------------
# forward pass


def _as_tensor_map(params) -> dict[str, Tensor]:
    out = {}
    for k, v in params.items():
        out[k] = v if isinstance(v, Tensor) else ndcore.constant(v)
    return out


def _res_block(p, prefix: str, x: Tensor, emb: Tensor, cin: int, cout: int) -> Tensor:
    # all activations channels-last [N,H,W,C]
    h = ndcore.group_norm_nhwc(
        x, _num_groups(cin), p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"]
    )
    h = ndcore.conv2d_nhwc(ndcore.silu(h), p[f"{prefix}.conv1.w"], 1, 1)
    h = ndcore.add(h, p[f"{prefix}.conv1.b"])
    eproj = ndcore.matmul(ndcore.silu(emb), _transpose(p[f"{prefix}.emb.w"]))
    eproj = ndcore.add(eproj, ndcore.reshape(p[f"{prefix}.emb.b"], (1, cout)))
    h = ndcore.add(h, ndcore.reshape(eproj, (eproj.shape[0], 1, 1, cout)))
    h = ndcore.group_norm_nhwc(
        h, _num_groups(cout), p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"]
    )
    h = ndcore.conv2d_nhwc(ndcore.silu(h), p[f"{prefix}.conv2.w"], 1, 1)
    h = ndcore.add(h, p[f"{prefix}.conv2.b"])
    if cin != cout:
        x = ndcore.conv2d_nhwc(x, p[f"{prefix}.skip.w"], 1, 0)
        x = ndcore.add(x, p[f"{prefix}.skip.b"])
    return ndcore.add(h, x)


def _transpose(t: Tensor) -> Tensor:
    return Tensor(
        np.ascontiguousarray(t.value.T),
        requires_grad=t.requires_grad,
        parents=(t,),
        bwd=(lambda g: (np.ascontiguousarray(g.T),)) if t.requires_grad else None,
    )


def _attn_block(p, prefix: str, x: Tensor, c: int) -> Tensor:
    h = ndcore.group_norm_nhwc(x, _num_groups(c), p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"])
    h = ndcore.self_attention_nhwc(h, p[f"{prefix}.qkv.w"], p[f"{prefix}.out.w"], heads=1)
    return ndcore.add(h, x)


def forward(config: DenoiserConfig, params, x_t, t) -> tuple[Tensor, Tensor]:
    """Run the U-Net. x_t: [N,1,H,W]; t: int timesteps, one per sample.

    Returns (eps_hat, v_hat), both [N,1,H,W]; v_hat = sigmoid(raw logit).
    """
    p = _as_tensor_map(params)
    x = x_t if isinstance(x_t, Tensor) else ndcore.constant(np.asarray(x_t))
    n = x.shape[0]
    if x.shape[1] != 1 or x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise DenoiserError(
            f"input must be [N,1,{config.input_size},{config.input_size}], "
            f"got {tuple(x.shape)}"
        )
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))

    temb = ndcore.timestep_embedding(t, config.time_embed_dim, T=10_000)
    emb = ndcore.constant(temb.astype(x.value.dtype))
    emb = ndcore.add(
        ndcore.matmul(emb, _transpose(p["time.fc1.w"])),
        ndcore.reshape(p["time.fc1.b"], (1, config.time_embed_dim)),
    )
    emb = ndcore.add(
        ndcore.matmul(ndcore.silu(emb), _transpose(p["time.fc2.w"])),
        ndcore.reshape(p["time.fc2.b"], (1, config.time_embed_dim)),
    )

    ch0 = config.channels(0)
    s = config.input_size
    # single-channel input: NCHW -> NHWC is a pure reshape
    h = ndcore.conv2d_nhwc(ndcore.reshape(x, (n, s, s, 1)), p["stem.w"], 1, 1)
    h = ndcore.add(h, p["stem.b"])

    skips: list[Tensor] = []
    for lvl in range(config.levels):
        ch = config.channels(lvl)
        attn = config.resolution(lvl) in config.attention_resolutions
        for i in range(config.res_blocks_encoder[lvl]):
            h = _res_block(p, f"enc{lvl}.res{i}", h, emb, ch, ch)
            if attn:
                h = _attn_block(p, f"enc{lvl}.attn{i}", h, ch)
            skips.append(h)
        if lvl + 1 < config.levels:
            h = ndcore.conv2d_nhwc(h, p[f"down{lvl}.w"], 2, 1)
            h = ndcore.add(h, p[f"down{lvl}.b"])

    for lvl in reversed(range(config.levels)):
        ch = config.channels(lvl)
        attn = config.resolution(lvl) in config.attention_resolutions
        for i in range(config.res_blocks_encoder[lvl]):
            h = _res_block(
                p, f"dec{lvl}.res{i}", ndcore.concat_channels(h, skips.pop()), emb,
                2 * ch, ch,
            )
            if attn:
                h = _attn_block(p, f"dec{lvl}.attn{i}", h, ch)
        if lvl > 0:
            h = ndcore.upsample_nearest2x(h)
            h = ndcore.conv2d_nhwc(h, p[f"up{lvl}.w"], 1, 1)
            h = ndcore.add(h, p[f"up{lvl}.b"])

    h = ndcore.group_norm_nhwc(h, _num_groups(ch0), p["head.gn.g"], p["head.gn.b"])
    h = ndcore.conv2d_nhwc(ndcore.silu(h), p["head.w"], 1, 1)
    h = ndcore.add(h, p["head.b"])  # [N,S,S,2]

    eps_hat = Tensor(
        np.ascontiguousarray(h.value[..., 0])[:, None],
        requires_grad=h.requires_grad,
        parents=(h,),
        bwd=_split_bwd(h.value.shape, 0) if h.requires_grad else None,
    )
    v_raw = Tensor(
        np.ascontiguousarray(h.value[..., 1])[:, None],
        requires_grad=h.requires_grad,
        parents=(h,),
        bwd=_split_bwd(h.value.shape, 1) if h.requires_grad else None,
    )
    return eps_hat, ndcore.sigmoid(v_raw)


def _split_bwd(full_shape, channel):
    def bwd(g):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[..., channel] = g[:, 0]
        return (out,)

    return bwd


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir, config: DenoiserConfig, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    doc = asdict(config)
    if extra:
        doc.update(extra)
    (ckpt_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    with open(ckpt_dir / "params.ndt", "wb") as fh:
        for path in sorted(params):
            encoded = path.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            write_ndt(fh, params[path])


def load_checkpoint(ckpt_dir) -> tuple[DenoiserConfig, dict[str, np.ndarray], dict]:
    """Returns (config, params, extra) where extra holds non-config keys
    such as diffusion_steps."""
    ckpt_dir = Path(ckpt_dir)
    doc = json.loads((ckpt_dir / "config.json").read_text())
    fields = {f for f in DenoiserConfig.__dataclass_fields__}
    cfg_kwargs = {k: v for k, v in doc.items() if k in fields}
    extra = {k: v for k, v in doc.items() if k not in fields}
    config = DenoiserConfig(**cfg_kwargs)
    params: dict[str, np.ndarray] = {}
    with open(ckpt_dir / "params.ndt", "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise NdError("truncated checkpoint record header")
            (plen,) = struct.unpack("<H", head)
            path = fh.read(plen).decode("utf-8")
            params[path] = read_ndt(fh)
    expected = {p for p, _, _ in parameter_plan(config)}
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        surplus = sorted(set(params) - expected)[:3]
        raise DenoiserError(
            f"checkpoint does not match config: missing {missing}, surplus {surplus}"
        )
    return config, params, extra


class Denoiser:
    """A config plus frozen parameter map, convenient for inference."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: DenoiserConfig, seed: int) -> "Denoiser":
        return cls(config, build(config, seed))

    def __call__(self, x_t, t) -> tuple[np.ndarray, np.ndarray]:
        eps, v = forward(self.config, self.params, np.asarray(x_t), t)
        return eps.value, v.value

    def is_zero_init(self) -> bool:
        return not self.params["head.w"].any()

    def save(self, ckpt_dir, extra: dict | None = None) -> None:
        save_checkpoint(ckpt_dir, self.config, self.params, extra)

    @classmethod
    def load(cls, ckpt_dir) -> "Denoiser":
        config, params, _ = load_checkpoint(ckpt_dir)
        return cls(config, params)
