"""Inpainting on top of the unconditional diffusion model.

At every reverse step the current state is composited from the forward-noised
known pixels and the generated unknown pixels, and each step is repeated j
times ("jump length") with a single-step re-noising between repeats. Mask
convention: 1 marks known/intact pixels, 0 marks the hole to fill.

Randomness: repaint() spawns two child streams from the rng it is given, in
this order: one for the known-side compositing noise, one for the sampling
chain (initial state, reverse steps, re-noising). With j=1 and an all-zero
mask the chain stream reproduces generate() exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser
from .diffusion import (
    NoiseSchedule,
    _draw_normal,
    q_sample,
    renoise_step,
    reverse_step,
)


class RepaintError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    """Binary raster; known.shape is [H,W]; 1 = known pixel, 0 = hole."""

    known: np.ndarray

    def __post_init__(self):
        known = np.asarray(self.known, dtype=np.float32)
        if known.ndim != 2:
            raise RepaintError(f"mask must be 2-D, got shape {known.shape}")
        if not np.isin(known, (0.0, 1.0)).all():
            raise RepaintError("mask must be strictly binary (0 or 1)")
        object.__setattr__(self, "known", known)

    @property
    def coverage(self) -> float:
        """Fraction of hole (mask=0) pixels."""
        return float((self.known == 0).mean())

    def batch(self) -> np.ndarray:
        """[1,1,H,W]-shaped view broadcastable over an [N,1,H,W] batch."""
        return self.known[None, None]


@dataclass(frozen=True)
class RepaintPlan:
    """Ordered transitions; kind "d" is denoise(t -> t-1), "r" is
    renoise(t-1 -> t)."""

    T: int
    j: int
    transitions: tuple[tuple[str, int], ...]

    def __len__(self):
        return len(self.transitions)


def make_plan(T: int, j: int) -> RepaintPlan:
    """Jump plan: for t = T..1, denoise j times with a re-noise between
    repeats. Length is T*(2j-1); j=1 degenerates to plain reverse diffusion."""
    if T < 1 or j < 1:
        raise RepaintError(f"need T >= 1 and j >= 1, got T={T}, j={j}")
    steps: list[tuple[str, int]] = []
    for t in range(T, 0, -1):
        for r in range(1, j + 1):
            steps.append(("d", t))
            if r < j:
                steps.append(("r", t))
    return RepaintPlan(T, j, tuple(steps))


def _composite_raw(schedule, x_t, x0_known, m, t, rng) -> np.ndarray:
    noise = _draw_normal(rng, x_t.shape, x_t.dtype)
    x_known = q_sample(schedule, x0_known, t, noise)
    return m * x_known + (1.0 - m) * x_t


def composite(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    x0_known: np.ndarray,
    mask: Mask,
    t: int,
    rng,
) -> np.ndarray:
    """mask * (known image diffused to step t) + (1-mask) * x_t.

    The known-side noise is freshly drawn from rng at every invocation.
    """
    if x_t.shape[-2:] != mask.known.shape:
        raise RepaintError(
            f"mask shape {mask.known.shape} does not match state {x_t.shape}"
        )
    return _composite_raw(schedule, x_t, x0_known, mask.batch(), t, rng)


def repaint(
    schedule: NoiseSchedule,
    model: Denoiser,
    x0_known: np.ndarray,
    mask: Mask | list[Mask],
    j: int,
    rng: np.random.Generator | list,
) -> np.ndarray:
    """Fill the mask=0 region of x0_known ([N,1,H,W] or [1,H,W]) by resampled
    reverse diffusion; known pixels are overwritten verbatim at the end.

    mask may be one Mask shared by the batch or one Mask per sample; rng may
    be a single Generator or one Generator per sample (independent per-sample
    streams). An all-zero mask degenerates to unconditional generation from
    the chain stream.
    """
    single = x0_known.ndim == 3
    x0 = x0_known[None] if single else x0_known
    x0 = np.asarray(x0, dtype=np.float32)
    if isinstance(mask, Mask):
        m = mask.batch()
    else:
        if len(mask) != x0.shape[0]:
            raise RepaintError(
                f"need one mask per sample: got {len(mask)} for batch {x0.shape[0]}"
            )
        m = np.stack([mk.known for mk in mask])[:, None]
    if m.shape[-2:] != x0.shape[-2:]:
        raise RepaintError(
            f"mask shape {m.shape[-2:]} does not match patches {x0.shape[-2:]}"
        )
    if model.is_zero_init():
        warnings.warn(
            "repainting with zero-initialized (untrained) denoiser parameters",
            stacklevel=2,
        )
    if isinstance(rng, np.random.Generator):
        rng_known, rng_chain = rng.spawn(2)
    else:
        pairs = [r.spawn(2) for r in rng]
        rng_known = [p[0] for p in pairs]
        rng_chain = [p[1] for p in pairs]

    plan = make_plan(schedule.T, j)
    x = _draw_normal(rng_chain, x0.shape, np.float32)
    for kind, t in plan.transitions:
        if kind == "d":
            x = _composite_raw(schedule, x, x0, m, t, rng_known)
            x = reverse_step(schedule, model, x, t, rng_chain)
        else:
            x = renoise_step(schedule, x, t, rng_chain)

    out = np.where(m == 1.0, x0, x)
    return out[0] if single else out
