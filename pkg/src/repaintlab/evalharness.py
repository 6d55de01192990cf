"""Downstream validation of repainted patches: cell statistics in the hole,
classification consistency of the whole patch, coverage-binned reporting,
and the resampling-benefit boundary statistic.

The cell detector is deliberately classical and deterministic: a global
two-means intensity threshold, 4-connected components with an area band of
[4, 400] px, and centroid-in-region membership. Both images of a comparison
always go through the same detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .metrics import EmbeddingModel, fcd
from .repaint import Mask, repaint
from .rng import substream
from .synthlab import Corpus, make_mask


class EvalError(RuntimeError):
    pass


MIN_CELL_AREA = 4
MAX_CELL_AREA = 400
LOW_CONFIDENCE_AREA = 64
CONTRAST_FLOOR = 0.2  # below this two-means mode separation: no cells


@dataclass(frozen=True)
class CellStats:
    count: int
    density: float  # cells per px^2 of region
    mean_size: float  # mean detected component area, px
    region_area: int
    low_confidence: bool = False


def _two_means_threshold(img: np.ndarray) -> float | None:
    """Midpoint between the two intensity modes; None when the histogram is
    effectively unimodal (blank or contrast-free input)."""
    t = float(img.mean())
    for _ in range(64):
        lo = img[img < t]
        hi = img[img >= t]
        if lo.size == 0 or hi.size == 0:
            return None
        t_new = (float(lo.mean()) + float(hi.mean())) / 2.0
        if abs(t_new - t) < 1e-6:
            t = t_new
            break
        t = t_new
    lo = img[img < t]
    hi = img[img >= t]
    if lo.size == 0 or hi.size == 0 or float(hi.mean() - lo.mean()) < CONTRAST_FLOOR:
        return None
    return t


def detect_cells(patch: np.ndarray, region: np.ndarray) -> tuple[CellStats, list[dict]]:
    """Detect dark cell bodies; count those whose centroid lies in the boolean
    [H,W] region. The threshold is global (whole patch)."""
    img = patch[0] if patch.ndim == 3 else patch
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EvalError("empty region")
    region_area = int(region.sum())
    low_conf = region_area < LOW_CONFIDENCE_AREA

    thr = _two_means_threshold(img)
    records: list[dict] = []
    if thr is not None:
        binary = img < thr
        labels, n = ndimage.label(binary, structure=ndimage.generate_binary_structure(2, 1))
        if n:
            areas = np.bincount(labels.ravel())
            ys = np.bincount(labels.ravel(), weights=np.broadcast_to(
                np.arange(img.shape[0])[:, None], img.shape).ravel())
            xs = np.bincount(labels.ravel(), weights=np.broadcast_to(
                np.arange(img.shape[1])[None, :], img.shape).ravel())
            h, w = img.shape
            for lab in range(1, n + 1):
                area = int(areas[lab])
                if not MIN_CELL_AREA <= area <= MAX_CELL_AREA:
                    continue
                cy = ys[lab] / area
                cx = xs[lab] / area
                iy = min(max(int(round(cy)), 0), h - 1)
                ix = min(max(int(round(cx)), 0), w - 1)
                if region[iy, ix]:
                    records.append({"x": cx, "y": cy, "area": area})
    count = len(records)
    stats = CellStats(
        count=count,
        density=count / region_area,
        mean_size=float(np.mean([r["area"] for r in records])) if records else 0.0,
        region_area=region_area,
        low_confidence=low_conf,
    )
    return stats, records


@dataclass(frozen=True)
class CellStatError:
    density_err: float
    size_err: float
    degenerate: bool


def _relative_error(intact: float, repaired: float) -> tuple[float, bool]:
    if intact == 0.0:
        return (0.0, False) if repaired == 0.0 else (1.0, True)
    return abs(repaired - intact) / max(intact, 1e-9), False


def cellstat_error(
    intact: np.ndarray, repaired: np.ndarray, hole: np.ndarray
) -> CellStatError:
    """Relative density/size error between the intact and repaired patch,
    measured by the same detector restricted to the hole region."""
    if intact.shape != repaired.shape:
        raise EvalError(f"shape mismatch {intact.shape} vs {repaired.shape}")
    s_int, _ = detect_cells(intact, hole)
    s_rep, _ = detect_cells(repaired, hole)
    d_err, d_deg = _relative_error(s_int.density, s_rep.density)
    s_err, s_deg = _relative_error(s_int.mean_size, s_rep.mean_size)
    return CellStatError(d_err, s_err, d_deg or s_deg)


def top2_consistency(
    logits_intact: np.ndarray, logits_repaired: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """k1: top-1 classes match; k2: the intact top-1 class appears among the
    repaired patch's two most likely classes. k1 implies k2 by construction."""
    top_int = logits_intact.argmax(axis=1)
    order = np.argsort(logits_repaired, axis=1)[:, ::-1]
    k1 = top_int == order[:, 0]
    k2 = k1 | (top_int == order[:, 1])
    return k1, k2


def classification_consistency(
    model: EmbeddingModel, intact: np.ndarray, repaired: np.ndarray
) -> tuple[bool, bool]:
    logits = model.logits(np.stack([intact, repaired]))
    k1, k2 = top2_consistency(logits[0:1], logits[1:2])
    return bool(k1[0]), bool(k2[0])


def _consistency_batch(model, intact_set, repaired_set):
    return top2_consistency(model.logits(intact_set), model.logits(repaired_set))


def boundary_discontinuity(image: np.ndarray, mask: Mask) -> float:
    """Mean squared intensity difference across the hole boundary: all
    4-adjacent (hole pixel, known pixel) pairs."""
    img = image[0] if image.ndim == 3 else image
    hole = mask.known == 0
    known = ~hole
    total, count = 0.0, 0
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        a_sl = (slice(max(dy, 0), img.shape[0] + min(dy, 0)),
                slice(max(dx, 0), img.shape[1] + min(dx, 0)))
        b_sl = (slice(max(-dy, 0), img.shape[0] + min(-dy, 0)),
                slice(max(-dx, 0), img.shape[1] + min(-dx, 0)))
        pair = hole[a_sl] & known[b_sl]
        diff = img[a_sl][pair] - img[b_sl][pair]
        total += float((diff * diff).sum())
        count += int(pair.sum())
    if count == 0:
        raise EvalError("mask has no hole boundary")
    return total / count


# ---------------------------------------------------------------------------
# the binned evaluation run


BIN_EDGES = [round(0.05 * i, 2) for i in range(1, 11)]  # 0.05 .. 0.50


def _bin_index(coverage: float) -> int:
    c = min(max(coverage, 0.05), 0.50 - 1e-9)
    return min(int((c - 0.05) / 0.05), 8)


def _mean_fill(intact: np.ndarray, mask: Mask) -> np.ndarray:
    known = mask.known == 1
    fill = float(intact[0][known].mean())
    out = intact.copy()
    out[0][~known] = fill
    return out


def run_evaluation(
    schedule: NoiseSchedule,
    model: Denoiser,
    embedder: EmbeddingModel,
    corpus: Corpus,
    n: int,
    j: int,
    seed: int,
    batch_size: int = 50,
    coverage_range: tuple[float, float] = (0.05, 0.50),
) -> dict:
    """Repaint n held-out patches with random-coverage masks, then aggregate
    per-bin medians of the cell-statistics errors, k1/k2 consistency rates,
    and set-level FCD scores against the mean-fill baseline."""
    eval_idx = corpus.eval_idx
    if n > len(eval_idx):
        raise EvalError(f"requested {n} patches but eval split has {len(eval_idx)}")
    order = substream(seed, "eval.select").permutation(len(eval_idx))
    chosen = eval_idx[order[:n]]
    coverages = substream(seed, "eval.coverage").uniform(*coverage_range, size=n)
    mask_seeds = substream(seed, "eval.maskseed").integers(2**31, size=n)

    size = corpus.size
    records = []
    repaired_all = np.empty((n, 1, size, size), dtype=np.float32)
    baseline_all = np.empty_like(repaired_all)
    intact_all = corpus.patches[chosen]

    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        idxs = list(range(start, stop))
        try:
            masks = [make_mask(size, float(coverages[i]), int(mask_seeds[i])) for i in idxs]
            rngs = [substream(seed, f"eval.patch{i}") for i in idxs]
            x0 = intact_all[start:stop]
            out = repaint(schedule, model, x0, masks, j, rngs)
        except Exception as exc:
            raise EvalError(
                f"repaint failed for patch batch starting at index {start} "
                f"(seed {seed}): {exc}"
            ) from exc
        repaired_all[start:stop] = out
        for bi, i in enumerate(idxs):
            try:
                mask = masks[bi]
                hole = mask.known == 0
                baseline_all[i] = _mean_fill(intact_all[i], mask)
                err = cellstat_error(intact_all[i], repaired_all[i], hole)
                err_base = cellstat_error(intact_all[i], baseline_all[i], hole)
                records.append({
                    "patch": int(chosen[i]),
                    "coverage": mask.coverage,
                    "bin": _bin_index(mask.coverage),
                    "density_err": err.density_err,
                    "size_err": err.size_err,
                    "degenerate": err.degenerate,
                    "baseline_density_err": err_base.density_err,
                    "baseline_size_err": err_base.size_err,
                })
            except Exception as exc:
                raise EvalError(
                    f"evaluation failed at patch index {i} (seed {seed}): {exc}"
                ) from exc

    if n:
        k1_flags, k2_flags = _consistency_batch(embedder, intact_all, repaired_all)
        for i, rec in enumerate(records):
            rec["k1"] = bool(k1_flags[i])
            rec["k2"] = bool(k2_flags[i])

    def _median(vals):
        return float(np.median(vals)) if len(vals) else None

    bins = []
    for b in range(9):
        rows = [r for r in records if r["bin"] == b]
        bins.append({
            "lo": BIN_EDGES[b],
            "hi": BIN_EDGES[b + 1],
            "n": len(rows),
            "k1_rate": float(np.mean([r["k1"] for r in rows])) if rows else None,
            "k2_rate": float(np.mean([r["k2"] for r in rows])) if rows else None,
            "density_err_median": _median([r["density_err"] for r in rows]),
            "size_err_median": _median([r["size_err"] for r in rows]),
            "baseline_density_err_median": _median([r["baseline_density_err"] for r in rows]),
            "baseline_size_err_median": _median([r["baseline_size_err"] for r in rows]),
        })

    report = {
        "n": n,
        "j": j,
        "seed": seed,
        "coverage_range": list(coverage_range),
        "bins": bins,
        "pooled": {
            "k1_rate": float(np.mean([r["k1"] for r in records])) if records else None,
            "k2_rate": float(np.mean([r["k2"] for r in records])) if records else None,
            "density_err_median": _median([r["density_err"] for r in records]),
            "size_err_median": _median([r["size_err"] for r in records]),
            "baseline_density_err_median": _median(
                [r["baseline_density_err"] for r in records]),
            "baseline_size_err_median": _median(
                [r["baseline_size_err"] for r in records]),
        },
        "fcd_repaired_vs_intact": (
            fcd(embedder, repaired_all, intact_all) if n >= 64 else None
        ),
        "fcd_baseline_vs_intact": (
            fcd(embedder, baseline_all, intact_all) if n >= 64 else None
        ),
    }
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def resampling_benefit(
    schedule: NoiseSchedule,
    model: Denoiser,
    corpus: Corpus,
    n: int,
    seed: int,
    jumps: tuple[int, int] = (1, 5),
    coverage: float = 0.25,
    batch_size: int = 50,
) -> dict:
    """Mean squared hole-boundary discontinuity after repainting the same
    patches/masks with each jump length."""
    eval_idx = corpus.eval_idx
    order = substream(seed, "bench.select").permutation(len(eval_idx))
    chosen = eval_idx[order[:n]]
    mask_seeds = substream(seed, "bench.maskseed").integers(2**31, size=n)
    masks = [make_mask(corpus.size, coverage, int(s)) for s in mask_seeds]
    out = {}
    for j in jumps:
        vals = []
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            rngs = [substream(seed, f"bench.j{j}.patch{i}") for i in range(start, stop)]
            rep = repaint(
                schedule, model, corpus.patches[chosen[start:stop]],
                masks[start:stop], j, rngs,
            )
            vals += [
                boundary_discontinuity(rep[k], masks[start + k])
                for k in range(stop - start)
            ]
        out[f"j{j}"] = float(np.mean(vals))
    return out
