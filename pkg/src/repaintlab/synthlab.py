"""Procedural cytoarchitecture-like patches with exact cell ground truth,
plus irregular artifact masks with calibrated coverage.

Patches are horizontal laminar bands; within each band, cell centers follow
an inhomogeneous Poisson process whose intensity is the band density
modulated along x by a cosine "columnarity" term. Candidates overlapping
already-placed cells by more than 60% of their area are rejected. Cells are
rendered as dark anti-aliased ellipses over a lighter background, with mild
film grain on top. Every rendered cell is recorded in the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pngio import load_patch, save_patch
from .repaint import Mask
from .rng import substream


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class TextureSpec:
    class_id: int
    layer_boundaries: tuple[float, ...]  # fractions of height, strictly increasing
    layer_density: tuple[float, ...]  # cells per px^2, one per layer
    cell_radius_mean: tuple[float, ...]  # px, per layer
    cell_radius_sigma: tuple[float, ...]
    cell_eccentricity: tuple[tuple[float, float], ...]  # (lo,hi) axis ratio b/a
    columnarity: float  # in [0,1]; vertical-column density modulation
    column_period: float  # px
    background: float  # intensity in [-1,1]
    cell_intensity: float = -0.75
    seed: int = 0

    def __post_init__(self):
        b = tuple(float(v) for v in self.layer_boundaries)
        if any(not 0.0 < v < 1.0 for v in b) or list(b) != sorted(set(b)):
            raise SynthError(f"layer boundaries must be strictly increasing in (0,1): {b}")
        n_layers = len(b) + 1
        for name, seq in (
            ("layer_density", self.layer_density),
            ("cell_radius_mean", self.cell_radius_mean),
            ("cell_radius_sigma", self.cell_radius_sigma),
            ("cell_eccentricity", self.cell_eccentricity),
        ):
            if len(seq) != n_layers:
                raise SynthError(f"{name} needs {n_layers} entries, got {len(seq)}")
        if any(d < 0 for d in self.layer_density):
            raise SynthError("densities must be >= 0")
        if any(r <= 0 for r in self.cell_radius_mean):
            raise SynthError("radii must be > 0")
        if not 0.0 <= self.columnarity <= 1.0:
            raise SynthError("columnarity must lie in [0,1]")
        object.__setattr__(self, "layer_boundaries", b)
        object.__setattr__(self, "layer_density", tuple(map(float, self.layer_density)))
        object.__setattr__(self, "cell_radius_mean", tuple(map(float, self.cell_radius_mean)))
        object.__setattr__(self, "cell_radius_sigma", tuple(map(float, self.cell_radius_sigma)))
        object.__setattr__(
            self, "cell_eccentricity",
            tuple((float(lo), float(hi)) for lo, hi in self.cell_eccentricity),
        )

    @property
    def n_layers(self) -> int:
        return len(self.layer_boundaries) + 1

    def layer_rows(self, size: int, layer: int) -> tuple[int, int]:
        edges = [0.0, *self.layer_boundaries, 1.0]
        return int(round(edges[layer] * size)), int(round(edges[layer + 1] * size))

    def row_density(self, size: int) -> np.ndarray:
        """Expected cell density per image row (the vertical profile)."""
        prof = np.zeros(size)
        for layer in range(self.n_layers):
            y0, y1 = self.layer_rows(size, layer)
            prof[y0:y1] = self.layer_density[layer]
        return prof


@dataclass(frozen=True)
class CellRecord:
    x: float
    y: float
    a: float  # semi-major axis, px
    b: float  # semi-minor axis, px
    theta: float  # orientation, radians
    layer: int

    @property
    def area(self) -> float:
        return float(np.pi * self.a * self.b)


@dataclass
class GroundTruth:
    cells: list[CellRecord]

    def region_stats(self, region: np.ndarray) -> dict:
        """Exact stats for cells whose center lies in a boolean [H,W] region."""
        h, w = region.shape
        inside = [
            c for c in self.cells
            if region[min(max(int(round(c.y)), 0), h - 1),
                      min(max(int(round(c.x)), 0), w - 1)]
        ]
        area = float(region.sum())
        count = len(inside)
        return {
            "count": count,
            "density": count / area if area else 0.0,
            "mean_size": float(np.mean([c.area for c in inside])) if inside else 0.0,
            "region_area": area,
        }


def _ellipse_coverage(size: int, cell: CellRecord) -> tuple[slice, slice, np.ndarray]:
    """Anti-aliased per-pixel coverage of an ellipse within its bounding box."""
    r = max(cell.a, cell.b)
    x0 = max(int(np.floor(cell.x - r - 1)), 0)
    x1 = min(int(np.ceil(cell.x + r + 2)), size)
    y0 = max(int(np.floor(cell.y - r - 1)), 0)
    y1 = min(int(np.ceil(cell.y + r + 2)), size)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cell.x
    dy = ys - cell.y
    ct, st = np.cos(cell.theta), np.sin(cell.theta)
    u = (dx * ct + dy * st) / cell.a
    v = (-dx * st + dy * ct) / cell.b
    rho = np.sqrt(u * u + v * v)
    # ~1px-wide linear edge ramp centered on the ellipse boundary
    cov = np.clip(0.5 + (1.0 - rho) * min(cell.a, cell.b), 0.0, 1.0)
    return slice(y0, y1), slice(x0, x1), cov


def generate_patch(spec: TextureSpec, size: int) -> tuple[np.ndarray, GroundTruth]:
    """Render one patch. Returns ([1,H,W] float32 in [-1,1], GroundTruth)."""
    if size < 32:
        raise SynthError(f"patch size must be >= 32, got {size}")
    if spec.n_layers == 0 or all(d == 0 for d in spec.layer_density):
        pass  # blank patches are legitimate
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed))
    img = np.full((size, size), spec.background, dtype=np.float64)
    occupied = np.zeros((size, size), dtype=bool)
    cells: list[CellRecord] = []

    for layer in range(spec.n_layers):
        y0, y1 = spec.layer_rows(size, layer)
        density = spec.layer_density[layer]
        band_area = (y1 - y0) * size
        if band_area <= 0 or density <= 0:
            continue
        lam_max = density * (1.0 + spec.columnarity)
        n_cand = rng.poisson(lam_max * band_area)
        for _ in range(n_cand):
            x = rng.uniform(0, size)
            y = rng.uniform(y0, y1)
            # thin the homogeneous candidate process down to the modulated one
            accept = (1.0 + spec.columnarity * np.cos(2 * np.pi * x / spec.column_period)) / (
                1.0 + spec.columnarity
            )
            if rng.uniform() > accept:
                continue
            a = max(rng.normal(spec.cell_radius_mean[layer], spec.cell_radius_sigma[layer]), 1.2)
            lo, hi = spec.cell_eccentricity[layer]
            b = a * rng.uniform(lo, hi)
            theta = rng.uniform(0, np.pi)
            cell = CellRecord(x=x, y=y, a=a, b=b, theta=theta, layer=layer)
            ysl, xsl, cov = _ellipse_coverage(size, cell)
            body = cov > 0.5
            # reject contact as well as overlap: cell bodies keep a 1px
            # clearance so thresholded components rarely merge
            halo = ndimage.binary_dilation(body)
            if body.sum() == 0 or occupied[ysl, xsl][halo].any():
                continue
            shade = spec.cell_intensity + rng.normal(0.0, 0.05)
            img[ysl, xsl] += cov * (shade - img[ysl, xsl])
            occupied[ysl, xsl] |= body
            cells.append(cell)

    img += rng.normal(0.0, 0.02, size=img.shape)
    np.clip(img, -1.0, 1.0, out=img)
    return img[None].astype(np.float32), GroundTruth(cells)


# ---------------------------------------------------------------------------
# texture families


_FAMILIES = [
    dict(layer_boundaries=(0.5,), layer_density=(0.044, 0.016),
         cell_radius_mean=(1.9, 2.2), columnarity=0.0, column_period=16.0,
         background=0.80, cell_intensity=-0.78),
    dict(layer_boundaries=(0.5,), layer_density=(0.014, 0.046),
         cell_radius_mean=(2.3, 1.8), columnarity=0.0, column_period=16.0,
         background=0.58, cell_intensity=-0.58),
    dict(layer_boundaries=(0.33, 0.66), layer_density=(0.042, 0.015, 0.042),
         cell_radius_mean=(1.9, 2.4, 1.9), columnarity=0.0, column_period=16.0,
         background=0.72, cell_intensity=-0.90),
    dict(layer_boundaries=(0.45,), layer_density=(0.017, 0.034),
         cell_radius_mean=(2.2, 2.0), columnarity=0.9, column_period=12.0,
         background=0.86, cell_intensity=-0.66),
    dict(layer_boundaries=(), layer_density=(0.046,),
         cell_radius_mean=(1.8,), columnarity=0.85, column_period=20.0,
         background=0.50, cell_intensity=-0.95),
    dict(layer_boundaries=(0.3, 0.7), layer_density=(0.015, 0.042, 0.015),
         cell_radius_mean=(2.4, 1.9, 2.4), columnarity=0.0, column_period=16.0,
         background=0.92, cell_intensity=-0.85),
    dict(layer_boundaries=(0.25, 0.5, 0.75), layer_density=(0.044, 0.017, 0.044, 0.017),
         cell_radius_mean=(1.9, 2.3, 1.9, 2.3), columnarity=0.0, column_period=16.0,
         background=0.64, cell_intensity=-0.62),
    dict(layer_boundaries=(0.6,), layer_density=(0.048, 0.012),
         cell_radius_mean=(1.8, 2.6), columnarity=0.5, column_period=16.0,
         background=0.76, cell_intensity=-0.92),
]

SEPARABILITY_FLOOR = 0.004  # mean |density difference| per row, cells/px^2


def class_templates(K: int) -> list[TextureSpec]:
    """The K built-in texture families (K in [2, 8]), separable by their
    vertical density profiles."""
    if not 2 <= K <= len(_FAMILIES):
        raise SynthError(f"K must be in [2, {len(_FAMILIES)}], got {K}")
    specs = []
    for cid in range(K):
        fam = _FAMILIES[cid]
        n_layers = len(fam["layer_boundaries"]) + 1
        specs.append(TextureSpec(
            class_id=cid,
            layer_boundaries=fam["layer_boundaries"],
            layer_density=fam["layer_density"],
            cell_radius_mean=fam["cell_radius_mean"],
            cell_radius_sigma=(0.18,) * n_layers,
            cell_eccentricity=((0.80, 0.95),) * n_layers,
            columnarity=fam["columnarity"],
            column_period=fam["column_period"],
            background=fam["background"],
            cell_intensity=fam["cell_intensity"],
        ))
    _check_separability(specs)
    return specs


def _check_separability(specs: list[TextureSpec], size: int = 64) -> None:
    profiles = [s.row_density(size) for s in specs]
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            gap = float(np.abs(profiles[i] - profiles[j]).mean())
            if gap < SEPARABILITY_FLOOR:
                raise SynthError(
                    f"classes {i} and {j} are not separable: mean profile "
                    f"gap {gap:.4f} < {SEPARABILITY_FLOOR}"
                )


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    """In-memory corpus. Pixel values are quantized to the 8-bit PNG grid at
    generation time, so the in-memory corpus and a save/load round trip hold
    bit-identical rasters."""

    size: int
    seed: int
    n_per_class: int
    classes: list[TextureSpec]
    patches: np.ndarray  # [M,1,H,W] float32
    labels: np.ndarray  # [M] int64
    gts: list[GroundTruth]
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def train_patches(self) -> np.ndarray:
        return self.patches[self.train_idx]

    @property
    def eval_patches(self) -> np.ndarray:
        return self.patches[self.eval_idx]


def _quantize(patch: np.ndarray) -> np.ndarray:
    return (np.clip(np.round((patch + 1.0) * 127.5), 0, 255) / 127.5 - 1.0).astype(
        np.float32
    )


def make_corpus(K: int, n_per_class: int, size: int, seed: int) -> Corpus:
    """K texture families, n_per_class patches each, deterministic per-class
    85/15 train/eval split."""
    classes = class_templates(K)
    patches = np.empty((K * n_per_class, 1, size, size), dtype=np.float32)
    labels = np.empty(K * n_per_class, dtype=np.int64)
    gts: list[GroundTruth] = []
    for cid, template in enumerate(classes):
        seeder = substream(seed, f"synth.patches.{cid}")
        for i in range(n_per_class):
            spec = replace(template, seed=int(seeder.integers(2**31)))
            patch, gt = generate_patch(spec, size)
            idx = cid * n_per_class + i
            patches[idx] = _quantize(patch)
            labels[idx] = cid
            gts.append(gt)
    train_parts, eval_parts = [], []
    n_train = int(np.floor(0.85 * n_per_class))
    for cid in range(K):
        order = substream(seed, f"synth.split.{cid}").permutation(n_per_class)
        base = cid * n_per_class
        train_parts.append(base + order[:n_train])
        eval_parts.append(base + order[n_train:])
    return Corpus(
        size=size,
        seed=seed,
        n_per_class=n_per_class,
        classes=classes,
        patches=patches,
        labels=labels,
        gts=gts,
        train_idx=np.sort(np.concatenate(train_parts)),
        eval_idx=np.sort(np.concatenate(eval_parts)),
    )


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "groundtruth").mkdir(parents=True, exist_ok=True)
    for i in range(corpus.patches.shape[0]):
        save_patch(out / "patches" / f"{i:06d}.png", corpus.patches[i])
        with open(out / "groundtruth" / f"{i:06d}.jsonl", "w") as fh:
            for cell in corpus.gts[i].cells:
                fh.write(json.dumps(asdict(cell), sort_keys=True) + "\n")
    manifest = {
        "size": corpus.size,
        "seed": corpus.seed,
        "n_per_class": corpus.n_per_class,
        "classes": [asdict(s) for s in corpus.classes],
        "labels": corpus.labels.tolist(),
        "train": corpus.train_idx.tolist(),
        "eval": corpus.eval_idx.tolist(),
    }
    (out / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(corpus_dir, load_ground_truth: bool = True) -> Corpus:
    root = Path(corpus_dir)
    manifest = json.loads((root / "corpus.json").read_text())
    classes = []
    for doc in manifest["classes"]:
        doc = dict(doc)
        doc["layer_boundaries"] = tuple(doc["layer_boundaries"])
        doc["layer_density"] = tuple(doc["layer_density"])
        doc["cell_radius_mean"] = tuple(doc["cell_radius_mean"])
        doc["cell_radius_sigma"] = tuple(doc["cell_radius_sigma"])
        doc["cell_eccentricity"] = tuple(tuple(e) for e in doc["cell_eccentricity"])
        classes.append(TextureSpec(**doc))
    labels = np.asarray(manifest["labels"], dtype=np.int64)
    m = labels.shape[0]
    size = manifest["size"]
    patches = np.empty((m, 1, size, size), dtype=np.float32)
    gts: list[GroundTruth] = []
    for i in range(m):
        patches[i] = load_patch(root / "patches" / f"{i:06d}.png")
        if load_ground_truth:
            cells = []
            gt_path = root / "groundtruth" / f"{i:06d}.jsonl"
            for line in gt_path.read_text().splitlines():
                cells.append(CellRecord(**json.loads(line)))
            gts.append(GroundTruth(cells))
        else:
            gts.append(GroundTruth([]))
    return Corpus(
        size=size,
        seed=manifest["seed"],
        n_per_class=manifest["n_per_class"],
        classes=classes,
        patches=patches,
        labels=labels,
        gts=gts,
        train_idx=np.asarray(manifest["train"], dtype=np.int64),
        eval_idx=np.asarray(manifest["eval"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# artifact masks


def _paint_disk(canvas: np.ndarray, cx: float, cy: float, radius: float) -> None:
    size = canvas.shape[0]
    x0 = max(int(cx - radius) - 1, 0)
    x1 = min(int(cx + radius) + 2, size)
    y0 = max(int(cy - radius) - 1, 0)
    y1 = min(int(cy + radius) + 2, size)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] |= (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2


def _boundary(region: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Pixels of `region` 4-adjacent to `other`."""
    near = ndimage.binary_dilation(other, structure=ndimage.generate_binary_structure(2, 1))
    return region & near


def _known_islands(hole: np.ndarray) -> np.ndarray:
    """Known-region pixels not flood-reachable from the border."""
    known = ~hole
    labels, n = ndimage.label(known, structure=ndimage.generate_binary_structure(2, 1))
    if n == 0:
        return np.zeros_like(hole)
    border = np.zeros_like(hole)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    touching = np.unique(labels[border & known])
    island = known & ~np.isin(labels, touching)
    return island


def make_mask(size: int, target_coverage: float, seed: int) -> Mask:
    """Irregular hole from random-walk brush strokes, adjusted to the exact
    target pixel count; the known region always stays connected to the
    border. Returns a Mask (1 = known, 0 = hole)."""
    if not 0.05 - 1e-9 <= target_coverage <= 0.50 + 1e-9:
        raise SynthError(
            f"target coverage must lie in [0.05, 0.50], got {target_coverage}"
        )
    rng = substream(seed, "mask")
    target_px = int(round(target_coverage * size * size))
    hole = np.zeros((size, size), dtype=bool)

    guard = 0
    while hole.sum() < target_px:
        guard += 1
        if guard > 200:
            raise SynthError("unreachable coverage after bounded stroke attempts")
        x, y = rng.uniform(0, size, size=2)
        theta = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(4.0, 16.0)
        length = rng.uniform(size / 3, size)
        steps = max(int(length / 2), 1)
        for _ in range(steps):
            _paint_disk(hole, x, y, width / 2)
            theta += rng.normal(0.0, 0.4)
            x = float(np.clip(x + 2 * np.cos(theta), 0, size - 1))
            y = float(np.clip(y + 2 * np.sin(theta), 0, size - 1))
            if hole.sum() >= target_px:
                break

    for _round in range(100):
        island = _known_islands(hole)
        if island.any():
            hole |= island
        delta = int(hole.sum()) - target_px
        if delta == 0 and not _known_islands(hole).any():
            break
        if delta > 0:  # erode the hole where it meets known tissue
            ys, xs = np.nonzero(_boundary(hole, ~hole))
            take = min(delta, len(ys))
            hole[ys[:take], xs[:take]] = False
        elif delta < 0:  # dilate the hole into adjacent known tissue
            ys, xs = np.nonzero(_boundary(~hole, hole))
            take = min(-delta, len(ys))
            hole[ys[:take], xs[:take]] = True
    else:
        raise SynthError("unreachable coverage after bounded adjustment rounds")

    return Mask((~hole).astype(np.float32))
