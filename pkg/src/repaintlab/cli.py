"""Command-line entry point.

Subcommands wire the modules end to end: corpus synthesis, embedder and
denoiser training, unconditional sampling, repainting, FCD scoring, the
perturbation battery, and the repaint evaluation. Every artifact directory
receives a provenance.json with the tool version, resolved configuration,
seed, and input hashes.

Exit codes: 0 success, 1 config/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, parallel
from .config import ConfigError, load_run_config
from .denoiser import Denoiser
from .diffusion import cosine_schedule, generate, train
from .evalharness import report_to_json, run_evaluation
from .metrics import (
    DEFAULT_LEVELS,
    EmbeddingModel,
    PerturbationSpec,
    embed_stats,
    frechet_distance,
    perturbation_battery,
    train_embedder,
)
from .pngio import load_mask, load_patch, save_patch
from .repaint import Mask, repaint
from .rng import substream
from .synthlab import load_corpus, make_corpus, save_corpus


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_path(path) -> str:
    path = Path(path)
    if path.is_file():
        return _hash_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(bytes.fromhex(_hash_file(f)))
    return h.hexdigest()


def write_provenance(out_dir, command: str, config: dict, seed, inputs: dict) -> None:
    doc = {
        "tool": "repaintlab",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "input_hashes": {name: _hash_path(p) for name, p in inputs.items()},
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "provenance.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True)
    )


def _load_image_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("**/*.png"))
    if not files:
        raise ValueError(f"no PNG files under {path}")
    return np.stack([load_patch(f) for f in files])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config).corpus
    classes = args.classes if args.classes is not None else cfg.classes
    per_class = args.per_class if args.per_class is not None else cfg.per_class
    size = args.size if args.size is not None else cfg.size
    seed = args.seed if args.seed is not None else cfg.seed
    corpus = make_corpus(classes, per_class, size, seed)
    save_corpus(corpus, args.out)
    write_provenance(
        args.out, "synth",
        {"classes": classes, "per_class": per_class, "size": size}, seed, {},
    )
    print(json.dumps({"out": str(args.out), "patches": int(corpus.patches.shape[0])}))
    return 0


def cmd_train_embedder(args) -> int:
    cfg = load_run_config(args.config).metrics
    seed = args.seed if args.seed is not None else cfg.seed
    corpus = load_corpus(args.corpus, load_ground_truth=False)
    model = train_embedder(
        corpus, seed,
        steps=cfg.embed_steps, batch_size=cfg.embed_batch, learning_rate=cfg.embed_lr,
    )
    model.save(args.out)
    write_provenance(
        args.out, "train-embedder", dataclasses.asdict(cfg), seed,
        {"corpus": args.corpus},
    )
    print(json.dumps({"out": str(args.out), "eval_accuracy": model.eval_accuracy}))
    return 0


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    train_cfg = run_cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    corpus = load_corpus(args.data, load_ground_truth=False)
    model = train(train_cfg, run_cfg.denoiser, corpus.train_patches, out_dir=args.out,
                  progress=args.progress)
    write_provenance(
        args.out, "train",
        {"train": dataclasses.asdict(train_cfg),
         "denoiser": dataclasses.asdict(run_cfg.denoiser)},
        train_cfg.seed, {"data": args.data},
    )
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_sample(args) -> int:
    model = Denoiser.load(args.ckpt)
    import json as _json

    doc = _json.loads((Path(args.ckpt) / "config.json").read_text())
    schedule = cosine_schedule(int(doc.get("diffusion_steps", 64)))
    rng = substream(args.seed, "sample")
    images = generate(schedule, model, args.n, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(images.shape[0]):
        save_patch(out / f"{i:06d}.png", images[i])
    write_provenance(out, "sample", {"n": args.n, "T": schedule.T}, args.seed,
                     {"ckpt": args.ckpt})
    print(json.dumps({"out": str(out), "n": int(images.shape[0])}))
    return 0


def cmd_repaint(args) -> int:
    cfg = load_run_config(args.config).repaint
    jump = args.jump if args.jump is not None else cfg.jump
    seed = args.seed if args.seed is not None else cfg.seed
    model = Denoiser.load(args.ckpt)
    doc = json.loads((Path(args.ckpt) / "config.json").read_text())
    schedule = cosine_schedule(int(doc.get("diffusion_steps", 64)))
    image = load_patch(args.image)
    mask = Mask(load_mask(args.mask))
    rng = substream(seed, "repaint")
    out_img = repaint(schedule, model, image, mask, jump, rng)
    save_patch(args.out, out_img)
    sidecar = {
        "checkpoint_hash": _hash_path(args.ckpt),
        "mask_coverage": mask.coverage,
        "j": jump,
        "T": schedule.T,
        "seed": seed,
    }
    Path(str(args.out) + ".prov.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )
    print(json.dumps({"out": str(args.out), "coverage": mask.coverage}))
    return 0


def cmd_fcd(args) -> int:
    model = EmbeddingModel.load(args.ckpt)
    set_a = _load_image_dir(args.set_a)
    set_b = _load_image_dir(args.set_b)
    value = frechet_distance(embed_stats(model, set_a), embed_stats(model, set_b))
    print(json.dumps({
        "fcd": value,
        "n_a": int(set_a.shape[0]),
        "n_b": int(set_b.shape[0]),
        "dim": model.config.feature_dim,
    }))
    return 0


def cmd_fcd_battery(args) -> int:
    model = EmbeddingModel.load(args.ckpt)
    real = _load_image_dir(args.set)
    levels = tuple(float(v) for v in args.levels.split(",")) if args.levels \
        else DEFAULT_LEVELS[args.kind]
    spec = PerturbationSpec(kind=args.kind, levels=levels)
    aliens = _load_image_dir(args.mix_dir)[: real.shape[0]] if args.mix_dir else None
    curve = perturbation_battery(
        model, real, spec, substream(args.seed, "battery"), aliens=aliens
    )
    print(json.dumps({"kind": args.kind, "curve": curve}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config).evaluate
    n = args.n if args.n is not None else cfg.n
    jump = args.jump if args.jump is not None else cfg.jump
    seed = args.seed if args.seed is not None else cfg.seed
    model = Denoiser.load(args.ckpt)
    doc = json.loads((Path(args.ckpt) / "config.json").read_text())
    schedule = cosine_schedule(int(doc.get("diffusion_steps", 64)))
    embedder = EmbeddingModel.load(args.embedder)
    corpus = load_corpus(args.corpus, load_ground_truth=False)
    report = run_evaluation(
        schedule, model, embedder, corpus, n=n, j=jump, seed=seed,
        batch_size=cfg.batch,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_to_json(report))
    write_provenance(
        out.parent, "evaluate", {"n": n, "jump": jump}, seed,
        {"ckpt": args.ckpt, "embedder": args.embedder, "corpus": args.corpus},
    )
    print(json.dumps({"out": str(out),
                      "fcd_repaired_vs_intact": report["fcd_repaired_vs_intact"]}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="repaintlab",
        description="Diffusion-based inpainting of cytoarchitecture-like patches",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="worker/kernel thread cap (default: REPAINTLAB_THREADS or all cores)")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int, dest="per_class")
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train-embedder", help="train the texture classifier")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_train_embedder)

    s = sub.add_parser("train", help="train the diffusion denoiser")
    s.add_argument("--config", help="JSON train config (flat or sectioned)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--progress", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="unconditional generation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("repaint", help="inpaint the masked region of an image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True, help="8-bit PNG, 255 = known, 0 = hole")
    s.add_argument("--jump", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_repaint)

    s = sub.add_parser("fcd", help="Frechet latent distance between two image sets")
    s.add_argument("--ckpt", required=True, help="embedder checkpoint dir")
    s.add_argument("--set-a", required=True, dest="set_a")
    s.add_argument("--set-b", required=True, dest="set_b")
    s.set_defaults(fn=cmd_fcd)

    s = sub.add_parser("fcd-battery", help="perturbation battery FCD curve")
    s.add_argument("--ckpt", required=True, help="embedder checkpoint dir")
    s.add_argument("--set", required=True, help="directory of real PNGs")
    s.add_argument("--kind", required=True,
                   choices=("gaussian_noise", "gaussian_blur", "salt_pepper", "dataset_mix"))
    s.add_argument("--levels", help="comma-separated increasing levels, first 0")
    s.add_argument("--mix-dir", dest="mix_dir",
                   help="directory of out-of-domain PNGs for dataset_mix")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_fcd_battery)

    s = sub.add_parser("evaluate", help="repaint-quality evaluation run")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--embedder", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--jump", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads is not None:
        parallel.set_workers(args.threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "type": "config"}), file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
