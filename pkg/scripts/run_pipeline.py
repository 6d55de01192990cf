#!/usr/bin/env python3
"""End-to-end experiment driver: synth -> train-embedder -> train -> evaluate.

Runs the CLI subcommands in sequence into one output directory, so the whole
desk-scale experiment is reproducible from a single seed:

    python scripts/run_pipeline.py --out runs/desk --seed 0

The default configuration matches the acceptance pipeline (8x500 corpus,
8000 training steps); --tiny switches to a minutes-scale smoke configuration
(whose embedder accuracy floor and repaint quality are NOT expected to meet
the acceptance thresholds).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from repaintlab.cli import main as cli


def run(args: list[str]) -> None:
    print(f"$ repaintlab {' '.join(args)}", flush=True)
    code = cli(args)
    if code != 0:
        sys.exit(code)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tiny", action="store_true",
                    help="smoke-scale run (no quality guarantees)")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thread_args = ["--threads", str(args.threads)] if args.threads else []

    if args.tiny:
        per_class, steps, n_eval = 40, 300, 16
        model_cfg = {"input_size": 64, "base_channels": 8,
                     "channel_mult": [1, 2], "res_blocks_encoder": [1, 1],
                     "attention_resolutions": [16], "time_embed_dim": 16}
        embed = {"embed_steps": 600}
    else:
        per_class, steps, n_eval = 500, 8000, 400
        model_cfg = {"input_size": 64, "base_channels": 16,
                     "channel_mult": [1, 2, 2, 4],
                     "res_blocks_encoder": [1, 1, 1, 1],
                     "attention_resolutions": [8, 16], "time_embed_dim": 64}
        embed = {}

    config = {
        "denoiser": model_cfg,
        "train": {"learning_rate": 1e-4, "batch_size": 16, "total_steps": steps,
                  "seed": args.seed + 2, "diffusion_steps": 64,
                  "checkpoint_interval": 2000},
        "metrics": embed,
        "evaluate": {"n": n_eval, "jump": 5},
    }
    config_path = out / "run_config.json"
    config_path.write_text(json.dumps(config, indent=2))

    t0 = time.time()
    run(thread_args + ["synth", "--classes", "8", "--per-class", str(per_class),
                       "--size", "64", "--seed", str(args.seed),
                       "--out", str(out / "corpus")])
    run(thread_args + ["train-embedder", "--corpus", str(out / "corpus"),
                       "--seed", str(args.seed + 1), "--config", str(config_path),
                       "--out", str(out / "embedder")])
    run(thread_args + ["train", "--config", str(config_path),
                       "--data", str(out / "corpus"), "--out", str(out / "ckpt"),
                       "--progress"])
    run(thread_args + ["evaluate", "--ckpt", str(out / "ckpt"),
                       "--embedder", str(out / "embedder"),
                       "--corpus", str(out / "corpus"),
                       "--seed", str(args.seed + 3), "--config", str(config_path),
                       "--out", str(out / "report.json")])
    print(f"pipeline finished in {(time.time() - t0) / 60:.1f} min; "
          f"report at {out / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
