"""Shared fixtures, including the trained acceptance pipeline.

The acceptance artifacts (corpus, embedder, trained denoiser) take on the
order of an hour to build on a small CPU. They are rebuilt from scratch by
default; set REPAINTLAB_TEST_CACHE=<dir> to reuse artifacts across pytest
invocations. The cache key includes a hash of the package sources, so any
code change invalidates it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import os
import pytest

import repaintlab
from repaintlab.denoiser import Denoiser, DenoiserConfig
from repaintlab.diffusion import NoiseSchedule, TrainConfig, cosine_schedule, train
from repaintlab.metrics import EmbeddingModel, train_embedder
from repaintlab.synthlab import Corpus, load_corpus, make_corpus, save_corpus

# the desk-scale acceptance pipeline: 64x64 corpus pinned by the acceptance
# criteria; the model is sized for CPU training within the runtime budget
CORPUS_SPEC = dict(K=8, n_per_class=500, size=64, seed=0)
EMBED_SEED = 1
MODEL_CFG = DenoiserConfig(
    input_size=64, base_channels=16, channel_mult=(1, 2, 2, 4),
    res_blocks_encoder=(1, 1, 1, 1), attention_resolutions=(8, 16),
    time_embed_dim=64,
)
TRAIN_CFG = TrainConfig(
    learning_rate=1e-4, batch_size=16, total_steps=8000, ema_decay=0.999,
    vlb_weight=0.001, seed=2, diffusion_steps=64, checkpoint_interval=2000,
)


@dataclass
class Pipeline:
    corpus: Corpus
    embedder: EmbeddingModel
    model: Denoiser
    schedule: NoiseSchedule
    ckpt_dir: Path
    metrics: list[dict]


def _source_key() -> str:
    pkg = Path(repaintlab.__file__).parent
    h = hashlib.sha256()
    for f in sorted(pkg.rglob("*.py")):
        h.update(f.read_bytes())
    h.update(repr((CORPUS_SPEC, MODEL_CFG, TRAIN_CFG, EMBED_SEED)).encode())
    return h.hexdigest()[:16]


def _build_pipeline(root: Path) -> Path:
    corpus = make_corpus(
        CORPUS_SPEC["K"], CORPUS_SPEC["n_per_class"], CORPUS_SPEC["size"],
        CORPUS_SPEC["seed"],
    )
    save_corpus(corpus, root / "corpus")
    embedder = train_embedder(corpus, seed=EMBED_SEED)
    embedder.save(root / "embedder")
    train(TRAIN_CFG, MODEL_CFG, corpus.train_patches, out_dir=root / "ckpt")
    (root / "DONE").write_text("ok")
    return root


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    cache_root = os.environ.get("REPAINTLAB_TEST_CACHE")
    if cache_root:
        root = Path(cache_root) / _source_key()
        root.mkdir(parents=True, exist_ok=True)
    else:
        root = tmp_path_factory.mktemp("pipeline")
    if not (root / "DONE").exists():
        _build_pipeline(root)
    corpus = load_corpus(root / "corpus", load_ground_truth=False)
    embedder = EmbeddingModel.load(root / "embedder")
    model = Denoiser.load(root / "ckpt")
    metrics = [json.loads(line)
               for line in (root / "ckpt" / "metrics.jsonl").read_text().splitlines()]
    return Pipeline(
        corpus=corpus,
        embedder=embedder,
        model=model,
        schedule=cosine_schedule(TRAIN_CFG.diffusion_steps),
        ckpt_dir=root / "ckpt",
        metrics=metrics,
    )


@pytest.fixture(scope="session")
def eval_report(pipeline, tmp_path_factory) -> dict:
    """The n=400, j=5 repaint evaluation shared by several criteria."""
    from repaintlab.evalharness import run_evaluation

    cache_root = os.environ.get("REPAINTLAB_TEST_CACHE")
    if cache_root:
        path = Path(cache_root) / _source_key() / "eval_report.json"
        if path.exists():
            return json.loads(path.read_text())
    report = run_evaluation(
        pipeline.schedule, pipeline.model, pipeline.embedder, pipeline.corpus,
        n=400, j=5, seed=3, batch_size=50,
    )
    if cache_root:
        path.write_text(json.dumps(report))
    return report
