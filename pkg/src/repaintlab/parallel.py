"""Worker-thread configuration.

Heavy kernels parallelize internally (torch/BLAS); this module pins their
thread counts from one knob so runs are reproducible for a fixed setting.
Resolution order: set_workers() (the CLI --threads flag), then the
REPAINTLAB_THREADS environment variable, then cpu_count.
"""

from __future__ import annotations

import os

import threadpoolctl
import torch

_workers: int | None = None
_limits = None


def max_workers() -> int:
    if _workers is None:
        env = os.environ.get("REPAINTLAB_THREADS")
        configure(int(env) if env and env.strip() else (os.cpu_count() or 1))
    return _workers


def configure(n: int) -> None:
    global _workers, _limits
    _workers = max(1, int(n))
    torch.set_num_threads(_workers)
    _limits = threadpoolctl.threadpool_limits(_workers)


set_workers = configure
