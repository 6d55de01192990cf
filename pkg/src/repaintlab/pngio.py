"""8-bit grayscale PNG interchange for [-1, 1] rasters and binary masks."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_patch(path, pixels: np.ndarray) -> None:
    """pixels: [1,H,W] or [H,W] in [-1,1]; stored as round((v+1)*127.5)."""
    img = np.asarray(pixels)
    if img.ndim == 3:
        img = img[0]
    data = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_patch(path) -> np.ndarray:
    """Returns [1,H,W] float32 in [-1,1]."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float32)
    return (data / 127.5 - 1.0)[None]


def save_mask(path, known: np.ndarray) -> None:
    """known: [H,W] binary; stored as 255 = known, 0 = hole."""
    data = (np.asarray(known) > 0).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Returns [H,W] float32 in {0,1}; any nonzero source byte counts as known."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return (data > 127).astype(np.float32)
