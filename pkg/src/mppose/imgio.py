"""8-bit PNG input/output for debug images and background directories."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path: str, image: np.ndarray) -> None:
    """Write a [0,1] float or uint8 array (HxW or HxWx3) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    """Read any PIL-supported image as HxWx3 float in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
