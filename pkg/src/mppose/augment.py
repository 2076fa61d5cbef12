"""Domain-randomization input corruption for encoder training.

Applied to the encoder input only; reconstruction targets stay pristine.
Stage order is background substitution, geometric jitter of the object layer
over the background, per-channel color corruption, then Gaussian blur. All
randomness flows through one numpy Generator so a seeded epoch reproduces
bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .imgio import load_image
from .render import resample_square

BackgroundSource = str  # "none" | "procedural" | "image_dir"


@dataclass(frozen=True)
class AugmentConfig:
    add_range: tuple[float, float] = (-0.1, 0.1)
    contrast_range: tuple[float, float] = (0.4, 2.3)
    multiply_range: tuple[float, float] = (0.6, 1.4)
    blur_sigma_range: tuple[float, float] = (0.0, 1.2)
    scale_range: tuple[float, float] = (0.8, 1.2)
    translation_range: tuple[float, float] = (-0.15, 0.15)
    color_prob: float = 0.5
    per_channel_prob: float = 0.3
    invert_enabled: bool = True
    background_source: BackgroundSource = "procedural"
    background_dir: str | None = None

    def __post_init__(self):
        for p in (self.color_prob, self.per_channel_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.background_source not in ("none", "procedural", "image_dir"):
            raise ValueError(f"unknown background source '{self.background_source}'")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """No-op configuration; augment() returns its input unchanged."""
        return cls(
            add_range=(0.0, 0.0),
            contrast_range=(1.0, 1.0),
            multiply_range=(1.0, 1.0),
            blur_sigma_range=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            translation_range=(0.0, 0.0),
            color_prob=0.0,
            invert_enabled=False,
            background_source="none",
        )


def _list_background_files(directory: str) -> list[str]:
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    files = sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if f.lower().endswith(exts)
    )
    if not files:
        raise ValueError(f"background directory '{directory}' has no images")
    return files


def random_background(
    shape: tuple[int, int],
    source: BackgroundSource,
    rng: np.random.Generator,
    image_dir: str | None = None,
) -> np.ndarray:
    """HxWx3 background image in [0,1] for the requested source."""
    h, w = shape
    if source == "none":
        return np.zeros((h, w, 3), dtype=np.float32)
    if source == "procedural":
        kind = rng.integers(4)
        if kind == 0:  # solid color
            return np.broadcast_to(rng.uniform(0, 1, 3), (h, w, 3)).astype(np.float32).copy()
        if kind == 1:  # two-tone gradient
            c0, c1 = rng.uniform(0, 1, (2, 3))
            axis = rng.integers(3)
            uu, vv = np.meshgrid(np.linspace(0, 1, w), np.linspace(0, 1, h))
            ramp = (uu, vv, (uu + vv) / 2)[axis]
            return (c0 + (c1 - c0) * ramp[..., None]).astype(np.float32)
        if kind == 2:  # checkerboard
            c0, c1 = rng.uniform(0, 1, (2, 3))
            cell = int(rng.integers(4, 17))
            ry = (np.arange(h) // cell) % 2
            cx = (np.arange(w) // cell) % 2
            board = (ry[:, None] ^ cx[None, :]).astype(np.float64)
            return (c0 + (c1 - c0) * board[..., None]).astype(np.float32)
        # bilinear value noise between two random colors
        c0, c1 = rng.uniform(0, 1, (2, 3))
        cells = int(rng.integers(3, 9))
        grid = rng.uniform(0, 1, (cells, cells))
        gy = np.linspace(0, cells - 1, h)
        gx = np.linspace(0, cells - 1, w)
        y0 = np.clip(gy.astype(int), 0, cells - 2)
        x0 = np.clip(gx.astype(int), 0, cells - 2)
        fy = (gy - y0)[:, None]
        fx = (gx - x0)[None, :]
        v = (
            grid[y0][:, x0] * (1 - fy) * (1 - fx)
            + grid[y0][:, x0 + 1] * (1 - fy) * fx
            + grid[y0 + 1][:, x0] * fy * (1 - fx)
            + grid[y0 + 1][:, x0 + 1] * fy * fx
        )
        return (c0 + (c1 - c0) * v[..., None]).astype(np.float32)
    if source == "image_dir":
        if image_dir is None:
            raise ValueError("image_dir source needs a directory")
        files = _list_background_files(image_dir)
        img = load_image(files[int(rng.integers(len(files)))])
        ih, iw = img.shape[:2]
        side = min(ih, iw)
        top = int(rng.integers(0, ih - side + 1))
        left = int(rng.integers(0, iw - side + 1))
        patch = img[top: top + side, left: left + side]
        center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
        out = resample_square(patch, center, float(side), max(h, w))
        return np.clip(out[:h, :w], 0, 1).astype(np.float32)
    raise ValueError(f"unknown background source '{source}'")


def _geometric_params(cfg: AugmentConfig, rng: np.random.Generator):
    s = float(rng.uniform(*cfg.scale_range))
    tx = float(rng.uniform(*cfg.translation_range))
    ty = float(rng.uniform(*cfg.translation_range))
    return s, tx, ty


def augment(
    x: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Randomized corruption of one [0,1] HxWx3 image.

    `mask` marks the object pixels of x; it is required whenever a background
    is composited (the jittered object layer is pasted over it).
    """
    x = np.asarray(x, dtype=np.float32)
    h, w = x.shape[:2]

    substitute = cfg.background_source != "none"
    if substitute and mask is None:
        raise ValueError("background substitution requires the object mask")
    bg = random_background((h, w), cfg.background_source, rng, cfg.background_dir)

    # geometric jitter: scale about the image center, then shift; the object
    # layer moves while the background stays put
    s, tx, ty = _geometric_params(cfg, rng)
    if (s, tx, ty) != (1.0, 0.0, 0.0):
        center = np.array(
            [(w - 1) / 2.0 - tx * w / s, (h - 1) / 2.0 - ty * h / s]
        )
        warped = resample_square(x, center, w / s, w).astype(np.float32)
        wmask = (
            resample_square(mask.astype(np.float64), center, w / s, w) > 0.5
            if mask is not None
            else None
        )
    else:
        warped = x.copy()
        wmask = None if mask is None else mask.astype(bool)

    if substitute:
        out = np.where(wmask[..., None], warped, bg)
    else:
        out = warped

    # color block: each sub-op gates independently per channel
    if rng.uniform() < cfg.color_prob:
        gate = rng.uniform(size=3) < cfg.per_channel_prob
        add = rng.uniform(*cfg.add_range, size=3)
        out = np.where(gate, out + add, out)
        gate = rng.uniform(size=3) < cfg.per_channel_prob
        contrast = rng.uniform(*cfg.contrast_range, size=3)
        out = np.where(gate, (out - 0.5) * contrast + 0.5, out)
        gate = rng.uniform(size=3) < cfg.per_channel_prob
        mult = rng.uniform(*cfg.multiply_range, size=3)
        out = np.where(gate, out * mult, out)
        if cfg.invert_enabled:
            gate = rng.uniform(size=3) < cfg.per_channel_prob
            out = np.where(gate, 1.0 - out, out)

    sigma = float(rng.uniform(*cfg.blur_sigma_range))
    if sigma > 1e-6:
        out = np.clip(out, 0.0, 1.0)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")

    return np.clip(out, 0.0, 1.0).astype(np.float32)
