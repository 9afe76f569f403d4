"""Boolean-model speckle rendering.

Disks with a Poisson-distributed count, uniform centres and uniform radii
are painted dark on a bright canvas at ``supersample`` times the target
resolution, box-filtered down, then blurred to mimic optical defocus.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import GrayImage

MIN_SIZE = 32


@dataclass(frozen=True)
class SpeckleParams:
    disk_density: float = 0.008
    radius_min: float = 2.0
    radius_max: float = 5.0
    background_level: float = 0.9
    disk_level: float = 0.1
    blur_sigma: float = 0.8
    supersample: int = 4
    seed: int = 7

    def __post_init__(self):
        if not self.disk_density >= 0:
            raise ValueError("disk_density must be non-negative")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("need 0 < radius_min <= radius_max")
        for name in ("background_level", "disk_level"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.background_level > self.disk_level:
            raise ValueError("background_level must exceed disk_level (dark disks on a light surface)")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        if self.supersample not in (1, 2, 4):
            raise ValueError("supersample must be 1, 2 or 4")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpeckleParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown speckle parameter(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        if "supersample" in kw:
            kw["supersample"] = int(kw["supersample"])
        if "seed" in kw:
            kw["seed"] = int(kw["seed"])
        return cls(**kw)

    def replace(self, **changes) -> "SpeckleParams":
        return dataclasses.replace(self, **changes)

    def expected_coverage(self) -> float:
        """Dark-area fraction of the Boolean model, ``1 - exp(-density * E[pi r^2])``."""
        a, b = self.radius_min, self.radius_max
        mean_r2 = (a * a + a * b + b * b) / 3.0
        return 1.0 - math.exp(-self.disk_density * math.pi * mean_r2)


def draw_disks(p: SpeckleParams, h: int, w: int):
    """Random disk centres ``(x, y)`` and radii in pixel coordinates."""
    rng = np.random.default_rng(int(p.seed))
    pad = p.radius_max
    area = (h + 2 * pad) * (w + 2 * pad)
    n = rng.poisson(p.disk_density * area)
    xs = rng.uniform(-0.5 - pad, w - 0.5 + pad, n)
    ys = rng.uniform(-0.5 - pad, h - 0.5 + pad, n)
    rs = rng.uniform(p.radius_min, p.radius_max, n)
    return xs, ys, rs


def coverage_mask(p: SpeckleParams, h: int, w: int) -> np.ndarray:
    """Fraction of each pixel covered by disks (supersampled)."""
    s = p.supersample
    canvas = np.zeros((h * s, w * s), dtype=bool)
    # subpixel centre k sits at pixel coordinate (k + 0.5) / s - 0.5
    for x, y, r in zip(*draw_disks(p, h, w)):
        c0 = max(int(math.floor((x - r + 0.5) * s - 0.5)), 0)
        c1 = min(int(math.ceil((x + r + 0.5) * s - 0.5)), w * s - 1)
        r0 = max(int(math.floor((y - r + 0.5) * s - 0.5)), 0)
        r1 = min(int(math.ceil((y + r + 0.5) * s - 0.5)), h * s - 1)
        if c0 > c1 or r0 > r1:
            continue
        cx = (np.arange(c0, c1 + 1) + 0.5) / s - 0.5 - x
        cy = (np.arange(r0, r1 + 1) + 0.5) / s - 0.5 - y
        canvas[r0:r1 + 1, c0:c1 + 1] |= (cy[:, None] ** 2 + cx[None, :] ** 2) <= r * r
    return canvas.reshape(h, s, w, s).mean(axis=(1, 3))


def render_reference(p: SpeckleParams, h: int, w: int) -> GrayImage:
    """Render one speckle image; a pure function of ``(p, h, w)``."""
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"speckle images must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    cov = coverage_mask(p, h, w)
    img = p.background_level + (p.disk_level - p.background_level) * cov
    if p.blur_sigma > 0:
        img = gaussian_filter(img, p.blur_sigma, mode="nearest")
    lo, hi = p.disk_level, p.background_level
    return GrayImage(np.clip(img, lo, hi))


def render_batch(p_list, h: int, w: int) -> list[GrayImage]:
    if not p_list:
        raise ValueError("parameter list is empty")
    return [render_reference(p, h, w) for p in p_list]


def dark_fraction(img: GrayImage, p: SpeckleParams) -> float:
    """Fraction of pixels darker than the midpoint of the two levels."""
    mid = 0.5 * (p.disk_level + p.background_level)
    return float(np.mean(img.data < mid))
