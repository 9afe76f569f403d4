"""Colour contour images of field channels, written as binary PPM."""
from __future__ import annotations

import numpy as np

from .formats import write_ppm

LEGEND_WIDTH = 16


def _jet(t):
    return np.stack([np.clip(1.5 - np.abs(4 * t - 3), 0, 1),
                     np.clip(1.5 - np.abs(4 * t - 2), 0, 1),
                     np.clip(1.5 - np.abs(4 * t - 1), 0, 1)], axis=1)


def _gray(t):
    return np.repeat(t[:, None], 3, axis=1)


COLORMAPS = {
    name: np.rint(255 * fn(np.linspace(0.0, 1.0, 256))).astype(np.uint8)
    for name, fn in (("jet", _jet), ("gray", _gray))
}


def contour_image(channel, colormap="jet", legend_width=LEGEND_WIDTH):
    """RGB image of a min-max normalised channel plus a legend strip.

    The strip on the right runs from the maximum (top) to the minimum
    (bottom).  Returns ``(rgb, (lo, hi))``.
    """
    a = np.asarray(channel, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("contour rendering needs a non-empty 2-D channel")
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot render a channel with non-finite values")
    if colormap not in COLORMAPS:
        raise ValueError(f"unknown colormap {colormap!r}; choose from {sorted(COLORMAPS)}")
    table = COLORMAPS[colormap]
    lo, hi = float(a.min()), float(a.max())
    h = a.shape[0]
    if hi > lo:
        idx = np.rint((a - lo) / (hi - lo) * 255).astype(np.int64)
        legend = np.rint(np.linspace(255, 0, h)).astype(np.int64) if h > 1 else np.array([255])
    else:
        idx = np.full(a.shape, 128, dtype=np.int64)
        legend = np.full(h, 128, dtype=np.int64)
    strip = np.repeat(legend[:, None], legend_width, axis=1)
    return table[np.concatenate([idx, strip], axis=1)], (lo, hi)


def render_contour(channel, colormap="jet", out=None, legend_width=LEGEND_WIDTH):
    """Render ``channel``; the value range is recorded as a PPM header comment."""
    rgb, (lo, hi) = contour_image(channel, colormap, legend_width)
    if out is not None:
        note = (f"range {lo!r} {hi!r}" if hi > lo else f"zero range, value {lo!r}")
        write_ppm(out, rgb, comment=f"{note}\ncolormap {colormap}, legend top=max bottom=min")
    return rgb
