"""Raster and field types, Catmull-Rom interpolation, strain and MAE.

All types hold read-only float64 arrays of shape ``(height, width)``.
Pixel ``(row, col)`` sits at coordinate ``x = col, y = row``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

MULTIPLE = 32


def _frozen(a, name):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image with intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data, "data")
        if arr.size == 0:
            raise ValueError("image is empty")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must be finite and lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


class _Field:
    channel_names: ClassVar[tuple[str, ...]] = ()
    semantics: ClassVar[str] = ""
    units: ClassVar[str] = ""

    def __post_init__(self):
        shape = None
        for name in self.channel_names:
            arr = _frozen(getattr(self, name), name)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"channel {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"channel {name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def height(self) -> int:
        return getattr(self, self.channel_names[0]).shape[0]

    @property
    def width(self) -> int:
        return getattr(self, self.channel_names[0]).shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def as_array(self) -> np.ndarray:
        """Channel-major ``(C, H, W)`` copy."""
        return np.stack([getattr(self, n) for n in self.channel_names])

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != len(cls.channel_names):
            raise ValueError(
                f"{cls.__name__} needs shape ({len(cls.channel_names)}, H, W), got {arr.shape}")
        return cls(*arr)

    @classmethod
    def zeros(cls, height, width):
        return cls(*np.zeros((len(cls.channel_names), height, width)))

    def __add__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return type(self).from_array(self.as_array() + other.as_array())

    def __eq__(self, other):
        return type(other) is type(self) and np.array_equal(self.as_array(), other.as_array())


@dataclass(frozen=True, eq=False)
class DisplacementField(_Field):
    """Per-pixel horizontal (u) and vertical (v) displacement in pixels."""

    u: np.ndarray
    v: np.ndarray

    channel_names: ClassVar[tuple[str, ...]] = ("u", "v")
    semantics: ClassVar[str] = "displacement"
    units: ClassVar[str] = "pixel"


@dataclass(frozen=True, eq=False)
class StrainField(_Field):
    """Small-strain components; ``exy`` is the tensor (not engineering) shear."""

    exx: np.ndarray
    eyy: np.ndarray
    exy: np.ndarray

    channel_names: ClassVar[tuple[str, ...]] = ("exx", "eyy", "exy")
    semantics: ClassVar[str] = "strain"
    units: ClassVar[str] = "1"


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return (orient(p1, p2, q1) * orient(p1, p2, q2) < 0
            and orient(q1, q2, p1) * orient(q1, q2, p2) < 0)


@dataclass(frozen=True, eq=False)
class Roi:
    """Quadrilateral region of interest.

    ``corners`` is a (4, 2) array of ``(x, y)`` points ordered clockwise on
    screen (y pointing down), starting at the top-left corner.
    """

    corners: np.ndarray

    def __post_init__(self):
        c = np.array(self.corners, dtype=np.float64, copy=True)
        if c.shape != (4, 2) or not np.all(np.isfinite(c)):
            raise ValueError("ROI needs four finite (x, y) corners")
        if self.signed_area(c) <= 0:
            raise ValueError("ROI corners must be clockwise with positive area")
        if _segments_cross(c[0], c[1], c[2], c[3]) or _segments_cross(c[1], c[2], c[3], c[0]):
            raise ValueError("ROI is self-intersecting")
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)

    @staticmethod
    def signed_area(c) -> float:
        x, y = c[:, 0], c[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def area(self) -> float:
        return self.signed_area(self.corners)

    @classmethod
    def from_box(cls, x0, y0, width, height):
        return cls([[x0, y0], [x0 + width, y0], [x0 + width, y0 + height], [x0, y0 + height]])

    def bounding_box(self) -> tuple[int, int, int, int]:
        """Integer ``(x0, y0, width, height)`` enclosing the corners."""
        x0 = int(np.floor(self.corners[:, 0].min() + 1e-9))
        y0 = int(np.floor(self.corners[:, 1].min() + 1e-9))
        x1 = int(np.ceil(self.corners[:, 0].max() - 1e-9))
        y1 = int(np.ceil(self.corners[:, 1].max() - 1e-9))
        return x0, y0, x1 - x0, y1 - y0


# ---------------------------------------------------------------------------
# Catmull-Rom interpolation

def catmull_rom_weights(t):
    """Kernel weights (a = -0.5) for taps at offsets -1, 0, +1, +2."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    return (
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    )


def _interp1(v0, v1, v2, v3, w0, w2, w3):
    # Weights sum to one, so expanding around the centre tap keeps constants
    # and nodes exact in floating point.
    return v1 + w0 * (v0 - v1) + w2 * (v2 - v1) + w3 * (v3 - v1)


def sample_bicubic(data, x, y, clip=None):
    """Vectorised Catmull-Rom sampling of a 2-D array at points ``(x, y)``.

    Taps falling outside the array reuse the nearest edge pixel.  ``clip``
    is an optional ``(lo, hi)`` range applied to the result.
    """
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = catmull_rom_weights(x - x0)
    wy = catmull_rom_weights(y - y0)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cols = [np.clip(x0 + k, 0, w - 1) for k in (-1, 0, 1, 2)]
    rows = [np.clip(y0 + k, 0, h - 1) for k in (-1, 0, 1, 2)]
    lines = [_interp1(*(data[r, c] for c in cols), wx[0], wx[2], wx[3]) for r in rows]
    out = _interp1(*lines, wy[0], wy[2], wy[3])
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def bicubic_sample(img: GrayImage, x: float, y: float) -> float:
    """Intensity of ``img`` at a real-valued position, clamped to [0, 1]."""
    return float(sample_bicubic(img.data, x, y, clip=(0.0, 1.0)))


def resize_array(data, new_h, new_w, clip=None):
    """Catmull-Rom resample with pixel-centre alignment."""
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape
    if (h, w) == (new_h, new_w):
        return data.copy()
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sample_bicubic(data, xx, yy, clip=clip)


def nearest_multiple(n: int, multiple: int = MULTIPLE) -> int:
    """Nearest multiple of ``multiple``; ties round up."""
    return multiple * int(np.floor(n / multiple + 0.5))


def resize_to_multiple_of_32(img: GrayImage) -> tuple[GrayImage, float, float]:
    """Resample to the nearest multiple of 32 per axis.

    Returns the resized image and the per-axis scales ``new / old``.
    """
    h, w = img.shape
    if h < MULTIPLE or w < MULTIPLE:
        raise ValueError(f"image {h}x{w} is smaller than {MULTIPLE} px in some dimension")
    nh, nw = nearest_multiple(h), nearest_multiple(w)
    out = GrayImage(resize_array(img.data, nh, nw, clip=(0.0, 1.0)))
    return out, nw / w, nh / h


def resize_image(img: GrayImage, height: int, width: int) -> GrayImage:
    return GrayImage(resize_array(img.data, height, width, clip=(0.0, 1.0)))


def strain_from_displacement(f: DisplacementField) -> StrainField:
    """Small-strain tensor components from a displacement field.

    Central differences inside, second-order one-sided differences on the
    border rows and columns.
    """
    if f.height < 3 or f.width < 3:
        raise ValueError(f"field {f.height}x{f.width} is smaller than 3x3")
    # removing one sample first makes rigid offsets vanish exactly in the border stencils
    du_dy, du_dx = np.gradient(f.u - f.u[0, 0], edge_order=2)
    dv_dy, dv_dx = np.gradient(f.v - f.v[0, 0], edge_order=2)
    return StrainField(du_dx, dv_dy, 0.5 * (du_dy + dv_dx))


def _values(a):
    return a.as_array() if isinstance(a, _Field) else np.asarray(a, dtype=np.float64)


def field_mae(pred, truth) -> float:
    """Mean absolute error over every channel and pixel."""
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("cannot take the MAE of empty fields")
    return float(np.abs(p - t).sum() / p.size)
