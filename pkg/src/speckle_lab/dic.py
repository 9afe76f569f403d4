"""Subset-based digital image correlation.

Integer search maximises ZNCC over a square window, the peak is refined by
a least-squares quadratic surface over its 3x3 neighbourhood, and strains
come from plane fits of the grid displacements.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import DisplacementField, GrayImage, StrainField


EXACT_MATCH = 1.0 - 1e-12


class EmptyResultError(ValueError):
    """Raised when no grid point survives correlation."""


@dataclass(frozen=True)
class DicConfig:
    subset_size: int = 35
    step: int = 7
    search_radius: int = 4
    strain_window: int = 5
    zncc_threshold: float = 0.8

    def __post_init__(self):
        if self.subset_size % 2 == 0 or self.subset_size < 11:
            raise ValueError("subset_size must be odd and at least 11")
        if self.step < 1:
            raise ValueError("step must be at least 1")
        if self.search_radius < 1:
            raise ValueError("search_radius must be at least 1")
        if self.strain_window % 2 == 0 or self.strain_window < 3:
            raise ValueError("strain_window must be odd and at least 3")
        if not 0 < self.zncc_threshold <= 1:
            raise ValueError("zncc_threshold must lie in (0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DIC parameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass(eq=False)
class DicResult:
    """Grid measurements; arrays are indexed ``[row, col]`` over ``ys x xs``."""

    xs: np.ndarray
    ys: np.ndarray
    u: np.ndarray
    v: np.ndarray
    zncc: np.ndarray
    valid: np.ndarray
    exx: np.ndarray
    eyy: np.ndarray
    exy: np.ndarray
    strain_valid: np.ndarray
    displacement: DisplacementField | None = None
    strain: StrainField | None = None

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in a]
        return {
            "grid": {"xs": self.xs.tolist(), "ys": self.ys.tolist()},
            "u": clean(self.u), "v": clean(self.v), "zncc": clean(self.zncc),
            "valid": self.valid.astype(int).tolist(),
            "exx": clean(self.exx), "eyy": clean(self.eyy), "exy": clean(self.exy),
            "strain_valid": self.strain_valid.astype(int).tolist(),
        }


def zncc(a, b) -> float:
    """Zero-normalised cross-correlation of two equally sized subsets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"subset shapes differ: {a.shape} vs {b.shape}")
    a0 = a - a.mean()
    b0 = b - b.mean()
    na = np.sum(a0 * a0)
    nb = np.sum(b0 * b0)
    if na == 0 or nb == 0:
        raise ValueError("zero-variance subset")
    return float(np.clip(np.sum(a0 * b0) / np.sqrt(na * nb), -1.0, 1.0))


def grid_coordinates(h, w, cfg: DicConfig):
    half = cfg.subset_size // 2
    return np.arange(half, w - half, cfg.step), np.arange(half, h - half, cfg.step)


# quadratic surface z = c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2 on the 3x3 stencil
_QY, _QX = np.mgrid[-1:2, -1:2]
_QDESIGN = np.stack([np.ones(9), _QX.ravel(), _QY.ravel(), _QX.ravel() ** 2,
                     (_QX * _QY).ravel(), _QY.ravel() ** 2], axis=1)
_QPINV = np.linalg.pinv(_QDESIGN)


def quadratic_peak(c3x3):
    """Sub-pixel peak offset ``(dx, dy)`` of a 3x3 correlation patch.

    Returns ``None`` when the fitted surface has no maximum within one pixel.
    """
    c = _QPINV @ np.asarray(c3x3, dtype=np.float64).ravel()
    hxx, hxy, hyy = 2 * c[3], c[4], 2 * c[5]
    det = hxx * hyy - hxy * hxy
    if not (hxx < 0 and det > 0):
        return None
    dx = (-c[1] * hyy + c[2] * hxy) / det
    dy = (-c[2] * hxx + c[1] * hxy) / det
    if abs(dx) > 1 or abs(dy) > 1:
        return None
    return dx, dy


def _zncc_map(f0, fnorm, windows):
    g0 = windows - windows.mean(axis=(2, 3), keepdims=True)
    num = np.einsum("ij,abij->ab", f0, g0)
    den = fnorm * np.sqrt(np.einsum("abij,abij->ab", g0, g0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, np.nan)
    return np.clip(out, -1.0, 1.0)


def correlate_grid(ref: GrayImage, deformed: GrayImage, cfg: DicConfig):
    """Per-grid-point displacement, peak ZNCC and validity (no strain)."""
    if ref.shape != deformed.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {deformed.shape}")
    h, w = ref.shape
    xs, ys = grid_coordinates(h, w, cfg)
    if len(xs) == 0 or len(ys) == 0:
        raise ValueError(f"image {h}x{w} cannot hold a {cfg.subset_size}px subset")
    half, r, s = cfg.subset_size // 2, cfg.search_radius, cfg.subset_size
    f_img = ref.data
    g_pad = np.pad(deformed.data, r, mode="edge")
    shape = (len(ys), len(xs))
    u = np.full(shape, np.nan)
    v = np.full(shape, np.nan)
    score = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            f = f_img[y - half:y + half + 1, x - half:x + half + 1]
            f0 = f - f.mean()
            fnorm = np.sqrt(np.sum(f0 * f0))
            if fnorm == 0:
                continue
            # padded row y - half + k holds original row y - half - r + k
            region = g_pad[y - half:y + half + 2 * r + 1, x - half:x + half + 2 * r + 1]
            cmap = _zncc_map(f0, fnorm, sliding_window_view(region, (s, s)))
            if np.all(np.isnan(cmap)):
                continue
            a, b = np.unravel_index(np.nanargmax(cmap), cmap.shape)
            peak = cmap[a, b]
            score[i, j] = peak
            if peak < cfg.zncc_threshold or a in (0, 2 * r) or b in (0, 2 * r):
                continue
            patch = cmap[a - 1:a + 2, b - 1:b + 2]
            if np.any(np.isnan(patch)):
                continue
            # a perfect match is an exact integer displacement; fitting would only add bias
            sub = (0.0, 0.0) if peak >= EXACT_MATCH else quadratic_peak(patch)
            if sub is None:
                continue
            u[i, j] = b - r + sub[0]
            v[i, j] = a - r + sub[1]
            valid[i, j] = True
    return xs, ys, u, v, score, valid


def grid_strain(xs, ys, u, v, valid, window: int):
    """Least-squares plane fit of u and v over a ``window x window`` grid patch."""
    ny, nx = valid.shape
    k = window // 2
    gy, gx = np.meshgrid(ys.astype(np.float64), xs.astype(np.float64), indexing="ij")
    exx = np.full(valid.shape, np.nan)
    eyy = np.full(valid.shape, np.nan)
    exy = np.full(valid.shape, np.nan)
    ok = np.zeros(valid.shape, dtype=bool)
    for i in range(ny):
        for j in range(nx):
            if not valid[i, j]:
                continue
            sl = (slice(max(i - k, 0), i + k + 1), slice(max(j - k, 0), j + k + 1))
            m = valid[sl]
            px = gx[sl][m] - gx[i, j]
            py = gy[sl][m] - gy[i, j]
            a = np.stack([np.ones_like(px), px, py], axis=1)
            if len(px) < 3 or np.linalg.matrix_rank(a) < 3:
                continue
            cu = np.linalg.lstsq(a, u[sl][m], rcond=None)[0]
            cv = np.linalg.lstsq(a, v[sl][m], rcond=None)[0]
            exx[i, j] = cu[1]
            eyy[i, j] = cv[2]
            exy[i, j] = 0.5 * (cu[2] + cv[1])
            ok[i, j] = True
    return exx, eyy, exy, ok


def _check_hull(xs, ys, mask):
    if mask.sum() < 4:
        raise ValueError(f"need at least 4 valid grid points, found {int(mask.sum())}")
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gx[mask], gy[mask]], axis=1).astype(np.float64)
    if np.linalg.matrix_rank(pts - pts.mean(axis=0)) < 2:
        raise ValueError("valid grid points are collinear")


def interpolate_grid(xs, ys, values, mask, h, w):
    """Bilinear interpolation of grid values onto every pixel.

    Corner weights of invalid nodes are dropped and the rest renormalised;
    pixels whose cell has no valid corner take the nearest valid node.
    Coordinates outside the grid are clamped to its edge.
    """
    _check_hull(xs, ys, mask)
    vals = np.where(mask, values, 0.0)

    def axis(coords, n):
        p = np.clip(np.arange(n, dtype=np.float64), coords[0], coords[-1])
        i = np.clip(np.searchsorted(coords, p, side="right") - 1, 0, len(coords) - 2)
        t = (p - coords[i]) / (coords[i + 1] - coords[i])
        return i, t

    iy, ty = axis(ys.astype(np.float64), h)
    ix, tx = axis(xs.astype(np.float64), w)
    iy, ty = iy[:, None], ty[:, None]
    ix, tx = ix[None, :], tx[None, :]
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy, wy in ((0, 1 - ty), (1, ty)):
        for dx, wx in ((0, 1 - tx), (1, tx)):
            wt = wy * wx * mask[iy + dy, ix + dx]
            num += wt * vals[iy + dy, ix + dx]
            den += wt
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    holes = den <= 0
    if np.any(holes):
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        vx, vy, vv = gx[mask], gy[mask], values[mask]
        hy, hx = np.nonzero(holes)
        d2 = (hx[:, None] - vx[None, :]) ** 2 + (hy[:, None] - vy[None, :]) ** 2
        out[hy, hx] = vv[np.argmin(d2, axis=1)]
    return out


def interpolate_dense(result: DicResult, h: int, w: int) -> tuple[DisplacementField, StrainField]:
    """Dense displacement and strain fields from the grid measurements."""
    u = interpolate_grid(result.xs, result.ys, result.u, result.valid, h, w)
    v = interpolate_grid(result.xs, result.ys, result.v, result.valid, h, w)
    sm = result.strain_valid
    strain = [interpolate_grid(result.xs, result.ys, c, sm, h, w)
              for c in (result.exx, result.eyy, result.exy)]
    return DisplacementField(u, v), StrainField(*strain)


def run_dic(ref: GrayImage, deformed: GrayImage, cfg: DicConfig = DicConfig()) -> DicResult:
    """Correlate ``deformed`` against ``ref`` on the subset grid."""
    xs, ys, u, v, score, valid = correlate_grid(ref, deformed, cfg)
    if not valid.any():
        raise EmptyResultError("no grid point passed the correlation checks")
    exx, eyy, exy, sok = grid_strain(xs, ys, u, v, valid, cfg.strain_window)
    res = DicResult(xs, ys, u, v, score, valid, exx, eyy, exy, sok)
    try:
        res.displacement, res.strain = interpolate_dense(res, *ref.shape)
    except ValueError:
        # too few points for a dense field; the grid result is still returned
        pass
    return res


class DicPredictor:
    """Classical DIC behind the same call signature as the trained networks."""

    def __init__(self, cfg: DicConfig = DicConfig(), kind: str = "displacement"):
        if kind not in ("displacement", "strain"):
            raise ValueError(f"unknown output kind {kind!r}")
        self.cfg = cfg
        self.kind = kind

    def __call__(self, ref: GrayImage, deformed: GrayImage):
        res = run_dic(ref, deformed, self.cfg)
        if res.displacement is None:
            raise EmptyResultError("too few valid grid points for a dense field")
        return res.displacement if self.kind == "displacement" else res.strain
