import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speckle_lab.deform import DeformationSpec, sample_field, warp
from speckle_lab.dic import (DicConfig, DicPredictor, DicResult, EmptyResultError, grid_strain,
                             interpolate_dense, interpolate_grid, quadratic_peak, run_dic, zncc)
from speckle_lab.fields import DisplacementField, GrayImage


class TestZncc:
    def test_examples(self, rng):
        a = rng.uniform(size=(9, 9))
        assert zncc(a, a) == pytest.approx(1.0, abs=1e-15)
        assert zncc(a, 0.3 * a + 0.2) == pytest.approx(1.0, abs=1e-14)
        assert zncc(a, -a) == pytest.approx(-1.0, abs=1e-15)

    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)),
           arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_symmetric_and_bounded(self, a, b):
        if np.ptp(a) < 1e-6 or np.ptp(b) < 1e-6:
            return
        assert zncc(a, b) == zncc(b, a)
        assert -1 <= zncc(a, b) <= 1

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="variance"):
            zncc(np.ones((3, 3)), np.eye(3))


class TestQuadraticPeak:
    def test_exact_on_quadratic(self):
        y, x = np.mgrid[-1:2, -1:2]
        dx, dy = 0.3, -0.2
        c = 1 - (x - dx) ** 2 - 0.5 * (y - dy) ** 2 + 0.1 * (x - dx) * (y - dy)
        got = quadratic_peak(c)
        assert got == pytest.approx((dx, dy), abs=1e-12)

    def test_saddle_rejected(self):
        y, x = np.mgrid[-1:2, -1:2]
        assert quadratic_peak(x ** 2 - y ** 2) is None


class TestRunDic:
    def test_identical(self, speckle128):
        r = run_dic(speckle128, speckle128)
        assert r.valid.all()
        assert not r.u.any() and not r.v.any()
        assert np.allclose(r.zncc, 1.0)
        assert np.allclose(r.exx, 0) and np.allclose(r.exy, 0)
        assert not r.displacement.u.any()

    def test_integer_shift(self, speckle128):
        f = DisplacementField(np.full((128, 128), 3.0), np.full((128, 128), -2.0))
        r = run_dic(speckle128, warp(speckle128, f))
        # interior: the matched subset, centred at (x + 3, y - 2), never touches edge-extended pixels
        gy, gx = np.meshgrid(r.ys, r.xs, indexing="ij")
        inner = (gx + 3 + 17 <= 127) & (gy - 2 - 17 >= 0)
        assert inner.sum() > 0.5 * inner.size
        assert r.valid[inner].all()
        assert np.all(r.u[inner] == 3.0) and np.all(r.v[inner] == -2.0)

    def test_half_pixel(self, speckle128):
        f = DisplacementField(np.full((128, 128), 0.5), np.zeros((128, 128)))
        r = run_dic(speckle128, warp(speckle128, f))
        assert np.mean(np.abs(r.u[r.valid] - 0.5)) <= 0.05
        assert np.mean(np.abs(r.v[r.valid])) <= 0.05

    def test_affine_intensity_invariance(self, speckle128):
        f, _ = sample_field(DeformationSpec("gaussian_bumps", 0.8, seed=3), 128, 128)
        de = warp(speckle128, f)
        alt = GrayImage(0.9 * de.data + 0.05)  # stays inside [0, 1], no clamping
        a, b = run_dic(speckle128, de), run_dic(speckle128, alt)
        assert np.array_equal(a.valid, b.valid)
        # the integer search is identical; subpixel values agree to rounding level
        assert np.array_equal(np.floor(a.u[a.valid] + 0.5), np.floor(b.u[b.valid] + 0.5))
        assert np.allclose(a.u[a.valid], b.u[b.valid], rtol=0, atol=1e-10)
        assert np.allclose(a.v[a.valid], b.v[b.valid], rtol=0, atol=1e-10)

    def test_decorrelated_points_invalid(self, speckle128, rng):
        data = speckle128.data.copy()
        data[:, 64:] = rng.uniform(size=(128, 64))
        r = run_dic(speckle128, GrayImage(data))
        right = r.xs > 64 + 17 + 4
        assert not r.valid[:, right].any()
        assert r.valid[:, r.xs < 64 - 17 - 4].all()

    def test_border_peak_invalid(self, speckle128):
        f = DisplacementField(np.full((128, 128), 4.0), np.zeros((128, 128)))
        # every peak sits on the edge of a radius-4 search window
        with pytest.raises(EmptyResultError):
            run_dic(speckle128, warp(speckle128, f), DicConfig(search_radius=4))
        r = run_dic(speckle128, warp(speckle128, f), DicConfig(search_radius=5))
        inner = r.xs + 4 + 17 <= 127
        assert np.all(r.u[:, inner] == 4.0)

    def test_empty_result(self, rng):
        a = GrayImage(rng.uniform(size=(64, 64)))
        b = GrayImage(rng.uniform(size=(64, 64)))
        with pytest.raises(EmptyResultError):
            run_dic(a, b)

    def test_predictor(self, speckle128):
        out = DicPredictor(kind="strain")(speckle128, speckle128)
        assert out.shape == (128, 128) and np.allclose(out.as_array(), 0)

    def test_result_json(self, speckle128):
        d = run_dic(speckle128, speckle128).to_dict()
        assert set(d) >= {"grid", "u", "v", "zncc", "valid"}

    @pytest.mark.parametrize("bad", [dict(subset_size=34), dict(subset_size=9), dict(step=0),
                                     dict(strain_window=4), dict(zncc_threshold=0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            DicConfig(**bad)


class TestGridStrain:
    def test_plane_recovered(self):
        xs, ys = np.arange(0, 70, 7), np.arange(0, 56, 7)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        u = 0.01 * gx - 0.004 * gy
        v = 0.002 * gx + 0.02 * gy
        exx, eyy, exy, ok = grid_strain(xs, ys, u, v, np.ones(u.shape, bool), 5)
        assert ok.all()
        assert np.allclose(exx, 0.01) and np.allclose(eyy, 0.02)
        assert np.allclose(exy, 0.5 * (-0.004 + 0.002))


def brute_force_dense(xs, ys, values, mask, h, w):
    """Per-pixel normalised bilinear interpolation written without vectorisation."""
    out = np.empty((h, w))
    for py in range(h):
        for px in range(w):
            cx = min(max(px, xs[0]), xs[-1])
            cy = min(max(py, ys[0]), ys[-1])
            j = min(int(np.searchsorted(xs, cx, side="right")) - 1, len(xs) - 2)
            i = min(int(np.searchsorted(ys, cy, side="right")) - 1, len(ys) - 2)
            tx = (cx - xs[j]) / (xs[j + 1] - xs[j])
            ty = (cy - ys[i]) / (ys[i + 1] - ys[i])
            num = den = 0.0
            for di, wy in ((0, 1 - ty), (1, ty)):
                for dj, wx in ((0, 1 - tx), (1, tx)):
                    if mask[i + di, j + dj]:
                        num += wy * wx * values[i + di, j + dj]
                        den += wy * wx
            if den > 0:
                out[py, px] = num / den
            else:
                best = min(((xs[b] - px) ** 2 + (ys[a] - py) ** 2, a, b)
                           for a in range(len(ys)) for b in range(len(xs)) if mask[a, b])
                out[py, px] = values[best[1], best[2]]
    return out


class TestInterpolation:
    xs = np.arange(5, 45, 8)
    ys = np.arange(4, 44, 8)

    def test_constant(self):
        vals = np.full((5, 5), 0.7)
        out = interpolate_grid(self.xs, self.ys, vals, np.ones((5, 5), bool), 48, 48)
        assert np.allclose(out, 0.7, atol=1e-15)

    def test_linear_inside_hull(self):
        gx = np.tile(self.xs.astype(float), (5, 1))
        out = interpolate_grid(self.xs, self.ys, 0.02 * gx, np.ones((5, 5), bool), 48, 48)
        x = np.arange(48, dtype=float)
        inside = slice(self.xs[0], self.xs[-1] + 1)
        assert np.allclose(out[self.ys[0]:self.ys[-1] + 1, inside], 0.02 * x[inside], atol=1e-14)
        # outside the hull the nearest edge value is held
        assert np.allclose(out[:, 0], 0.02 * self.xs[0])

    def test_checkerboard_mask(self, rng):
        vals = rng.normal(size=(5, 5))
        mask = (np.add.outer(np.arange(5), np.arange(5)) % 2) == 0
        poisoned = np.where(mask, vals, 1e6)
        out = interpolate_grid(self.xs, self.ys, poisoned, mask, 48, 48)
        ref = brute_force_dense(self.xs, self.ys, vals, mask, 48, 48)
        assert np.allclose(out, ref, atol=1e-12)
        assert np.abs(out).max() < 10

    def test_too_few_points(self):
        mask = np.zeros((5, 5), bool)
        mask[0, :3] = True
        with pytest.raises(ValueError):
            interpolate_grid(self.xs, self.ys, np.zeros((5, 5)), mask, 48, 48)
        mask[0, 3] = True  # four collinear points
        with pytest.raises(ValueError, match="collinear"):
            interpolate_grid(self.xs, self.ys, np.zeros((5, 5)), mask, 48, 48)

    def test_dense_from_result(self):
        shape = (5, 5)
        ones = np.ones(shape, bool)
        z = np.zeros(shape)
        res = DicResult(self.xs, self.ys, z + 1, z - 1, z + 1, ones, z, z, z, ones)
        d, s = interpolate_dense(res, 48, 48)
        assert np.all(d.u == 1) and np.all(d.v == -1) and not s.as_array().any()
