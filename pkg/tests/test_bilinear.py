"""Bilinear spatial compression against an exact-rational oracle."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtembed.autograd import (
    Grid2D,
    ParameterError,
    ShapeError,
    Tensor,
    bilinear_downsample,
    bilinear_downsample_t,
    downsample_matrix,
    sum_,
)

from conftest import fd_check


def rational_oracle(values, s):
    """Half-pixel-centered bilinear downsample in exact rational arithmetic.

    Coded independently of the production path: per-site coordinate math
    with Fractions, no shared weight matrix.
    """
    h, w, c = values.shape
    hh, ww = h // s, w // s
    out = np.zeros((hh, ww, c))
    for i in range(hh):
        sy = (2 * i + 1) * Fraction(s, 2) - Fraction(1, 2)
        sy = min(max(sy, Fraction(0)), Fraction(h - 1))
        y0 = int(sy)  # floor for nonnegative
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ww):
            sx = (2 * j + 1) * Fraction(s, 2) - Fraction(1, 2)
            sx = min(max(sx, Fraction(0)), Fraction(w - 1))
            x0 = int(sx)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for k in range(c):
                v = ((1 - fy) * (1 - fx) * Fraction(values[y0, x0, k])
                     + (1 - fy) * fx * Fraction(values[y0, x1, k])
                     + fy * (1 - fx) * Fraction(values[y1, x0, k])
                     + fy * fx * Fraction(values[y1, x1, k]))
                out[i, j, k] = float(v)
    return out


class TestOracle:
    def test_4x4_sequential(self):
        g = Grid2D(np.arange(16, dtype=np.float64).reshape(4, 4, 1))
        got = bilinear_downsample(g, 2).values
        # half-pixel centers on a divisible grid: factor-2 block averages
        assert np.allclose(got[..., 0], [[2.5, 4.5], [10.5, 12.5]], atol=1e-12)
        assert np.max(np.abs(got - rational_oracle(g.values, 2))) <= 1e-12

    @pytest.mark.parametrize("h,w,s", [(4, 4, 2), (8, 8, 2), (8, 8, 4),
                                       (6, 4, 2), (12, 8, 4), (9, 6, 3)])
    def test_random_grids_match_oracle(self, h, w, s, rng):
        for _ in range(25):
            values = rng.normal(0, 3, (h, w, 2))
            got = bilinear_downsample(Grid2D(values), s).values
            assert np.max(np.abs(got - rational_oracle(values, s))) <= 1e-12

    def test_identity_at_s1(self, rng):
        values = rng.normal(0, 1, (5, 7, 3))
        assert np.array_equal(bilinear_downsample(Grid2D(values), 1).values, values)

    def test_constant_preservation(self, rng):
        for s in (1, 2, 4):
            values = np.full((8, 8, 2), 3.75)
            out = bilinear_downsample(Grid2D(values), s).values
            assert np.allclose(out, 3.75, atol=1e-12)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError, match="not divisible"):
            downsample_matrix(5, 4, 2)

    def test_bad_factor(self):
        with pytest.raises(ParameterError):
            downsample_matrix(4, 4, 0)


class TestProperties:
    @given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_linearity(self, seed, alpha, beta):
        r = np.random.default_rng(seed)
        a = r.normal(0, 1, (4, 6, 2))
        b = r.normal(0, 1, (4, 6, 2))
        lhs = bilinear_downsample(Grid2D(alpha * a + beta * b), 2).values
        rhs = (alpha * bilinear_downsample(Grid2D(a), 2).values
               + beta * bilinear_downsample(Grid2D(b), 2).values)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_output_bounds(self, seed):
        r = np.random.default_rng(seed)
        values = r.normal(0, 5, (8, 8, 1))
        out = bilinear_downsample(Grid2D(values), 2).values
        assert out.min() >= values.min() - 1e-12
        assert out.max() <= values.max() + 1e-12

    def test_weights_rows_sum_to_one(self):
        for h, w, s in [(8, 8, 2), (16, 16, 4), (6, 9, 3)]:
            m = downsample_matrix(h, w, s)
            assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)
            assert (m >= 0).all()

    def test_token_count_identity(self):
        for h, w in [(8, 8), (12, 12), (16, 16), (8, 16)]:
            for s in (1, 2, 4):
                assert downsample_matrix(h, w, s).shape == ((h // s) * (w // s), h * w)


class TestDifferentiablePath:
    def test_matches_grid_version(self, rng):
        values = rng.normal(0, 1, (4, 4, 3))
        t = bilinear_downsample_t(Tensor(values.reshape(16, 3)), 4, 4, 2)
        g = bilinear_downsample(Grid2D(values), 2)
        assert np.allclose(t.data, g.values.reshape(4, 3), atol=1e-12)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(0, 1, (16, 2)), requires_grad=True)
        w = rng.normal(0, 1, (4, 2))
        from vtembed.autograd import mul
        fd_check(lambda: sum_(mul(bilinear_downsample_t(x, 4, 4, 2), w)), [x])

    def test_gradient_is_transpose_of_forward(self):
        m = downsample_matrix(4, 4, 2)
        x = Tensor(np.zeros((16, 1)), requires_grad=True)
        out = bilinear_downsample_t(x, 4, 4, 2)
        out.backward(np.ones((4, 1)))
        assert np.allclose(x.grad[:, 0], m.T @ np.ones(4), atol=1e-12)
