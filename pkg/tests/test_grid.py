import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hnext.errors import ParameterError, ShapeError
from hnext.grid import (
    ComplexGrid,
    GridGeometry,
    apply_mask,
    make_circular_mask,
    rotate_resample,
    upscale_bilinear,
    upscale_matrix,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def grids(min_side=1, max_side=9):
    shape = st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side))
    return shape.flatmap(lambda s: st.tuples(arrays(np.float64, s, elements=finite),
                                             arrays(np.float64, s, elements=finite)))


def square_complex(rng, n):
    return rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))


class TestComplexGrid:
    def test_rejects_non_finite(self):
        with pytest.raises(ParameterError):
            ComplexGrid(np.array([[1.0, np.nan]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            ComplexGrid(np.zeros(3))
        with pytest.raises(ShapeError):
            ComplexGrid(np.zeros((0, 3)))

    def test_values_are_read_only(self):
        g = ComplexGrid(np.ones((2, 3)))
        assert (g.height, g.width) == (2, 3)
        with pytest.raises(ValueError):
            g.values[0, 0] = 5

    def test_geometry(self):
        geo = GridGeometry.of(4, 7)
        assert (geo.center_row, geo.center_col, geo.mask_radius) == (1.5, 3.0, 2.0)
        assert ComplexGrid(np.zeros((4, 7))).geometry == geo


class TestRotateResample:
    @given(grids())
    def test_zero_angle_is_identity(self, parts):
        g = parts[0] + 1j * parts[1]
        np.testing.assert_array_equal(rotate_resample(g, 0.0), g)

    def test_quarter_turn_is_a_permutation(self, rng):
        g = square_complex(rng, 5)
        out = rotate_resample(g, np.pi / 2)
        np.testing.assert_array_equal(out, np.rot90(g))
        assert sorted(out.ravel().tolist(), key=abs) == sorted(g.ravel().tolist(), key=abs)

    def test_counter_clockwise_convention(self):
        g = np.zeros((3, 3))
        g[1, 2] = 1.0  # right of center
        out = rotate_resample(g, np.pi / 2)
        assert out[0, 1] == 1.0  # moves above center

    def test_impulse_at_45_degrees(self):
        g = np.zeros((7, 7))
        g[3, 3] = 1.0
        out = rotate_resample(g, np.pi / 4)
        assert out[3, 3] == 1.0
        outside = out.copy()
        outside[2:5, 2:5] = 0
        assert np.all(outside == 0)

    def test_brute_force_bilinear(self, rng):
        g = rng.normal(size=(6, 5))
        theta = 0.37
        out = rotate_resample(g, theta)
        cr, cc = 2.5, 2.0
        for i in range(6):
            for j in range(5):
                x, y = j - cc, cr - i
                xs = np.cos(theta) * x + np.sin(theta) * y
                ys = -np.sin(theta) * x + np.cos(theta) * y
                r, c = cr - ys, cc + xs
                r0, c0 = int(np.floor(r)), int(np.floor(c))
                acc = 0.0
                for rr, wr in ((r0, 1 - (r - r0)), (r0 + 1, r - r0)):
                    for ccc, wc in ((c0, 1 - (c - c0)), (c0 + 1, c - c0)):
                        if 0 <= rr < 6 and 0 <= ccc < 5:
                            acc += wr * wc * g[rr, ccc]
                assert out[i, j] == pytest.approx(acc, abs=1e-12)

    def test_real_and_imaginary_resampled_independently(self, rng):
        a, b = rng.normal(size=(2, 8, 8))
        out = rotate_resample(a + 1j * b, 0.9)
        np.testing.assert_allclose(out, rotate_resample(a, 0.9) + 1j * rotate_resample(b, 0.9))

    @given(st.integers(1, 9).flatmap(lambda n: arrays(np.complex128, (n, n), elements=finite)),
           st.integers(0, 3), st.integers(0, 3))
    def test_quarter_turns_compose(self, g, p, q):
        two = rotate_resample(rotate_resample(g, p * np.pi / 2), q * np.pi / 2)
        np.testing.assert_array_equal(two, rotate_resample(g, (p + q) * np.pi / 2))
        np.testing.assert_array_equal(two, np.rot90(g, p + q))

    @given(st.integers(1, 6).map(lambda h: 2 * h + 1), st.floats(-7, 7))
    def test_odd_center_preserved(self, n, theta):
        g = np.arange(n * n, dtype=float).reshape(n, n) + 1
        assert rotate_resample(g, theta)[n // 2, n // 2] == g[n // 2, n // 2]

    def test_per_batch_angles(self, rng):
        g = rng.normal(size=(3, 6, 6))
        out = rotate_resample(g, np.array([0.0, np.pi / 2, 0.3]))
        np.testing.assert_array_equal(out[0], g[0])
        np.testing.assert_array_equal(out[1], np.rot90(g[1]))
        np.testing.assert_allclose(out[2], rotate_resample(g[2], 0.3))


class TestMask:
    def test_single_pixel(self):
        np.testing.assert_array_equal(make_circular_mask(1, 1), [[1.0]])

    def test_five_by_five_corners(self):
        m = make_circular_mask(5, 5)
        expected = np.ones((5, 5))
        expected[[0, 0, -1, -1], [0, -1, 0, -1]] = 0
        np.testing.assert_array_equal(m, expected)

    def test_28_matches_exhaustive_scan(self):
        count = sum((i - 13.5) ** 2 + (j - 13.5) ** 2 <= 14**2 for i in range(28) for j in range(28))
        assert make_circular_mask(28, 28).sum() == count

    @given(st.integers(1, 20), st.integers(1, 20))
    def test_binary_and_symmetric(self, h, w):
        m = make_circular_mask(h, w)
        assert set(np.unique(m)) <= {0.0, 1.0}
        np.testing.assert_array_equal(m, m[::-1, ::-1])
        if h == w:
            np.testing.assert_array_equal(m, np.rot90(m))

    def test_invalid_size(self):
        with pytest.raises(ParameterError):
            make_circular_mask(0, 3)

    def test_apply_mask(self, rng):
        g = square_complex(rng, 5)
        np.testing.assert_array_equal(apply_mask(g, np.ones((5, 5))), g)
        np.testing.assert_array_equal(apply_mask(g, np.zeros((5, 5))), np.zeros((5, 5)))
        out = apply_mask(np.ones((5, 5)), make_circular_mask(5, 5))
        assert out.sum() == 21
        with pytest.raises(ShapeError):
            apply_mask(g, np.ones((4, 5)))

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_mask_commutes_with_quarter_turns(self, rng, k):
        g = square_complex(rng, 10)
        m = make_circular_mask(10, 10)
        lhs = apply_mask(rotate_resample(g, k * np.pi / 2), m)
        rhs = rotate_resample(apply_mask(g, m), k * np.pi / 2)
        np.testing.assert_array_equal(lhs, rhs)


class TestUpscale:
    def test_factor_one_copies(self, rng):
        g = square_complex(rng, 4)
        out = upscale_bilinear(g, 1)
        np.testing.assert_array_equal(out, g)
        assert out is not g

    def test_constant_preserved(self):
        out = upscale_bilinear(np.full((5, 7), 2.5 - 1j), 2)
        assert out.shape == (10, 14)
        np.testing.assert_allclose(out, 2.5 - 1j, atol=1e-14)

    def test_invalid_factor(self):
        with pytest.raises(ParameterError):
            upscale_bilinear(np.ones((3, 3)), 0)
        with pytest.raises(ParameterError):
            upscale_matrix(3, 0)

    @pytest.mark.parametrize("factor", [2, 3])
    def test_commutes_with_quarter_turn(self, rng, factor):
        g = square_complex(rng, 9)
        lhs = rotate_resample(upscale_bilinear(g, factor), np.pi / 2)
        rhs = upscale_bilinear(rotate_resample(g, np.pi / 2), factor)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    @given(arrays(np.float64, (4, 4), elements=finite), arrays(np.float64, (4, 4), elements=finite),
           finite, finite)
    def test_linear(self, g1, g2, a, b):
        lhs = upscale_bilinear(a * g1 + b * g2, 2)
        rhs = a * upscale_bilinear(g1, 2) + b * upscale_bilinear(g2, 2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_matrix_rows_are_partitions_of_unity(self):
        A = upscale_matrix(6, 2)
        assert A.shape == (12, 6)
        np.testing.assert_allclose(A.sum(axis=1), 1.0)
        assert np.all(A >= 0)
