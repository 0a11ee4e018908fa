import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinngrid.pinn import input_bounds, sobol_batch
from pinngrid.sobol import direction_numbers, max_dimension, scaled_sobol, sobol_points

# Gray-code construction with v_k = 2^-k: indices 1..8 flip bits 1,2,1,3,1,2,1,4
HAND_1D = [0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125, 0.1875]


def test_first_points_one_dimension():
    assert sobol_points(8, 1).ravel().tolist() == HAND_1D


def test_matches_scipy_unscrambled():
    qmc = pytest.importorskip("scipy.stats.qmc")
    for d in (2, 7, 30):
        ref = qmc.Sobol(d, scramble=False).random(1024)
        np.testing.assert_array_equal(sobol_points(1024, d, skip=0), ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 200))
def test_blocks_are_contiguous(skip, n):
    whole = sobol_points(skip + n, 3, skip=0)
    np.testing.assert_array_equal(sobol_points(n, 3, skip=skip), whole[skip:])


def test_second_dimension_direction_numbers():
    # x^2 + x + 1 (poly 0b111 minus the leading/trailing convention) with m = 1 gives 1, 3, 5, 15, ...
    V = direction_numbers(2)
    m = [int(V[1, k]) >> (32 - k - 1) for k in range(6)]
    assert m[:4] == [1, 3, 5, 15]


def test_argument_errors():
    with pytest.raises(ValueError):
        sobol_points(0, 2)
    with pytest.raises(ValueError):
        direction_numbers(max_dimension() + 1)
    with pytest.raises(ValueError):
        sobol_points(2, 1, skip=2**32)


def test_scaled_batch_in_bounds_and_repeatable(case):
    s, a = sobol_batch(case, 512, skip=17)
    lo, hi = input_bounds(case)
    x = np.hstack([s, a])
    assert np.all(x >= lo) and np.all(x < hi)
    s2, a2 = sobol_batch(case, 512, skip=17)
    assert np.array_equal(s, s2) and np.array_equal(a, a2)


def test_scaled_sobol_affine():
    np.testing.assert_array_equal(scaled_sobol(4, [2.0], [4.0]).ravel(), [3.0, 3.5, 2.5, 2.75])
