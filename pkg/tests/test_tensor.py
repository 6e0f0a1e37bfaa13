import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from approxline.network import Conv2d, Dense
from approxline.tensor import (IntervalTensor, ShapeError, affine_apply, as_tensor, interval_affine, relu_box)

FIG_MATRIX = np.array([[0.5, 0.5], [1.0, -0.25]])
floats = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_as_tensor_rejects_nonfinite_and_bad_shape():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    with pytest.raises(ShapeError):
        as_tensor([1.0, 2.0, 3.0], shape=(2,))


def test_interval_requires_nonnegative_radius():
    with pytest.raises(ValueError):
        IntervalTensor(np.zeros(2), np.array([1.0, -1.0]))


def test_affine_identity():
    layer = Dense(np.eye(2), np.zeros(2))
    assert np.array_equal(affine_apply(layer, [1.0, 2.0]), [1.0, 2.0])


def test_affine_worked_example_node():
    layer = Dense(FIG_MATRIX, np.zeros(2))
    assert np.allclose(affine_apply(layer, [1.0, 4.5]), [2.75, -0.125], atol=1e-12)


def test_affine_shape_error_names_shapes():
    layer = Dense(FIG_MATRIX, np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        affine_apply(layer, [1.0, 2.0, 3.0])


def test_averaging_conv_on_constant_image():
    conv = Conv2d(np.full((1, 1, 3, 3), 1 / 9), np.zeros(1), stride=1, padding=1).bind((1, 4, 4))
    out = affine_apply(conv, np.full((1, 4, 4), 7.0))
    assert np.allclose(out[0, 1:3, 1:3], 7.0, atol=1e-12)
    for y, x in [(0, 0), (0, 3), (3, 0), (3, 3)]:
        assert out[0, y, x] == pytest.approx(7 * 4 / 9, abs=1e-12)


def test_interval_identity_and_worked_example():
    box = IntervalTensor.from_bounds([0.0, 2.0], [1.0, 4.5])
    same = interval_affine(Dense(np.eye(2), np.zeros(2)), box)
    assert np.array_equal(same.lower, box.lower) and np.array_equal(same.upper, box.upper)
    out = interval_affine(Dense(FIG_MATRIX, np.zeros(2)), box)
    assert np.allclose(out.lower, [1.0, -1.125], atol=1e-12)
    assert np.allclose(out.upper, [2.75, 0.5], atol=1e-12)


def test_point_box_matches_affine_apply():
    rng = np.random.default_rng(1)
    layer = Dense(rng.normal(size=(5, 3)), rng.normal(size=5))
    x = rng.normal(size=3)
    out = interval_affine(layer, IntervalTensor.point(x))
    assert np.all(out.radius == 0)
    assert np.allclose(out.center, affine_apply(layer, x), atol=1e-12, rtol=0)


@pytest.mark.parametrize("c,r,c2,r2", [(3, 1, 3, 1), (-3, 1, 0, 0), (0, 2, 1, 1)])
def test_relu_box_examples(c, r, c2, r2):
    out = relu_box(IntervalTensor(np.array([c], float), np.array([r], float)))
    assert out.center[0] == c2 and out.radius[0] == r2


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, 6, elements=floats), hnp.arrays(np.float64, 6, elements=st.floats(0, 50)))
def test_relu_box_is_interval_hull(c, r):
    out = relu_box(IntervalTensor(c, r))
    lo, hi = np.maximum(c - r, 0), np.maximum(c + r, 0)
    # center/radius round trip can differ from the bounds by an ulp of their magnitude
    ulp = 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)) + 1.0)
    assert np.all(np.abs(out.lower - lo) <= ulp) and np.all(np.abs(out.upper - hi) <= ulp)


def test_interval_affine_soundness_random_triples():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n_in, n_out = rng.integers(1, 8, size=2)
        layer = Dense(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))
        c, r = rng.normal(size=n_in), rng.random(n_in) * 3
        x = c + (2 * rng.random(n_in) - 1) * r
        assert interval_affine(layer, IntervalTensor(c, r)).contains(affine_apply(layer, x), slack=1e-9)


def test_interval_conv_soundness():
    rng = np.random.default_rng(3)
    conv = Conv2d(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), stride=2, padding=1).bind((3, 5, 5))
    c, r = rng.normal(size=(3, 5, 5)), rng.random((3, 5, 5))
    box = interval_affine(conv, IntervalTensor(c, r))
    for _ in range(200):
        x = c + (2 * rng.random(c.shape) - 1) * r
        assert box.contains(affine_apply(conv, x), slack=1e-9)
