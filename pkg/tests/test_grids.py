import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pointseg import (
    Image,
    InvalidInputError,
    LogitField,
    finite_diff_grad,
    softmax,
    softmax_backward,
)

fields = st.integers(0, 10_000).map(
    lambda s: np.random.default_rng(s).normal(scale=3.0, size=(3, 4, 5))
)


def test_image_validation():
    with pytest.raises(InvalidInputError):
        Image(np.zeros((2, 2)) * np.nan)
    with pytest.raises(InvalidInputError):
        Image(np.zeros(3))
    img = Image(np.full((2, 2), 0.5))
    assert img.intensities.dtype == np.float64


def test_logit_field_validation():
    with pytest.raises(InvalidInputError):
        LogitField(np.zeros((4, 4)))
    with pytest.raises(InvalidInputError):
        LogitField(np.full((2, 3, 3), np.inf))


@given(fields)
def test_softmax_simplex(logits):
    p = softmax(LogitField(logits)).probabilities
    assert np.all(p > 0)
    assert np.abs(p.sum(axis=0) - 1.0).max() <= 1e-9


@given(fields, st.floats(-500, 500))
def test_softmax_shift_invariance(logits, shift):
    a = softmax(LogitField(logits)).probabilities
    b = softmax(LogitField(logits + shift)).probabilities
    assert np.abs(a - b).max() <= 1e-12


def test_softmax_extreme_logits_stay_finite():
    p = softmax(LogitField(np.array([[[1e300]], [[-1e300]]]))).probabilities
    assert np.all(np.isfinite(p))
    assert p[0, 0, 0] == pytest.approx(1.0)


@given(st.integers(0, 200))
def test_softmax_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 3))
    probe = rng.normal(size=(2, 3, 3))
    field = LogitField(logits)
    analytic = softmax_backward(field, probe)

    def f(flat):
        return float((probe * softmax(LogitField(flat.reshape(2, 3, 3))).probabilities).sum())

    fd = finite_diff_grad(f, logits.reshape(-1)).reshape(2, 3, 3)
    assert np.abs(analytic - fd).max() <= 1e-6


def test_finite_diff_grad_on_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = finite_diff_grad(lambda v: float((v**2).sum()), x)
    assert np.abs(g - 2 * x).max() <= 1e-6
