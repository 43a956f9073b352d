import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssclab import tensor as T
from ssclab.gradcheck import grad_check
from ssclab.loss import (AttributeStats, bce_from_probs, bce_loss, gate_open, total_loss,
                         weighted_bce)


def logit(p):
    return np.log(p) - np.log1p(-p)


def direct_bce(p, y, w=None):
    w = np.ones_like(p) if w is None else w
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total -= w[i, j] * (y[i, j] * math.log(p[i, j]) + (1 - y[i, j]) * math.log(1 - p[i, j]))
    return total / p.shape[0]


def test_bce_examples():
    assert bce_loss(np.zeros((1, 1)), np.ones((1, 1))).item() == pytest.approx(math.log(2))
    assert bce_loss(np.array([[40.0, -40.0]]), np.array([[1, 0]])).item() < 1e-15
    assert bce_from_probs(np.array([[1.0, 0.0]]), np.array([[1, 0]])) == pytest.approx(2e-7, rel=1e-3)


def test_bce_matches_direct_formula():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (2, 3))
    y = rng.integers(0, 2, (2, 3))
    assert bce_loss(logit(p), y).item() == pytest.approx(direct_bce(p, y), abs=1e-12)
    assert bce_from_probs(p, y) == pytest.approx(direct_bce(p, y), abs=1e-12)


def test_weight_examples():
    half = AttributeStats([0.5])
    np.testing.assert_allclose(half.weights([[1], [0]]), [[math.exp(0.5)]] * 2)
    np.testing.assert_allclose(AttributeStats([1.0]).weights([[1], [0]]), [[1.0], [math.e]])
    with pytest.raises(ValueError):
        AttributeStats([1.2])


def test_weighted_bce_examples():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(4, 3)), rng.integers(0, 2, (4, 3))
    plain = bce_loss(z, y).item()
    assert weighted_bce(z, y, AttributeStats([0.5] * 3)).item() == pytest.approx(
        math.exp(0.5) * plain, abs=1e-9)
    ones = np.ones((4, 3))
    assert weighted_bce(z, ones, AttributeStats([0.0] * 3)).item() == pytest.approx(
        math.e * bce_loss(z, ones).item(), abs=1e-9)
    r = rng.uniform(0, 1, 3)
    p = 1 / (1 + np.exp(-z))
    assert weighted_bce(z, y, AttributeStats(r)).item() == pytest.approx(
        direct_bce(p, y, AttributeStats(r).weights(y)), abs=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_losses_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z, y, r = rng.normal(size=(5, 4)), rng.integers(0, 2, (5, 4)), rng.uniform(0, 1, 4)
    rows, cols = rng.permutation(5), rng.permutation(4)
    assert bce_loss(z[rows][:, cols], y[rows][:, cols]).item() == pytest.approx(
        bce_loss(z, y).item(), abs=1e-12)
    assert weighted_bce(z[rows][:, cols], y[rows][:, cols], AttributeStats(r[cols])).item() == \
        pytest.approx(weighted_bce(z, y, AttributeStats(r)).item(), abs=1e-12)


def test_bce_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, (3, 4))
    stats = AttributeStats(rng.uniform(0, 1, 4))
    for f in (lambda z: bce_loss(z, y), lambda z: weighted_bce(z, y, stats)):
        rep = grad_check(f, rng.normal(size=(3, 4)) * 3)
        assert rep.passed and rep.max_rel_error <= 1e-5


def cfg(l1=1.0, l2=0.1, ie=4):
    return SimpleNamespace(lambda1=l1, lambda2=l2, initial_epoch=ie)


def test_gate_is_strict():
    assert not gate_open(4, 4) and gate_open(5, 4)
    closed = total_loss(T.Tensor(np.array(1.0)), 2.0, 3.0, 4, cfg())
    assert not closed.gated and closed.total_value == 1.0 and closed.spac == 0.0


def test_total_loss_example():
    out = total_loss(T.Tensor(np.array(1.0)), T.Tensor(np.array(2.0)), T.Tensor(np.array(3.0)),
                     5, cfg())
    assert out.gated and out.total_value == pytest.approx(3.3, abs=1e-12)
    assert out.total_value == pytest.approx(out.cls + 1.0 * out.spac + 0.1 * out.semc, abs=1e-9)


def test_zero_lambdas_give_cls_every_epoch():
    for e in range(10):
        assert total_loss(T.Tensor(np.array(0.7)), 5.0, 9.0, e, cfg(0.0, 0.0, 2)).total_value == \
            pytest.approx(0.7)
    with pytest.raises(ValueError):
        total_loss(T.Tensor(np.array(0.7)), 0.0, 0.0, -1, cfg())


def test_gated_total_backpropagates_into_every_term():
    a, b, c = (T.Tensor(np.array(v), requires_grad=True) for v in (1.0, 2.0, 3.0))
    T.backward(total_loss(a, b, c, 6, cfg(0.5, 0.25)).total)
    assert (a.grad, b.grad, c.grad) == (1.0, 0.5, 0.25)
