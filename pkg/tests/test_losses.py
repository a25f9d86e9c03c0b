import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcpheno.losses import (
    LossWeights,
    aux_consistency_loss,
    focal_loss,
    inverse_frequency_alpha,
    pearson_per_marker,
    regression_loss,
    total_loss,
)
from dpcpheno.model import Predictions
from dpcpheno.tensorcore import Tensor
from dpcpheno.tensorcore import functional as F


def probs_tensor(p):
    return Tensor(np.asarray(p, dtype=np.float64))


def ce(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-7, 1 - 1e-7)
    return float(np.mean(-np.log(p[np.arange(len(y)), y])))


# -- focal ---------------------------------------------------------------

def test_focal_reduces_to_ce():
    assert focal_loss(probs_tensor([[0.5, 0.25, 0.25]]), [0], gamma=0.0).value == pytest.approx(math.log(2), abs=1e-12)


def test_focal_confident_is_zero():
    for g in (0.0, 1.0, 2.0, 5.0):
        assert focal_loss(probs_tensor([[1.0, 0.0, 0.0]]), [0], gamma=g).value < 1e-6


def test_focal_hand_value():
    v = focal_loss(probs_tensor([[0.9, 0.05, 0.05]]), [0], gamma=2.0).value
    assert v == pytest.approx(0.01 * -math.log(0.9), rel=1e-12)
    assert v == pytest.approx(1.0536e-3, abs=1e-7)


def test_focal_alpha_weights_by_true_class():
    p = probs_tensor([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]])
    base = focal_loss(p, [0, 1], (1, 1, 1), 2.0).value
    weighted = focal_loss(p, [0, 1], (2, 1, 1), 2.0).value
    first = 0.25 * -math.log(0.5)
    assert weighted - base == pytest.approx(first / 2, rel=1e-12)


def test_focal_bad_label():
    with pytest.raises(ValueError):
        focal_loss(probs_tensor([[0.5, 0.25, 0.25]]), [3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_focal_gamma0_matches_ce_random_batches(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2, (16, 3))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    y = rng.integers(0, 3, 16)
    assert abs(focal_loss(probs_tensor(p), y, gamma=0.0).value - ce(p, y)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_focal_below_ce_elementwise(seed, gamma):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), 8)
    y = rng.integers(0, 3, 8)
    for i in range(8):
        f = focal_loss(probs_tensor(p[i:i + 1]), y[i:i + 1], gamma=gamma).value
        assert f <= ce(p[i:i + 1], y[i:i + 1]) + 1e-15


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.floats(0, 5))
def test_focal_non_increasing_in_p(a, b, gamma):
    lo, hi = sorted((a, b))
    f = lambda p: focal_loss(probs_tensor([[p, (1 - p) / 2, (1 - p) / 2]]), [0], gamma=gamma).value  # noqa: E731
    assert f(hi) <= f(lo) + 1e-12


# -- regression ----------------------------------------------------------------

def test_regression_zero_at_target():
    t = np.random.default_rng(0).normal(size=(6, 4))
    assert regression_loss(Tensor(t.copy()), t, beta=0.5).value == pytest.approx(0.0, abs=1e-12)


def test_smooth_l1_hand_value():
    # single marker through the SmoothL1 part only (beta=0)
    v = regression_loss(Tensor([[0.0], [0.0]]), np.array([[3.0], [4.0]]), beta=0.0).value
    assert v == pytest.approx(3.0, abs=1e-15)


def test_pearson_term_affine_invariant():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(10, 4))
    target = rng.normal(size=(10, 4))
    a = rng.uniform(0.1, 10, 4)
    b = rng.normal(0, 5, 4)
    r1 = pearson_per_marker(Tensor(pred), target).value
    r2 = pearson_per_marker(Tensor(pred * a + b), target).value
    np.testing.assert_allclose(r1, r2, atol=1e-9)


def test_regression_small_batch_warns(caplog):
    with caplog.at_level("WARNING"):
        v = regression_loss(Tensor([[1.0, 2.0, 3.0, 4.0]]), np.zeros((1, 4)), beta=0.5).value
    assert "Pearson" in caplog.text or "pearson" in caplog.text
    assert v == pytest.approx(np.mean([0.5, 1.5, 2.5, 3.5]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3))
def test_regression_nonnegative_and_term_bounds(seed, beta):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert regression_loss(Tensor(pred), target, beta=beta).value >= 0
    r = pearson_per_marker(Tensor(pred), target).value
    assert np.all((1 - r >= -1e-12) & (1 - r <= 2 + 1e-12))


# -- aux -------------------------------------------------------------------------

def test_aux_examples():
    h = Tensor(np.random.default_rng(2).normal(size=(3, 256)))
    assert aux_consistency_loss(h, h, h).value == 0.0
    zero = Tensor(np.zeros((1, 256)))
    assert aux_consistency_loss(zero, Tensor(np.ones((1, 256))), zero).value == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_aux_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=(2, 8))) for _ in range(3))
    assert aux_consistency_loss(a, b, c).value >= 0


# -- total -----------------------------------------------------------------------

def _preds(seed=3, leaves=False):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(6, 3)), requires_grad=leaves)
    reg = Tensor(rng.normal(size=(6, 4)), requires_grad=leaves)
    feats = {k: Tensor(rng.normal(size=(6, 16)), requires_grad=leaves) for k in ("h_fused", "h_cls", "h_reg")}
    labels = rng.integers(0, 3, 6)
    markers = rng.normal(size=(6, 4))
    return Predictions(F.softmax(logits, -1), reg, feats), labels, markers, logits


def test_total_all_zero_weights():
    p, y, m, _ = _preds()
    assert total_loss(p, y, m, LossWeights(0, 0, 0)).total.value == 0.0


def test_total_cls_only_equals_focal():
    p, y, m, _ = _preds()
    w = LossWeights(1, 0, 0, alpha=(0.5, 1, 2))
    assert total_loss(p, y, m, w).total.value == focal_loss(p.cls_probs, y, w.alpha, w.gamma).value


def test_total_matches_breakdown():
    p, y, m, _ = _preds()
    w = LossWeights()
    out = total_loss(p, y, m, w)
    f = p.features
    hand = (focal_loss(p.cls_probs, y, w.alpha, w.gamma).value
            + regression_loss(p.reg_values, m, w.beta).value
            + 0.1 * aux_consistency_loss(f["h_fused"], f["h_cls"], f["h_reg"]).value)
    assert abs(out.total.value - hand) < 1e-9
    t = out.terms
    assert abs(out.total.value - (t["cls"] + t["reg"] + 0.1 * t["aux"])) < 1e-9


def test_zero_weight_blocks_gradient():
    p, y, m, logits = _preds(leaves=True)
    total_loss(p, y, m, LossWeights(0, 1, 0.1)).total.backward()
    assert logits.grad is None
    assert p.reg_values.grad is not None


def test_inverse_frequency_alpha():
    a = inverse_frequency_alpha([0, 0, 0, 1, 2, 2])
    assert np.mean(a) == pytest.approx(1.0)
    # weights proportional to 1/count: counts 3,1,2
    assert a[1] / a[0] == pytest.approx(3.0) and a[2] / a[0] == pytest.approx(1.5)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=(1, 0, 1))
    with pytest.raises(ValueError):
        LossWeights(pearson_eps=0)
    with pytest.raises(ValueError):
        LossWeights(lambda_cls=-1)
