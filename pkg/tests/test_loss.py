import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itmn.gradcheck import check_gradients
from itmn.loss import LossConfig, classification_loss, focal_loss, localization_loss, total_loss
from itmn.tensor import Tensor, matmul, reshape


def test_focal_perfect_prediction_is_zero():
    assert focal_loss(1.0, 2.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1.0))
def test_gamma_zero_is_cross_entropy(p):
    assert abs(focal_loss(p, 0.0) - (-math.log(p))) <= 1e-12


def test_focal_half_probability():
    assert abs(focal_loss(0.5, 2.0) - 0.25 * math.log(2)) <= 1e-12
    assert focal_loss(0.5, 2.0) == pytest.approx(0.173287, abs=1e-6)


def test_classification_loss_matches_scalar_focal():
    logits = np.array([[[0.3, -0.2], [1.0, 2.0], [0.0, 0.0]]])
    labels = np.array([[0, 1, 1]])
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    pt = p[0, [0, 1, 2], labels[0]]
    want = np.mean([focal_loss(v, 2.0) for v in pt])
    assert classification_loss(Tensor(logits), labels, 2.0).item() == pytest.approx(want, abs=1e-12)


def test_localization_cases():
    pred = Tensor(np.zeros((1, 3, 4)))
    loss, npos = localization_loss(pred, np.zeros((1, 3, 4)), np.array([[True, False, True]]))
    assert loss.item() == 0.0 and npos == 2
    loss, npos = localization_loss(pred, np.ones((1, 3, 4)), np.zeros((1, 3), bool))
    assert loss.item() == 0.0 and npos == 0
    loss, npos = localization_loss(pred, np.ones((1, 3, 4)), np.array([[False, True, False]]))
    assert loss.item() == pytest.approx(2.0) and npos == 1


def test_zero_gt_total_is_focal_only():
    rng = np.random.default_rng(0)
    loc, cls = Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(2, 5, 2)))
    labels = np.zeros((2, 5), np.int64)
    rep = total_loss(loc, cls, labels, rng.normal(size=(2, 5, 4)))
    assert rep.total.item() == rep.cls.item() and rep.num_positive == 0


def test_duplicated_batch_leaves_mean_invariant():
    rng = np.random.default_rng(1)
    loc, cls = rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 2))
    labels = np.array([[0, 1, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0]])
    tgt = rng.normal(size=(2, 6, 4))
    one = total_loss(Tensor(loc), Tensor(cls), labels, tgt)
    two = total_loss(Tensor(np.concatenate([loc, loc])), Tensor(np.concatenate([cls, cls])),
                     np.concatenate([labels, labels]), np.concatenate([tgt, tgt]))
    assert two.total.item() == pytest.approx(one.total.item(), rel=1e-12)
    assert two.num_positive == 2 * one.num_positive


def test_alpha_weights_localization():
    rng = np.random.default_rng(2)
    loc, cls = Tensor(rng.normal(size=(1, 4, 4))), Tensor(rng.normal(size=(1, 4, 2)))
    labels, tgt = np.array([[1, 0, 0, 1]]), rng.normal(size=(1, 4, 4))
    rep = total_loss(loc, cls, labels, tgt, LossConfig(alpha=0.5))
    assert rep.total.item() == pytest.approx(rep.cls.item() + 0.5 * rep.loc.item(), abs=1e-14)
    with pytest.raises(ValueError):
        LossConfig(alpha=0)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_two_box_toy_model_gradients(gamma):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 3))
    w_loc = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w_cls = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    labels, tgt = np.array([[1, 0]]), rng.normal(size=(1, 2, 4)) * 3

    def f():
        xs = Tensor(x.reshape(2, 3))
        loc = reshape(matmul(xs, w_loc), (1, 2, 4))
        cls = reshape(matmul(xs, w_cls), (1, 2, 2))
        return total_loss(loc, cls, labels, tgt, LossConfig(gamma=gamma)).total

    assert max(check_gradients(f, [w_loc, w_cls])) <= 1e-4
