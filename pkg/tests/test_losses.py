import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packmil import autograd as ag
from packmil.autograd import TrainingFault
from packmil.gradcheck import check_gradients
from packmil.losses import (
    asl_loss,
    asl_loss_from_logits,
    bce_from_logits,
    binary_cross_entropy,
    combine_losses,
    cross_entropy,
    focal_loss_from_logits,
    focal_multilabel_loss,
    survival_nll,
)


def test_asl_examples():
    assert asl_loss([0.5, 0.5], [1, 0], 0, 0).item() == pytest.approx(1.386294, abs=1e-6)
    assert asl_loss([1.0, 0.0], [1, 0]).item() == pytest.approx(0.0, abs=1e-6)
    want = 0.01 * -math.log(0.9) + 1e-4 * -math.log(0.9)
    assert asl_loss([0.9, 0.1], [1, 0], 2, 4).item() == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(1.064e-3, rel=1e-3)


def test_asl_rejects_soft_targets():
    with pytest.raises(ValueError):
        asl_loss([0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        asl_loss([0.5, 0.5], [1, 1])


def test_focal_examples():
    assert focal_multilabel_loss([0.5], [1], 0.5, 0).item() == pytest.approx(0.346574, abs=1e-6)
    want = 0.5 * 0.01 * -math.log(0.9)
    assert focal_multilabel_loss([0.9], [1], 0.5, 2).item() == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(5.268e-4, rel=1e-3)
    assert focal_multilabel_loss([1e-12], [0]).item() < 1e-12


def test_survival_examples():
    h = np.full(4, 0.5)
    assert abs(survival_nll(h, 1, 1).item() - 1.386294) <= 1e-6
    assert survival_nll(h, 1, 1).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert survival_nll(h, 0, 2, alpha_cens=0.3).item() == pytest.approx(0.7 * -math.log(0.25), abs=1e-12)
    assert survival_nll(np.zeros(4), 0, 4).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        survival_nll(h, 1, 0)
    with pytest.raises(ValueError):
        survival_nll(h, 1, 5)


def test_survival_batch_rows_match_single():
    rng = np.random.default_rng(0)
    h = rng.uniform(0.05, 0.95, (5, 4))
    ev = np.array([1, 0, 1, 0, 1])
    k = np.array([1, 2, 4, 4, 3])
    batch = survival_nll(h, ev, k, 0.2).data
    for i in range(5):
        assert batch[i] == pytest.approx(survival_nll(h[i], ev[i], k[i], 0.2).item(), abs=1e-14)


def test_combine():
    assert combine_losses(1.0, 2.0, 0.2).item() == pytest.approx(1.4)
    assert combine_losses(0.0, 4.0, 0.5).item() == pytest.approx(2.0)
    assert combine_losses(3.0, 9.0, 0.0).item() == 3.0
    with pytest.raises(TrainingFault):
        combine_losses(np.nan, 1.0, 0.2)
    with pytest.raises(TrainingFault):
        combine_losses(1.0, np.inf, 0.2)


probs = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6)


@settings(max_examples=200, deadline=None)
@given(probs, st.data())
def test_asl_without_focusing_is_bce_sum(p, data):
    y = np.zeros(len(p))
    y[data.draw(st.integers(0, len(p) - 1))] = 1
    assert asl_loss(p, y, 0, 0).item() == binary_cross_entropy(p, y).item()


@settings(max_examples=200, deadline=None)
@given(probs, st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.data())
def test_losses_non_negative_and_finite(p, g1, g2, alpha, data):
    C = len(p)
    y = np.zeros(C)
    y[data.draw(st.integers(0, C - 1))] = 1
    soft = np.array(data.draw(st.lists(st.floats(0, 1), min_size=C, max_size=C)))
    k = data.draw(st.integers(1, C))
    for v in (asl_loss(p, y, g1, g2), focal_multilabel_loss(p, soft, alpha, g1),
              survival_nll(p, 1, k, alpha), survival_nll(p, 0, k, alpha)):
        assert np.isfinite(v.item()) and v.item() >= 0


def test_logit_variants_match_probability_versions():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = rng.uniform(-20, 20, (4, 5))
        y = np.eye(5)[rng.integers(0, 5, 4)]
        soft = rng.uniform(0, 1, (4, 5))
        p_soft = ag.softmax(z, axis=-1)
        p_sig = ag.sigmoid(z)
        np.testing.assert_allclose(asl_loss_from_logits(z, y, 1.0, 4.0).data,
                                   asl_loss(p_soft, y, 1.0, 4.0).data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(focal_loss_from_logits(z, soft).data,
                                   focal_multilabel_loss(p_sig, soft).data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(bce_from_logits(z, soft).data, binary_cross_entropy(p_sig, soft).data,
                                   rtol=1e-6, atol=1e-9)


def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros((1, 3)), [2]).data[0] == pytest.approx(math.log(3))


@pytest.mark.parametrize("which", ["asl", "focal", "survival_event", "survival_censored", "ce", "bce"])
def test_gradients_wrt_logits(which):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = ag.parameter(rng.uniform(-2, 2, (3, 4)))
        y = np.eye(4)[rng.integers(0, 4, 3)]
        soft = rng.uniform(0, 1, (3, 4))
        k = rng.integers(1, 5, 3)
        fns = {
            "asl": lambda t: asl_loss_from_logits(t[0], y, 1.0, 4.0),
            "focal": lambda t: focal_loss_from_logits(t[0], soft),
            "survival_event": lambda t: survival_nll(ag.sigmoid(t[0]), np.ones(3), k, 0.3),
            "survival_censored": lambda t: survival_nll(ag.sigmoid(t[0]), np.zeros(3), k, 0.3),
            "ce": lambda t: cross_entropy(t[0], y.argmax(1)),
            "bce": lambda t: bce_from_logits(t[0], soft),
        }
        assert check_gradients(lambda t: ag.sum(fns[which](t)), [z]) <= 1e-4


def test_survival_event_loss_falls_with_event_hazard():
    # d/dh_k [-log h_k - log(1 - h_k)] < 0 only for h_k < 1/2
    base = np.array([0.3, 0.2, 0.4, 0.1])
    for k in range(1, 5):
        sweep = np.linspace(0.001, 0.499, 100)
        vals = []
        for hk in sweep:
            h = base.copy()
            h[k - 1] = hk
            vals.append(survival_nll(h, 1, k).item())
        assert np.all(np.diff(vals) < 0)


def test_survival_event_loss_turns_above_half():
    h = np.array([0.6, 0.3])
    lo = survival_nll(h, 1, 1).item()
    h[0] = 0.7
    assert survival_nll(h, 1, 1).item() > lo


def test_survival_censored_loss_rises_with_prefix_hazard():
    base = np.array([0.3, 0.2, 0.4, 0.1])
    for kc in range(1, 5):
        for j in range(kc):
            vals = []
            for hj in np.linspace(0.001, 0.999, 100):
                h = base.copy()
                h[j] = hj
                vals.append(survival_nll(h, 0, kc, 0.3).item())
            assert np.all(np.diff(vals) > 0)
        # hazards after k_c do not matter
        h = base.copy()
        h[kc:] = 0.9
        assert survival_nll(h, 0, kc).item() == survival_nll(base, 0, kc).item()
