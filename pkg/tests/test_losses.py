import math

import numpy as np
import pytest

from codexdg.autodiff import Tensor, backward
from codexdg.exceptions import ContractError, DimensionError, ParameterError
from codexdg.losses import (
    LossConfig,
    accuracy_loss,
    consistency_loss,
    domain_loss,
    focal_loss,
    mixture_loss,
    per_sample_accuracy,
    stage1_loss,
    stage2_loss,
)
from codexdg.model import all_experts_forward, expert_probs, selector_forward
from codexdg.verify import _domain_batch, _randomize, routing_violations


def test_focal_spot_value():
    loss = focal_loss(Tensor(np.array([[0.8, 0.2]])), [0], gamma=2.0)
    assert loss.item() == pytest.approx(0.04 * -math.log(0.8), abs=1e-15)


def test_focal_gamma_zero_is_cross_entropy(rng):
    p = rng.dirichlet(np.ones(4), size=6)
    y = rng.integers(0, 4, size=6)
    ce = -np.mean(np.log(p[np.arange(6), y]))
    assert focal_loss(Tensor(p), y, gamma=0.0).item() == pytest.approx(ce, rel=1e-14)


def test_focal_is_zero_on_certain_predictions():
    assert focal_loss(Tensor(np.array([[0.0, 1.0, 0.0]])), [1]).item() == 0.0


def test_focal_bounded_by_cross_entropy(rng):
    p = rng.dirichlet(np.ones(3), size=20)
    y = rng.integers(0, 3, size=20)
    for gamma in (0.5, 1.0, 2.0, 5.0):
        per = focal_loss(Tensor(p), y, gamma, per_sample=True).data
        assert np.all(per <= -np.log(p[np.arange(20), y]) + 1e-15)


def test_focal_per_pixel_axis(rng):
    p = rng.dirichlet(np.ones(3), size=(2, 4, 4)).transpose(0, 3, 1, 2)  # [N, K, H, W]
    y = rng.integers(0, 3, size=(2, 4, 4))
    per = focal_loss(Tensor(p), y, axis=1, per_sample=True)
    assert per.shape == (2,)
    assert focal_loss(Tensor(p), y, axis=1).item() == pytest.approx(per.data.mean())
    with pytest.raises(DimensionError):
        focal_loss(Tensor(p), y[:, :2], axis=1)


def test_loss_config_validation():
    with pytest.raises(ParameterError):
        LossConfig(gamma=-1)
    with pytest.raises(ParameterError):
        LossConfig(tau=0)
    with pytest.raises(ParameterError):
        LossConfig(lambda_mix=-0.1)
    with pytest.raises(ParameterError):
        LossConfig(acc_loss_kind="L2")


def test_domain_loss_matches_hand_computation(cls_micro):
    bundle, data = cls_micro
    x, y = _domain_batch(data, bundle, 1)
    p = expert_probs(bundle, all_experts_forward(bundle, x)[1]).data
    py = p[np.arange(len(y)), y]
    expected = np.mean(-(1 - py) ** 2 * np.log(py))
    assert domain_loss(bundle, x, y, 1).item() == pytest.approx(expected, rel=1e-13)


def test_consistency_matches_hand_mixture(cls_micro):
    bundle, data = cls_micro
    _randomize(bundle, np.random.default_rng(3), 0.3)
    x, y = _domain_batch(data, bundle, 0)
    probs = [expert_probs(bundle, z).data for z in all_experts_forward(bundle, x)]
    A = bundle.affinity().data
    mixed = sum(A[0, e] * probs[e] for e in range(3))
    py = mixed[np.arange(len(y)), y]
    expected = np.mean(-(1 - py) ** 2 * np.log(py))
    assert consistency_loss(bundle, x, y, 0).item() == pytest.approx(expected, rel=1e-12)


def test_stage1_loss_reductions(seg_micro):
    bundle, data = seg_micro
    x, y = _domain_batch(data, bundle, 2)
    dom = domain_loss(bundle, x, y, 2).item()
    con = consistency_loss(bundle, x, y, 2).item()
    assert stage1_loss(bundle, x, y, 2, LossConfig(lambda_con=0)).item() == pytest.approx(dom, rel=1e-13)
    total, terms = stage1_loss(bundle, x, y, 2, LossConfig(lambda_con=0.5), return_terms=True)
    assert total.item() == pytest.approx(dom + 0.5 * con, rel=1e-12)
    assert terms == pytest.approx({"domain": dom, "consistency": con})


def test_wrong_domain_samples_rejected(cls_micro):
    bundle, data = cls_micro
    idx = data.indices_by_domain()[bundle.domain_ids[0]]
    with pytest.raises(ContractError):
        domain_loss(bundle, data.inputs[idx], data.labels[idx], 1, sample_domains=data.domain_ids[idx])
    with pytest.raises(IndexError):
        domain_loss(bundle, data.inputs[idx], data.labels[idx], 5)


def test_identical_experts_give_no_affinity_gradient(cls_micro):
    bundle, data = cls_micro
    x, y = _domain_batch(data, bundle, 0)
    for h in bundle.heads[1:]:
        for t, src in zip(h.tensors, bundle.heads[0].tensors):
            t.data = src.data.copy()
    bundle.zero_grad()
    backward(consistency_loss(bundle, x, y, 0))
    assert np.allclose(bundle.affinity_params.tensors[0].grad, 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_routing_is_exact(seed):
    from codexdg.verify import micro_classification, micro_segmentation

    for maker in (micro_segmentation, micro_classification):
        bundle, data = maker(D=3, seed=seed)
        _randomize(bundle, np.random.default_rng(seed), 0.3)
        assert routing_violations(bundle, data, seed % 3) == []


def test_per_sample_accuracy_modes():
    probs = np.zeros((1, 2, 2, 1, 2))  # [N, T, K, H, W]
    probs[0, 0, 0] = 1.0
    probs[0, 1, 1] = 1.0
    labels = np.zeros((1, 2, 1, 2), dtype=int)
    np.testing.assert_array_equal(per_sample_accuracy(probs, labels, "segmentation"), [0.5])
    np.testing.assert_array_equal(per_sample_accuracy(probs, labels, "segmentation", per_timestep=True),
                                  [[1.0, 0.0]])


@pytest.mark.parametrize("kind", ["L1", "MSE"])
def test_stage2_reductions(cls_micro, kind):
    bundle, data = cls_micro
    _randomize(bundle, np.random.default_rng(0), 0.3)
    x, y = data.inputs, data.labels
    acc = accuracy_loss(bundle, x, y, LossConfig(acc_loss_kind=kind)).item()
    mixl = mixture_loss(bundle, x, y).item()
    cfg = LossConfig(acc_loss_kind=kind, lambda_acc=0.3, lambda_mix=2.0)
    assert stage2_loss(bundle, x, y, cfg).item() == pytest.approx(0.3 * acc + 2.0 * mixl, rel=1e-12)
    assert stage2_loss(bundle, x, y, LossConfig(lambda_acc=0, lambda_mix=0)).item() == 0.0


def test_accuracy_loss_hand_value(cls_micro):
    bundle, data = cls_micro
    x, y = data.inputs, data.labels
    scores = selector_forward(bundle, x).data
    acc = np.stack([(expert_probs(bundle, z).data.argmax(1) == y).astype(float)
                    for z in all_experts_forward(bundle, x)], axis=1)
    expected = np.mean(np.abs(scores - acc).sum(axis=1))
    assert accuracy_loss(bundle, x, y).item() == pytest.approx(expected, rel=1e-13)
