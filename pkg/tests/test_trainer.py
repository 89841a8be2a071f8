import numpy as np
import pytest

from codexdg.exceptions import CheckpointError, DataError, ParameterError
from codexdg.losses import LossConfig
from codexdg.model import BackboneConfig, bundle_to_bytes, init_bundle, init_selector
from codexdg.optim import OptimConfig
from codexdg.synthbench import Dataset, generate_domains, sample_classification
from codexdg.trainer import TrainLog, domain_batches, train_baseline, train_stage1, train_stage2
from codexdg.evaluation import predict_all


def _cls_data(D=3, n=8, sigma=0.05, seed=0):
    samples = []
    for dom in generate_domains(D, seed):
        samples.extend(sample_classification(dom, n, 3, 4, sigma, seed))
    return Dataset.from_samples(samples, task="classification", K=3)


CFG = BackboneConfig(task="classification", in_channels=4, n_classes=3, widths=(8,))


def _train_acc(bundle, data):
    preds = predict_all(bundle, data, 1.0)
    return float(np.mean(preds.mixture == data.labels)) if preds.mixture is not None else None


def test_zero_epochs_keep_initialisation():
    data = _cls_data()
    opt = OptimConfig(epochs_stage1=0, epochs_stage2=0, seed=3)
    s1 = train_stage1(data, CFG, opt)
    fresh = init_bundle(CFG, 3, seed=3, coords=list(data.domain_coords().values()), domain_ids=data.domains)
    fresh.stage, fresh.history = s1.stage, s1.history
    assert bundle_to_bytes(s1) == bundle_to_bytes(fresh)
    s2 = train_stage2(s1, data, opt)
    ref = s2.copy()
    init_selector(ref, 3)
    for a, b in zip(s2.selector.tensors, ref.selector.tensors):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_is_deterministic():
    data = _cls_data()
    opt = OptimConfig(lr=1e-2, epochs_stage1=3, epochs_stage2=3, seed=1)
    runs = [train_stage2(train_stage1(data, CFG, opt), data, opt) for _ in range(2)]
    assert bundle_to_bytes(runs[0]) == bundle_to_bytes(runs[1])


def test_stage2_leaves_stage1_and_frozen_groups_alone():
    data = _cls_data()
    opt = OptimConfig(lr=1e-2, epochs_stage1=2, epochs_stage2=3)
    s1 = train_stage1(data, CFG, opt)
    before = bundle_to_bytes(s1)
    s2 = train_stage2(s1, data, opt)
    assert bundle_to_bytes(s1) == before
    for g1, g2 in zip([s1.backbone, *s1.heads, s1.affinity_params], [s2.backbone, *s2.heads, s2.affinity_params]):
        for a, b in zip(g1.tensors, g2.tensors):
            np.testing.assert_array_equal(a.data, b.data)
    assert s2.stage == "stage2" and "stage1" in s2.history


def test_stage_mismatch_and_bad_pooling():
    data = _cls_data()
    opt = OptimConfig(epochs_stage1=1, epochs_stage2=1)
    s1 = train_stage1(data, CFG, opt)
    s2 = train_stage2(s1, data, opt)
    with pytest.raises(CheckpointError):
        train_stage2(s2, data, opt)
    with pytest.raises(ParameterError):
        train_stage2(s1, data, opt, pooling="per_timestep")
    with pytest.raises(ParameterError):
        train_stage2(s1, data, opt, pooling="spatial")


def test_zero_consistency_weight_leaves_affinity():
    data = _cls_data()
    s1 = train_stage1(data, CFG, OptimConfig(lr=1e-2, epochs_stage1=2), loss_cfg=LossConfig(lambda_con=0))
    assert not np.any(s1.affinity_params.tensors[0].data)


def test_zero_stage2_weights_keep_selector():
    data = _cls_data()
    opt = OptimConfig(lr=1e-2, epochs_stage1=1, epochs_stage2=2, seed=4)
    s1 = train_stage1(data, CFG, opt)
    s2 = train_stage2(s1, data, opt, LossConfig(lambda_acc=0, lambda_mix=0))
    ref = s2.copy()
    init_selector(ref, 4)
    for a, b in zip(s2.selector.tensors, ref.selector.tensors):
        np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("seed", range(3))
def test_separable_problem_is_learned(seed):
    data = _cls_data(sigma=0.0, n=6, seed=seed)
    opt = OptimConfig(lr=1e-2, epochs_stage1=200, epochs_stage2=20, batch_size=6, seed=seed)
    s2 = train_stage2(train_stage1(data, CFG, opt), data, opt)
    assert _train_acc(s2, data) == 1.0


def test_batches_are_homogeneous_and_round_robin():
    data = _cls_data(D=3, n=10)
    doms = data.domains
    order = list(domain_batches(data, doms, 4, np.random.default_rng(0)))
    heads = [h for h, _ in order]
    assert heads == [0, 1, 2] * 3
    seen = np.concatenate([idx for _, idx in order])
    assert sorted(seen.tolist()) == list(range(len(data)))
    for head, idx in order:
        assert set(data.domain_ids[idx].tolist()) == {doms[head]}


def test_empty_domain_raises():
    data = _cls_data(D=3)
    with pytest.raises(DataError):
        list(domain_batches(data, [0, 1, 7], 4, np.random.default_rng(0)))
    with pytest.raises(DataError):
        train_stage1(data.subset(data.indices_by_domain()[0]), CFG, OptimConfig(epochs_stage1=1))


def test_log_records_every_epoch():
    data = _cls_data()
    log = TrainLog()
    opt = OptimConfig(lr=1e-2, epochs_stage1=3, epochs_stage2=2)
    s1 = train_stage1(data, CFG, opt, log=log)
    train_stage2(s1, data, opt, log=log)
    assert [e["epoch"] for e in log.epochs["stage1"]] == [0, 1, 2]
    assert len(log.epochs["stage2"]) == 2
    assert set(log.epochs["stage1"][0]["terms"]) == {"domain", "consistency"}
    assert s1.history["stage1"]["loss"] == [e["loss"] for e in log.epochs["stage1"]]


def test_baseline_fits_noiseless_data():
    data = _cls_data(sigma=0.0, n=6)
    base = train_baseline(data, CFG, OptimConfig(lr=1e-2, epochs_stage1=150, batch_size=6))
    assert base.stage == "baseline" and base.D == 1
    preds = predict_all(base, data, 1.0)
    assert np.mean(preds.heads[0] == data.labels) > 0.9
