import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from codexdg.autodiff import Tensor
from codexdg.exceptions import CheckpointError, DimensionError, ModeError, ParameterError
from codexdg.model import (
    BackboneConfig,
    affinity_d3g_style,
    affinity_handcrafted,
    affinity_learned,
    all_experts_forward,
    angular_distances,
    bundle_from_bytes,
    bundle_to_bytes,
    expert_forward,
    init_bundle,
    init_d3g_mlp,
    load_bundle,
    mixture_predict,
    pooled_features,
    backbone_forward,
    save_bundle,
    selector_forward,
)
from codexdg.synthbench import generate_domains
from codexdg.verify import _affinity_ok


def _coords(D, seed=0):
    return np.array([d.coords for d in generate_domains(D, seed)])


def test_angular_distance_examples():
    c = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    delta = angular_distances(c)
    np.testing.assert_allclose(delta, [[0, np.pi / 2, np.pi], [np.pi / 2, 0, np.pi / 2], [np.pi, np.pi / 2, 0]],
                               atol=1e-15)


def test_angular_distance_rejects_origin():
    with pytest.raises(ParameterError):
        angular_distances(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_learned_affinity_starts_uniform():
    A = affinity_learned(Tensor(np.zeros((4, 4)))).data
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_allclose(A[off], 1 / 3, atol=1e-15)
    assert np.all(np.diag(A) == 0)


@given(st.integers(3, 9), st.integers(0, 10_000))
def test_affinity_invariants_all_variants(D, seed):
    rng = np.random.default_rng(seed)
    coords = _coords(D, seed)
    mlp = init_d3g_mlp(rng)
    for A in (affinity_learned(Tensor(2 * rng.standard_normal((D, D)))).data,
              affinity_handcrafted(coords, temperature=0.5).data,
              affinity_d3g_style(coords, mlp).data):
        assert _affinity_ok(A)


def test_two_domains_give_permutation():
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(affinity_learned(Tensor(np.array([[3.0, -1.0], [7.0, 2.0]]))).data, perm)
    np.testing.assert_array_equal(affinity_handcrafted(_coords(2)).data, perm)


def test_handcrafted_prefers_nearby_domains():
    A = affinity_handcrafted(_coords(6, 3)).data
    delta = angular_distances(_coords(6, 3))
    for d in range(6):
        others = [e for e in range(6) if e != d]
        order = sorted(others, key=lambda e: delta[d, e])
        assert A[d, order[0]] >= A[d, order[-1]]


def test_forward_shapes_segmentation(seg_micro):
    bundle, data = seg_micro
    logits = all_experts_forward(bundle, data.inputs)
    assert len(logits) == 3
    assert logits[0].shape == (6, 2, 3, 8, 8)
    assert selector_forward(bundle, data.inputs).shape == (6, 3)
    assert selector_forward(bundle, data.inputs, "per_timestep").shape == (6, 2, 3)


def test_forward_shapes_classification(cls_micro):
    bundle, data = cls_micro
    assert expert_forward(bundle, data.inputs, 2).shape == (12, 3)
    with pytest.raises(ModeError):
        pooled_features(bundle, backbone_forward(bundle, data.inputs), "per_timestep")


def test_head_sharing_keeps_one_backbone_call(seg_micro):
    bundle, data = seg_micro
    before = bundle.backbone_calls
    all_experts_forward(bundle, data.inputs)
    assert bundle.backbone_calls == before + 1


def test_bad_head_index_and_input_shape(seg_micro):
    bundle, data = seg_micro
    with pytest.raises(IndexError):
        expert_forward(bundle, data.inputs, 3)
    with pytest.raises(DimensionError):
        backbone_forward(bundle, data.inputs[:, :, :1])


@pytest.mark.parametrize("space", ["prob", "logit"])
def test_mixture_is_a_distribution(space):
    cfg = BackboneConfig(task="classification", in_channels=4, n_classes=3, widths=(5,), mix_space=space)
    bundle = init_bundle(cfg, 4, seed=1)
    probs, weights = mixture_predict(bundle, np.random.default_rng(0).standard_normal((7, 4)), tau=0.5)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)


def test_mixture_rejects_bad_temperature(cls_micro):
    bundle, data = cls_micro
    with pytest.raises(ParameterError):
        mixture_predict(bundle, data.inputs, tau=0.0)


def test_one_domain_has_no_affinity():
    bundle = init_bundle(BackboneConfig(task="classification", in_channels=2, n_classes=2, widths=(3,)), 1)
    assert bundle.variant == "none"
    with pytest.raises(ParameterError):
        bundle.affinity()


def test_config_validation():
    with pytest.raises(ParameterError):
        BackboneConfig(task="detection")
    with pytest.raises(ParameterError):
        BackboneConfig(feature_taps=(9,))
    cfg = BackboneConfig()
    assert cfg.feature_taps == (0, 2, 4) and cfg.selector_in == 8 + 16 + 8
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_initialisation_is_seeded():
    cfg = BackboneConfig(task="classification", in_channels=3, n_classes=2, widths=(4,))
    a, b, c = init_bundle(cfg, 3, seed=5), init_bundle(cfg, 3, seed=5), init_bundle(cfg, 3, seed=6)
    assert bundle_to_bytes(a) == bundle_to_bytes(b) != bundle_to_bytes(c)
    assert all(not np.any(t.data) for t in a.parameters() if t.name.endswith(".b"))


@pytest.mark.parametrize("variant", ["learned", "handcrafted", "d3g_style"])
def test_checkpoint_roundtrip(tmp_path, variant):
    cfg = BackboneConfig(task="segmentation", in_channels=2, n_classes=3, widths=(2, 3))
    bundle = init_bundle(cfg, 3, seed=2, variant=variant, coords=_coords(3), domain_ids=[4, 7, 9])
    bundle.history = {"stage1": {"loss": [1.0, 0.5]}}
    path = tmp_path / "b.cdxc"
    save_bundle(bundle, path)
    back = load_bundle(path)
    assert back.domain_ids == [4, 7, 9] and back.variant == variant
    assert bundle_to_bytes(back) == bundle_to_bytes(bundle)
    np.testing.assert_array_equal(back.affinity().data, bundle.affinity().data)


def test_malformed_checkpoints(tmp_path, cls_micro):
    bundle, _ = cls_micro
    raw = bundle_to_bytes(bundle)
    for bad in (raw[:20], b"NOPE" + raw[4:], raw + b"x"):
        with pytest.raises(CheckpointError):
            bundle_from_bytes(bad)
    with pytest.raises(CheckpointError):
        load_bundle(tmp_path / "missing.cdxc")
