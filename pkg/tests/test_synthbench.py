import math

import numpy as np
import pytest

from codexdg.exceptions import DataError, ParameterError
from codexdg.synthbench import (
    BenchmarkConfig,
    Dataset,
    DomainSpec,
    SplitSpec,
    build_benchmark,
    class_prototypes,
    generate_domains,
    make_split,
    sample_classification,
    sample_segmentation,
    split_counts,
)


def test_uniform_angles_without_jitter():
    angles = [d.angle for d in generate_domains(4, seed=0, jitter=False)]
    np.testing.assert_allclose(angles, [0, math.pi / 2, math.pi, 3 * math.pi / 2])


def test_jitter_is_bounded_and_seeded():
    D = 12
    a = generate_domains(D, seed=3)
    b = generate_domains(D, seed=3)
    assert a == b
    for d in a:
        gap = (d.angle - 2 * math.pi * d.id / D + math.pi) % (2 * math.pi) - math.pi
        assert abs(gap) < math.pi / (4 * D)
        assert 0 <= d.angle < 2 * math.pi


def test_too_few_domains():
    with pytest.raises(ParameterError):
        generate_domains(1)


def test_coords_on_unit_circle():
    for d in generate_domains(7, seed=1):
        assert math.hypot(*d.coords) == pytest.approx(1.0, abs=1e-15)


def test_identity_rotation_without_noise_gives_prototypes():
    dom = DomainSpec(0, 0.0)
    samples = sample_classification(dom, 6, K=3, F=5, noise_sigma=0.0, seed=2)
    protos = class_prototypes(3, 5, 2)
    for s in samples:
        np.testing.assert_array_equal(s.input, protos[s.label])
    assert [s.label for s in samples] == [0, 1, 2, 0, 1, 2]


def test_half_turn_negates_in_two_dimensions():
    protos = class_prototypes(3, 2, 5)
    samples = sample_classification(DomainSpec(1, math.pi), 3, K=3, F=2, noise_sigma=0.0, seed=5)
    for s in samples:
        np.testing.assert_allclose(s.input, -protos[s.label], atol=1e-15)


def test_rotation_is_lipschitz():
    a = sample_classification(DomainSpec(0, 1.0), 4, K=4, F=6, noise_sigma=0.0, seed=0)
    b = sample_classification(DomainSpec(1, 1.001), 4, K=4, F=6, noise_sigma=0.0, seed=0)
    for sa, sb in zip(a, b):
        assert np.linalg.norm(sa.input - sb.input) < 1e-2


def test_segmentation_shapes_and_static_labels():
    samples = sample_segmentation(DomainSpec(2, 0.3), 3, T=3, C=3, H=8, W=8, K=4, noise_sigma=0.1, seed=0)
    for s in samples:
        assert s.input.shape == (3, 3, 8, 8) and s.label.shape == (3, 8, 8)
        assert np.all(s.label == s.label[0])
        assert not np.allclose(s.input[0], s.input[1])  # noise is drawn per timestep


def test_segmentation_without_noise_renders_rotated_colors():
    s = sample_segmentation(DomainSpec(0, 0.0), 1, T=2, C=3, H=8, W=8, K=3, noise_sigma=0.0, seed=0)[0]
    np.testing.assert_array_equal(s.input[0], s.input[1])
    assert len(np.unique(s.label)) == 3


def test_segmentation_parameter_errors():
    with pytest.raises(ParameterError):
        sample_segmentation(DomainSpec(0, 0.0), 1, T=1, C=1, H=8, W=8, K=2, noise_sigma=0.1, seed=0)


def test_split_counts():
    assert split_counts(12, 2 / 3, 1 / 6) == (8, 2, 2)
    with pytest.raises(ParameterError):
        split_counts(3, 0.9, 0.05)


def test_split_is_disjoint_and_covers():
    doms = generate_domains(12, seed=4)
    split, _ = make_split(doms, 2 / 3, 1 / 6, 4, seed=4)
    everything = split.train_domains + split.val_domains + split.test_domains
    assert sorted(everything) == list(range(12))
    assert len(set(everything)) == 12


def test_split_spec_rejects_overlap():
    with pytest.raises(ParameterError):
        SplitSpec((0, 1), (1,), (2,), 4, 0)


def test_split_spec_roundtrip():
    s = SplitSpec((0, 3), (1,), (2,), 4, 9)
    assert SplitSpec.from_dict(s.to_dict()) == s


def test_default_benchmark_layout():
    bench = build_benchmark(BenchmarkConfig(samples_per_domain=2))
    assert len(bench.split.train_domains) == 8
    assert len(bench.split.test_domains) == 2
    assert bench.train.inputs.shape == (16, 3, 3, 16, 16)
    assert set(bench.test.domains) == set(bench.split.test_domains)


def test_benchmark_is_deterministic():
    cfg = BenchmarkConfig(D=6, samples_per_domain=2, H=8, W=8, train_frac=0.5)
    a, b = build_benchmark(cfg), build_benchmark(cfg)
    assert a.train.to_bytes() == b.train.to_bytes()
    assert build_benchmark(BenchmarkConfig(D=6, samples_per_domain=2, H=8, W=8, train_frac=0.5, seed=1)) \
        .train.to_bytes() != a.train.to_bytes()


def test_dataset_roundtrip(tmp_path):
    bench = build_benchmark(BenchmarkConfig(task="classification", D=6, samples_per_domain=3, train_frac=0.5))
    path = tmp_path / "train.cdxd"
    bench.train.save(path)
    back = Dataset.load(path)
    np.testing.assert_array_equal(back.inputs, bench.train.inputs)
    np.testing.assert_array_equal(back.labels, bench.train.labels)
    assert back.meta["split_name"] == "train"
    assert back.to_bytes() == bench.train.to_bytes()


@pytest.mark.parametrize("mutate", [lambda b: b[:-3], lambda b: b"XXXX" + b[4:], lambda b: b + b"\0"])
def test_corrupt_dataset_files(tmp_path, mutate):
    bench = build_benchmark(BenchmarkConfig(task="classification", D=6, samples_per_domain=2, train_frac=0.5))
    path = tmp_path / "bad.cdxd"
    path.write_bytes(mutate(bench.train.to_bytes()))
    with pytest.raises(DataError):
        Dataset.load(path)


def test_dataset_rejects_inconsistent_lengths():
    with pytest.raises(DataError):
        Dataset("classification", 2, np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros((3, 2)))
