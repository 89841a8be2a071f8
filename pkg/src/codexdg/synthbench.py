"""Synthetic multi-domain benchmark.

Domains sit on the unit circle. A domain's angle rotates the appearance of
every sample (the first two feature or colour channels) while the label
semantics stay fixed, so angular distance is a ground-truth notion of how
similar two domains are.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import container
from .exceptions import DataError, ParameterError

DATASET_MAGIC = b"CDXD"

# Stream tags mixed into the seed so independent draws never share a stream.
_TAG_JITTER = 0x4A17
_TAG_PROTOTYPES = 0x9E07
_TAG_COLORS = 0xC010
_TAG_SPLIT = 0x5B11
_TAG_SAMPLES = 0x5A3B


def _rng(seed: int, *tags: int) -> np.random.Generator:
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


@dataclass(frozen=True)
class DomainSpec:
    id: int
    angle: float

    @property
    def coords(self) -> Tuple[float, float]:
        return (math.cos(self.angle), math.sin(self.angle))


@dataclass
class DomainSample:
    input: np.ndarray
    label: Union[int, np.ndarray]
    domain_id: int
    coords: Tuple[float, float]


@dataclass(frozen=True)
class SplitSpec:
    train_domains: Tuple[int, ...]
    val_domains: Tuple[int, ...]
    test_domains: Tuple[int, ...]
    samples_per_domain: int
    seed: int

    def __post_init__(self):
        tr, va, te = set(self.train_domains), set(self.val_domains), set(self.test_domains)
        if tr & va or tr & te or va & te:
            raise ParameterError("split domain sets must be pairwise disjoint")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            train_domains=tuple(int(x) for x in d["train_domains"]),
            val_domains=tuple(int(x) for x in d["val_domains"]),
            test_domains=tuple(int(x) for x in d["test_domains"]),
            samples_per_domain=int(d["samples_per_domain"]),
            seed=int(d["seed"]),
        )


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rotate_leading_pair(vectors: np.ndarray, theta: float, axis: int) -> np.ndarray:
    """Rotate entries 0 and 1 along ``axis`` by ``theta``; other entries untouched."""
    out = np.array(vectors, dtype=np.float64, copy=True)
    moved = np.moveaxis(out, axis, 0)
    c, s = math.cos(theta), math.sin(theta)
    x, y = moved[0].copy(), moved[1].copy()
    moved[0] = c * x - s * y
    moved[1] = s * x + c * y
    return out


# ----------------------------------------------------------------------------
# domains


def generate_domains(D: int, seed: int = 0, jitter: bool = True) -> List[DomainSpec]:
    """``D`` domains at angles 2*pi*d/D, optionally jittered by U(-pi/4D, pi/4D)."""
    if D < 2:
        raise ParameterError(f"need at least 2 domains, got D={D}")
    base = 2.0 * math.pi * np.arange(D) / D
    if jitter:
        half = math.pi / (4 * D)
        base = base + _rng(seed, _TAG_JITTER).uniform(-half, half, size=D)
    angles = np.mod(base, 2.0 * math.pi)
    return [DomainSpec(id=d, angle=float(a)) for d, a in enumerate(angles)]


# ----------------------------------------------------------------------------
# classification


def class_prototypes(K: int, F: int, seed: int) -> np.ndarray:
    """K unit vectors in R^F, shared by every domain of a dataset."""
    protos = _rng(seed, _TAG_PROTOTYPES).standard_normal((K, F))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def sample_classification(
    dom: DomainSpec, n: int, K: int, F: int, noise_sigma: float, seed: int
) -> List[DomainSample]:
    if F < 2 or K < 2:
        raise ParameterError(f"classification needs F >= 2 and K >= 2, got F={F}, K={K}")
    if n < 0 or noise_sigma < 0:
        raise ParameterError("n and noise_sigma must be non-negative")
    protos = _rotate_leading_pair(class_prototypes(K, F, seed), dom.angle, axis=1)
    rng = _rng(seed, _TAG_SAMPLES, dom.id)
    samples = []
    for i in range(n):
        k = i % K
        x = protos[k].copy()
        if noise_sigma > 0:
            x += noise_sigma * rng.standard_normal(F)
        samples.append(DomainSample(input=x, label=k, domain_id=dom.id, coords=dom.coords))
    return samples


# ----------------------------------------------------------------------------
# segmentation


# Channels beyond the rotated pair are the same in every domain. Damping them
# keeps most class evidence domain-dependent, so experts specialise.
INVARIANT_SCALE = 0.35
MIN_COLOR_SEPARATION = 0.9
_COLOR_DRAWS = 200


def class_colors(K: int, C: int, seed: int) -> np.ndarray:
    """K unit colour vectors in R^C, pairwise at least ``MIN_COLOR_SEPARATION`` apart.

    Draws are repeated until the separation holds; if none of the draws
    manages it, the best-separated one is kept.
    """
    rng = _rng(seed, _TAG_COLORS)
    best, best_sep = None, -1.0
    for _ in range(_COLOR_DRAWS):
        colors = rng.standard_normal((K, C))
        colors[:, 2:] *= INVARIANT_SCALE
        colors /= np.linalg.norm(colors, axis=1, keepdims=True)
        gaps = np.linalg.norm(colors[:, None] - colors[None], axis=2)[np.triu_indices(K, 1)]
        if gaps.min() > best_sep:
            best, best_sep = colors, gaps.min()
        if best_sep >= MIN_COLOR_SEPARATION:
            break
    return best


def smooth_label_field(rng: np.random.Generator, H: int, W: int, K: int, n_waves: int = 4) -> np.ndarray:
    """Threshold a sum of low-frequency sinusoids into K equal-mass bands."""
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    field_ = np.zeros((H, W))
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 1.5)
        direction = rng.uniform(0.0, 2.0 * math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        field_ += amp * np.sin(2.0 * math.pi * freq * (math.cos(direction) * xx + math.sin(direction) * yy) + phase)
    cuts = np.quantile(field_, np.arange(1, K) / K)
    return np.searchsorted(cuts, field_, side="right").astype(np.int64)


def sample_segmentation(
    dom: DomainSpec, n: int, T: int, C: int, H: int, W: int, K: int, noise_sigma: float, seed: int
) -> List[DomainSample]:
    if C < 2 or H < 8 or W < 8 or T < 1 or K < 2:
        raise ParameterError(f"segmentation needs C>=2, H,W>=8, T>=1, K>=2; got C={C}, H={H}, W={W}, T={T}, K={K}")
    if n < 0 or noise_sigma < 0:
        raise ParameterError("n and noise_sigma must be non-negative")
    colors = _rotate_leading_pair(class_colors(K, C, seed), dom.angle, axis=1)
    rng = _rng(seed, _TAG_SAMPLES, dom.id)
    samples = []
    for _ in range(n):
        labels = smooth_label_field(rng, H, W, K)
        frame = colors[labels].transpose(2, 0, 1)  # [C, H, W]
        x = np.broadcast_to(frame, (T, C, H, W)).copy()
        if noise_sigma > 0:
            x += noise_sigma * rng.standard_normal((T, C, H, W))
        y = np.broadcast_to(labels, (T, H, W)).copy()
        samples.append(DomainSample(input=x, label=y, domain_id=dom.id, coords=dom.coords))
    return samples


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Stacked samples of one split."""

    task: str
    K: int
    inputs: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    coords: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        n = len(self.inputs)
        if not (len(self.labels) == len(self.domain_ids) == len(self.coords) == n):
            raise DataError("inputs, labels, domain ids and coords must have equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise DataError(f"labels must lie in [0, {self.K})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def domains(self) -> List[int]:
        return sorted(set(self.domain_ids.tolist()))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.task, self.K, self.inputs[index], self.labels[index],
                       self.domain_ids[index], self.coords[index], dict(self.meta))

    def indices_by_domain(self) -> Dict[int, np.ndarray]:
        return {d: np.flatnonzero(self.domain_ids == d) for d in self.domains}

    def domain_coords(self) -> Dict[int, Tuple[float, float]]:
        out = {}
        for d, idx in self.indices_by_domain().items():
            out[d] = tuple(float(v) for v in self.coords[idx[0]])
        return out

    def samples(self) -> List[DomainSample]:
        return [
            DomainSample(self.inputs[i], int(self.labels[i]) if self.task == "classification" else self.labels[i],
                         int(self.domain_ids[i]), tuple(self.coords[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_samples(cls, samples: Sequence[DomainSample], task: str, K: int, meta=None) -> "Dataset":
        if not samples:
            raise DataError("cannot build a dataset from zero samples")
        return cls(
            task=task,
            K=K,
            inputs=np.stack([s.input for s in samples]),
            labels=np.stack([np.asarray(s.label) for s in samples]),
            domain_ids=np.array([s.domain_id for s in samples]),
            coords=np.array([s.coords for s in samples]),
            meta=dict(meta or {}),
        )

    # -- container IO --------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {"kind": "dataset", "task": self.task, "K": self.K, **self.meta}
        arrays = [
            ("inputs", self.inputs),
            ("labels", self.labels.astype(np.float64)),
            ("domain_ids", self.domain_ids.astype(np.float64)),
            ("coords", self.coords),
        ]
        return container.encode(DATASET_MAGIC, header, arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        header, arrays = container.read(path, DATASET_MAGIC, DataError)
        try:
            meta = {k: v for k, v in header.items() if k not in ("kind", "task", "K", "arrays")}
            return cls(
                task=header["task"],
                K=int(header["K"]),
                inputs=arrays["inputs"],
                labels=np.rint(arrays["labels"]).astype(np.int64),
                domain_ids=np.rint(arrays["domain_ids"]).astype(np.int64),
                coords=arrays["coords"],
                meta=meta,
            )
        except KeyError as exc:
            raise DataError(f"dataset file {path} lacks field {exc}") from None


Sampler = Callable[[DomainSpec], List[DomainSample]]


def split_counts(D: int, train_frac: float, val_frac: float) -> Tuple[int, int, int]:
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ParameterError(f"split fractions must lie in (0,1) and sum below 1, got ({train_frac}, {val_frac})")
    n_train = int(round(train_frac * D))
    n_val = int(round(val_frac * D))
    n_test = D - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ParameterError(f"D={D} with fractions ({train_frac}, {val_frac}) leaves a split without domains")
    return n_train, n_val, n_test


def make_split(
    domains: Sequence[DomainSpec],
    train_frac: float,
    val_frac: float,
    samples_per_domain: int,
    seed: int,
    sampler: Optional[Sampler] = None,
    task: str = "segmentation",
    K: int = 2,
    meta: Optional[dict] = None,
):
    """Partition domains into disjoint train/val/test sets by a seeded shuffle.

    Returns the :class:`SplitSpec` and, when ``sampler`` is given, a dict
    mapping ``"train"``, ``"val"`` and ``"test"`` to materialized datasets.
    """
    n_train, n_val, _ = split_counts(len(domains), train_frac, val_frac)
    ids = np.array([d.id for d in domains])
    perm = ids[_rng(seed, _TAG_SPLIT).permutation(len(ids))]
    split = SplitSpec(
        train_domains=tuple(sorted(int(i) for i in perm[:n_train])),
        val_domains=tuple(sorted(int(i) for i in perm[n_train:n_train + n_val])),
        test_domains=tuple(sorted(int(i) for i in perm[n_train + n_val:])),
        samples_per_domain=int(samples_per_domain),
        seed=int(seed),
    )
    if sampler is None:
        return split, {}
    by_id = {d.id: d for d in domains}
    datasets = {}
    for name, members in (("train", split.train_domains), ("val", split.val_domains), ("test", split.test_domains)):
        samples: List[DomainSample] = []
        for d in members:
            samples.extend(sampler(by_id[d]))
        header = {"split": split.to_dict(), "split_name": name, "seed": int(seed), **(meta or {})}
        datasets[name] = Dataset.from_samples(samples, task=task, K=K, meta=header)
    return split, datasets


@dataclass(frozen=True)
class BenchmarkConfig:
    """Everything needed to regenerate a benchmark bit-for-bit."""

    task: str = "segmentation"
    D: int = 12
    K: int = 4
    T: int = 3
    C: int = 3
    H: int = 16
    W: int = 16
    F: int = 4
    noise_sigma: float = 0.1
    train_frac: float = 2.0 / 3.0
    val_frac: float = 1.0 / 6.0
    samples_per_domain: int = 16
    jitter: bool = True
    seed: int = 0


@dataclass
class Benchmark:
    config: BenchmarkConfig
    domains: List[DomainSpec]
    split: SplitSpec
    train: Dataset
    val: Dataset
    test: Dataset

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "domains": [{"id": d.id, "angle": d.angle, "coords": list(d.coords)} for d in self.domains],
            "split": self.split.to_dict(),
        }


def build_benchmark(cfg: BenchmarkConfig) -> Benchmark:
    if cfg.task not in ("classification", "segmentation"):
        raise ParameterError(f"unknown task {cfg.task!r}")
    domains = generate_domains(cfg.D, cfg.seed, jitter=cfg.jitter)
    n = cfg.samples_per_domain
    if cfg.task == "classification":
        def sampler(dom):
            return sample_classification(dom, n, cfg.K, cfg.F, cfg.noise_sigma, cfg.seed)
        shape = {"F": cfg.F}
    else:
        def sampler(dom):
            return sample_segmentation(dom, n, cfg.T, cfg.C, cfg.H, cfg.W, cfg.K, cfg.noise_sigma, cfg.seed)
        shape = {"T": cfg.T, "C": cfg.C, "H": cfg.H, "W": cfg.W}
    meta = {"D": cfg.D, **shape}
    split, data = make_split(domains, cfg.train_frac, cfg.val_frac, n, cfg.seed, sampler=sampler,
                             task=cfg.task, K=cfg.K, meta=meta)
    return Benchmark(cfg, domains, split, data["train"], data["val"], data["test"])
