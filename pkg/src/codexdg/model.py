"""Shared backbone, per-domain expert heads, affinity matrix and selector head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from .autodiff import ParamGroup, Tensor
from .autodiff import ops
from .exceptions import CheckpointError, DimensionError, ModeError, ParameterError

CHECKPOINT_MAGIC = b"CDXC"
AFFINITY_VARIANTS = ("learned", "handcrafted", "d3g_style")
POOLING_MODES = ("spatiotemporal", "per_timestep")
D3G_HIDDEN = 8


@dataclass(frozen=True)
class BackboneConfig:
    """Toy backbone layout.

    Segmentation: ``len(widths)`` encoder levels (each after the first halves
    the resolution) and a mirrored decoder with skip connections, applied to
    every timestep with shared weights. Blocks are numbered encoder first,
    then decoder, so the last block is the full-resolution decoder output.

    Classification: one dense+relu layer per entry of ``widths``.
    """

    task: str = "segmentation"
    in_channels: int = 3
    n_classes: int = 4
    widths: Tuple[int, ...] = (8, 16, 16)
    feature_taps: Optional[Tuple[int, ...]] = None
    selector_hidden: int = 0
    mix_space: str = "prob"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.task not in ("classification", "segmentation"):
            raise ParameterError(f"unknown task {self.task!r}")
        if not self.widths or min(self.widths) < 1:
            raise ParameterError("widths must be a non-empty list of positive integers")
        if self.mix_space not in ("prob", "logit"):
            raise ParameterError(f"mix_space must be 'prob' or 'logit', got {self.mix_space!r}")
        if self.feature_taps is None:
            object.__setattr__(self, "feature_taps", self.default_taps())
        taps = tuple(int(t) for t in self.feature_taps)
        object.__setattr__(self, "feature_taps", taps)
        if not taps or min(taps) < 0 or max(taps) >= self.blocks:
            raise ParameterError(f"feature_taps {taps} must be non-empty and within [0, {self.blocks})")

    @property
    def blocks(self) -> int:
        n = len(self.widths)
        return 2 * n - 1 if self.task == "segmentation" else n

    def default_taps(self) -> Tuple[int, ...]:
        n = len(self.widths)
        if self.task == "segmentation":
            return tuple(sorted({0, n - 1, 2 * n - 2}))
        return tuple(sorted({0, n - 1}))

    def block_widths(self) -> List[int]:
        w = list(self.widths)
        if self.task == "segmentation":
            return w + [w[j] for j in range(len(w) - 2, -1, -1)]
        return w

    @property
    def feature_width(self) -> int:
        return self.widths[0] if self.task == "segmentation" else self.widths[-1]

    @property
    def selector_in(self) -> int:
        bw = self.block_widths()
        return sum(bw[t] for t in self.feature_taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["feature_taps"] = list(self.feature_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["feature_taps"] = tuple(d["feature_taps"]) if d.get("feature_taps") is not None else None
        return cls(**d)


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


# ----------------------------------------------------------------------------
# affinity


def angular_distances(coords) -> np.ndarray:
    """Pairwise angle differences wrapped into [0, pi]."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    norms = np.hypot(c[:, 0], c[:, 1])
    if np.any(norms == 0):
        raise ParameterError("domain coordinates at the origin have no angle")
    ang = np.arctan2(c[:, 1], c[:, 0])
    delta = np.abs(ang[None, :] - ang[:, None]) % (2.0 * math.pi)
    return np.where(delta > math.pi, 2.0 * math.pi - delta, delta)


def _off_diagonal(D: int) -> np.ndarray:
    return ~np.eye(D, dtype=bool)


def affinity_from_scores(scores: Tensor) -> Tensor:
    """Row-wise softmax over the off-diagonal entries; diagonal exactly 0."""
    D = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != D:
        raise DimensionError(f"affinity scores must be square, got {scores.shape}")
    if D < 2:
        raise ParameterError("affinity needs at least 2 domains")
    return ops.softmax_temp(scores, 1.0, axis=1, mask=_off_diagonal(D))


def affinity_learned(A_raw: Tensor) -> Tensor:
    return affinity_from_scores(A_raw)


def affinity_handcrafted(coords, temperature: float = 1.0) -> Tensor:
    """Softmin of angular distance per row (not trainable)."""
    delta = angular_distances(coords)
    if delta.shape[0] < 2:
        raise ParameterError("affinity needs at least 2 domains")
    return affinity_from_scores(Tensor(-delta / temperature))


def d3g_mlp_scores(delta: np.ndarray, mlp_params: Sequence[Tensor]) -> Tensor:
    w1, b1, w2, b2 = mlp_params
    D = delta.shape[0]
    h = ops.relu(ops.dense(Tensor(delta.reshape(-1, 1)), w1, b1))
    return ops.reshape(ops.dense(h, w2, b2), (D, D))


def affinity_d3g_style(coords, mlp_params: Sequence[Tensor]) -> Tensor:
    """Scores from a scalar MLP of the angular distance, softmaxed per row."""
    delta = angular_distances(coords)
    if delta.shape[0] < 2:
        raise ParameterError("affinity needs at least 2 domains")
    return affinity_from_scores(d3g_mlp_scores(delta, mlp_params))


def init_d3g_mlp(rng: np.random.Generator) -> List[Tensor]:
    return [
        _uniform(rng, (1, D3G_HIDDEN), 1, "d3g.w1"),
        Tensor(np.zeros(D3G_HIDDEN), requires_grad=True, name="d3g.b1"),
        _uniform(rng, (D3G_HIDDEN, 1), D3G_HIDDEN, "d3g.w2"),
        Tensor(np.zeros(1), requires_grad=True, name="d3g.b2"),
    ]


# ----------------------------------------------------------------------------
# bundle


@dataclass
class Features:
    """Backbone outputs for one batch."""

    blocks: List[Tensor]
    n: int
    t: int
    cols: Optional[Tensor] = None  # im2col of the head input, shared by all heads

    @property
    def head_input(self) -> Tensor:
        return self.blocks[-1]


@dataclass
class ModelBundle:
    config: BackboneConfig
    backbone: ParamGroup
    heads: List[ParamGroup]
    affinity_params: ParamGroup
    selector: ParamGroup
    variant: str = "learned"
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    domain_ids: List[int] = field(default_factory=list)
    stage: str = "init"
    pooling: str = "spatiotemporal"
    history: dict = field(default_factory=dict)
    backbone_calls: int = 0

    @property
    def D(self) -> int:
        return len(self.heads)

    @property
    def task(self) -> str:
        return self.config.task

    def groups(self) -> List[ParamGroup]:
        return [self.backbone, *self.heads, self.affinity_params, self.selector]

    def parameters(self) -> List[Tensor]:
        return [t for g in self.groups() for t in g.tensors]

    def zero_grad(self) -> None:
        for g in self.groups():
            g.zero_grad()

    def head_index(self, domain_id: int) -> int:
        try:
            return self.domain_ids.index(int(domain_id))
        except ValueError:
            raise ParameterError(f"domain {domain_id} has no expert in this bundle") from None

    def affinity(self) -> Tensor:
        """The D x D affinity matrix (differentiable for trainable variants)."""
        if self.variant == "learned":
            return affinity_learned(self.affinity_params.tensors[0])
        if self.variant == "handcrafted":
            return affinity_handcrafted(self.coords)
        if self.variant == "d3g_style":
            return affinity_d3g_style(self.coords, self.affinity_params.tensors)
        raise ParameterError(f"bundle variant {self.variant!r} has no affinity")

    def copy(self) -> "ModelBundle":
        return bundle_from_bytes(bundle_to_bytes(self))


def init_bundle(
    config: BackboneConfig,
    D: int,
    seed: int = 0,
    variant: str = "learned",
    coords=None,
    domain_ids: Optional[Sequence[int]] = None,
) -> ModelBundle:
    """Freshly initialised bundle with D expert heads.

    Weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and the learned
    affinity logits start at zero.
    """
    if D < 1:
        raise ParameterError(f"need at least one expert head, got D={D}")
    if D == 1:
        variant = "none"
    elif variant not in AFFINITY_VARIANTS:
        raise ParameterError(f"affinity variant must be one of {AFFINITY_VARIANTS}, got {variant!r}")
    coords = np.zeros((D, 2)) if coords is None else np.asarray(coords, dtype=np.float64).reshape(D, 2)
    if variant in ("handcrafted", "d3g_style"):
        angular_distances(coords)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB0B]))

    tensors: List[Tensor] = []
    widths = config.widths
    if config.task == "segmentation":
        c_in = config.in_channels
        for i, w in enumerate(widths):
            tensors.append(_uniform(rng, (w, c_in, 3, 3), c_in * 9, f"enc{i}.K"))
            tensors.append(Tensor(np.zeros(w), requires_grad=True, name=f"enc{i}.b"))
            c_in = w
        for j in range(len(widths) - 2, -1, -1):
            c_in = widths[j + 1] + widths[j]
            tensors.append(_uniform(rng, (widths[j], c_in, 3, 3), c_in * 9, f"dec{j}.K"))
            tensors.append(Tensor(np.zeros(widths[j]), requires_grad=True, name=f"dec{j}.b"))
    else:
        c_in = config.in_channels
        for i, w in enumerate(widths):
            tensors.append(_uniform(rng, (c_in, w), c_in, f"mlp{i}.W"))
            tensors.append(Tensor(np.zeros(w), requires_grad=True, name=f"mlp{i}.b"))
            c_in = w
    backbone = ParamGroup("backbone", tensors)

    heads = []
    fw, K = config.feature_width, config.n_classes
    for d in range(D):
        if config.task == "segmentation":
            ht = [_uniform(rng, (K, fw, 3, 3), fw * 9, f"head{d}.K"), Tensor(np.zeros(K), requires_grad=True, name=f"head{d}.b")]
        else:
            ht = [_uniform(rng, (fw, K), fw, f"head{d}.W"), Tensor(np.zeros(K), requires_grad=True, name=f"head{d}.b")]
        heads.append(ParamGroup(f"head[{d}]", ht))

    if variant == "learned":
        aff = ParamGroup("affinity", [Tensor(np.zeros((D, D)), requires_grad=True, name="A_raw")])
    elif variant == "d3g_style":
        aff = ParamGroup("affinity", init_d3g_mlp(rng))
    else:
        aff = ParamGroup("affinity", [], frozen=True)

    bundle = ModelBundle(
        config=config,
        backbone=backbone,
        heads=heads,
        affinity_params=aff,
        selector=ParamGroup("selector", []),
        variant=variant,
        coords=coords,
        domain_ids=list(domain_ids) if domain_ids is not None else list(range(D)),
    )
    init_selector(bundle, seed)
    return bundle


def init_selector(bundle: ModelBundle, seed: int) -> None:
    """Fresh small-uniform selector weights with zero bias."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E1]))
    cfg = bundle.config
    n_in, D, hidden = cfg.selector_in, bundle.D, cfg.selector_hidden
    if hidden > 0:
        ts = [
            _uniform(rng, (n_in, hidden), n_in, "sel.W1"),
            Tensor(np.zeros(hidden), requires_grad=True, name="sel.b1"),
            _uniform(rng, (hidden, D), hidden, "sel.W2"),
            Tensor(np.zeros(D), requires_grad=True, name="sel.b2"),
        ]
    else:
        ts = [_uniform(rng, (n_in, D), n_in, "sel.W"), Tensor(np.zeros(D), requires_grad=True, name="sel.b")]
    bundle.selector = ParamGroup("selector", ts, frozen=bundle.selector.frozen)


# ----------------------------------------------------------------------------
# forward passes


def _as_input(bundle: ModelBundle, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = bundle.config
    if cfg.task == "segmentation":
        if x.ndim != 5 or x.shape[2] != cfg.in_channels:
            raise DimensionError(f"segmentation input must be [N, T, {cfg.in_channels}, H, W], got {x.shape}")
        scale = 2 ** (len(cfg.widths) - 1)
        if x.shape[3] % scale or x.shape[4] % scale:
            raise DimensionError(f"spatial size {x.shape[3:]} must be divisible by {scale}")
    elif x.ndim != 2 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"classification input must be [N, {cfg.in_channels}], got {x.shape}")
    return x


def backbone_forward(bundle: ModelBundle, x) -> Features:
    x = _as_input(bundle, x)
    bundle.backbone_calls += 1
    p = bundle.backbone.tensors
    cfg = bundle.config
    if cfg.task == "classification":
        h, blocks = x, []
        for i in range(len(cfg.widths)):
            h = ops.relu(ops.dense(h, p[2 * i], p[2 * i + 1]))
            blocks.append(h)
        return Features(blocks, n=x.shape[0], t=1)

    n, t = x.shape[:2]
    h = ops.reshape(x, (n * t,) + x.shape[2:])
    enc: List[Tensor] = []
    for i in range(len(cfg.widths)):
        if i > 0:
            h = ops.avgpool2x(h)
        h = ops.relu(ops.conv2d_3x3(h, p[2 * i], p[2 * i + 1]))
        enc.append(h)
    blocks = list(enc)
    k = 2 * len(cfg.widths)
    for j in range(len(cfg.widths) - 2, -1, -1):
        h = ops.concat([ops.upsample2x(h), enc[j]], axis=1)
        h = ops.relu(ops.conv2d_3x3(h, p[k], p[k + 1]))
        blocks.append(h)
        k += 2
    feats = Features(blocks, n=n, t=t)
    feats.cols = ops.im2col_3x3(feats.head_input)
    return feats


def head_logits(bundle: ModelBundle, feats: Features, d: int) -> Tensor:
    """Logits of expert ``d``: [N, K] or [N, T, K, H, W]."""
    if not 0 <= d < bundle.D:
        raise IndexError(f"expert index {d} out of range for D={bundle.D}")
    W, b = bundle.heads[d].tensors
    if bundle.task == "classification":
        return ops.dense(feats.head_input, W, b)
    _, _, h, w = feats.head_input.shape
    out = ops.conv_from_cols(feats.cols, W, b, feats.n * feats.t, h, w)
    return ops.reshape(out, (feats.n, feats.t) + out.shape[1:])


def expert_forward(bundle: ModelBundle, x, d: int) -> Tensor:
    if not 0 <= d < bundle.D:
        raise IndexError(f"expert index {d} out of range for D={bundle.D}")
    return head_logits(bundle, backbone_forward(bundle, x), d)


def all_experts_forward(bundle: ModelBundle, x) -> List[Tensor]:
    feats = backbone_forward(bundle, x)
    return [head_logits(bundle, feats, d) for d in range(bundle.D)]


def class_axis(task: str) -> int:
    return 2 if task == "segmentation" else 1


def expert_probs(bundle: ModelBundle, logits: Tensor) -> Tensor:
    return ops.softmax_temp(logits, 1.0, axis=class_axis(bundle.task))


def pooled_features(bundle: ModelBundle, feats: Features, pooling: str = "spatiotemporal") -> Tensor:
    """Tap features concatenated on channels and mean-pooled.

    Returns [N, F_sel] (spatiotemporal) or [N*T, F_sel] (per_timestep).
    """
    if pooling not in POOLING_MODES:
        raise ModeError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    cfg = bundle.config
    taps = [feats.blocks[i] for i in cfg.feature_taps]
    if cfg.task == "classification":
        if pooling != "spatiotemporal":
            raise ModeError("per_timestep pooling is only defined for segmentation")
        return ops.concat(taps, axis=1)
    full = feats.head_input.shape[-1]
    resampled = []
    for f in taps:
        while f.shape[-1] < full:
            f = ops.upsample2x(f)
        resampled.append(f)
    pooled = ops.mean(ops.concat(resampled, axis=1), axis=(2, 3))  # [N*T, F_sel]
    if pooling == "per_timestep":
        return pooled
    return ops.mean(ops.reshape(pooled, (feats.n, feats.t, pooled.shape[1])), axis=1)


def selector_head(bundle: ModelBundle, pooled: Tensor) -> Tensor:
    p = bundle.selector.tensors
    if len(p) == 4:
        return ops.dense(ops.relu(ops.dense(pooled, p[0], p[1])), p[2], p[3])
    return ops.dense(pooled, p[0], p[1])


def selector_scores(bundle: ModelBundle, feats: Features, pooling: str = "spatiotemporal") -> Tensor:
    """Unbounded selector outputs: [N, D] or [N, T, D] for per_timestep."""
    out = selector_head(bundle, pooled_features(bundle, feats, pooling))
    if pooling == "per_timestep":
        return ops.reshape(out, (feats.n, feats.t, bundle.D))
    return out


def selector_forward(bundle: ModelBundle, x, pooling: str = "spatiotemporal") -> Tensor:
    if pooling == "per_timestep" and bundle.task != "segmentation":
        raise ModeError("per_timestep pooling is only defined for segmentation")
    return selector_scores(bundle, backbone_forward(bundle, x), pooling)


def mixture_weights(scores: Tensor, tau: float) -> Tensor:
    return ops.softmax_temp(scores, tau, axis=-1)


def mix_stacked(stacked: Tensor, weights: Tensor) -> Tensor:
    """``sum_d weights[..., d] * stacked[d]`` for stacked expert outputs [D, N, ...].

    ``weights`` is [N, D], [N, T, D] or a single row [D] shared by the batch.
    """
    D = stacked.shape[0]
    if weights.ndim == 1:
        w = ops.reshape(weights, (D,) + (1,) * (stacked.ndim - 1))
    else:
        order = (weights.ndim - 1,) + tuple(range(weights.ndim - 1))
        w = ops.transpose(weights, order)
        w = ops.reshape(w, w.shape + (1,) * (stacked.ndim - w.ndim))
    return ops.sum(ops.mul(stacked, w), axis=0)


def mix(bundle: ModelBundle, per_expert: Sequence[Tensor], weights: Tensor) -> Tensor:
    return mix_stacked(ops.stack(per_expert, axis=0), weights)


def mixture_from_logits(bundle: ModelBundle, logits: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Mixture class probabilities from per-expert logits."""
    if bundle.config.mix_space == "logit":
        return expert_probs(bundle, mix(bundle, logits, weights))
    return mix(bundle, [expert_probs(bundle, z) for z in logits], weights)


def mixture_predict(bundle: ModelBundle, x, tau: float = 1.0, pooling: str = "spatiotemporal"):
    """Returns (mixture probabilities, mixture weights)."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    feats = backbone_forward(bundle, x)
    logits = [head_logits(bundle, feats, d) for d in range(bundle.D)]
    p_mix = mixture_weights(selector_scores(bundle, feats, pooling), tau)
    return mixture_from_logits(bundle, logits, p_mix), p_mix


# ----------------------------------------------------------------------------
# checkpoints


def _tensor_key(group: str, i: int) -> str:
    return f"{group}/{i}"


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    groups, arrays = [], []
    for g in bundle.groups():
        groups.append({
            "name": g.name,
            "frozen": bool(g.frozen),
            "tensors": [{"name": t.name, "shape": list(t.shape)} for t in g.tensors],
        })
        for i, t in enumerate(g.tensors):
            arrays.append((_tensor_key(g.name, i), t.data))
    arrays.append(("coords", bundle.coords))
    header = {
        "kind": "checkpoint",
        "stage": bundle.stage,
        "pooling": bundle.pooling,
        "config": bundle.config.to_dict(),
        "D": bundle.D,
        "variant": bundle.variant,
        "domain_ids": [int(d) for d in bundle.domain_ids],
        "groups": groups,
        "history": bundle.history,
    }
    return container.encode(CHECKPOINT_MAGIC, header, arrays)


def bundle_from_bytes(raw: bytes) -> ModelBundle:
    header, arrays = container.decode(raw, CHECKPOINT_MAGIC, CheckpointError)
    try:
        config = BackboneConfig.from_dict(header["config"])
        built: Dict[str, ParamGroup] = {}
        for g in header["groups"]:
            ts = [Tensor(arrays[_tensor_key(g["name"], i)].copy(), requires_grad=True, name=spec["name"])
                  for i, spec in enumerate(g["tensors"])]
            built[g["name"]] = ParamGroup(g["name"], ts, frozen=bool(g["frozen"]))
        D = int(header["D"])
        bundle = ModelBundle(
            config=config,
            backbone=built["backbone"],
            heads=[built[f"head[{d}]"] for d in range(D)],
            affinity_params=built["affinity"],
            selector=built["selector"],
            variant=header["variant"],
            coords=arrays["coords"].reshape(D, 2).copy(),
            domain_ids=[int(d) for d in header["domain_ids"]],
            stage=header["stage"],
            pooling=header.get("pooling", "spatiotemporal"),
            history=header.get("history", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint manifest: {exc}") from None
    return bundle


def save_bundle(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(bundle_to_bytes(bundle))


def load_bundle(path) -> ModelBundle:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return bundle_from_bytes(raw)


def frozen_state_bytes(bundle: ModelBundle) -> bytes:
    """Serialized backbone, heads and affinity, for freeze-contract comparisons."""
    parts = []
    for g in [bundle.backbone, *bundle.heads, bundle.affinity_params]:
        for t in g.tensors:
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)
