"""Two-stage training driver and the single-head baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .autodiff import Tensor, backward
from .exceptions import CheckpointError, DataError, NumericError, ParameterError
from .losses import LossConfig, Stage2Inputs, focal_loss, stage1_loss, stage2_inputs, stage2_loss_from_inputs
from .model import (
    POOLING_MODES,
    BackboneConfig,
    ModelBundle,
    backbone_forward,
    bundle_from_bytes,
    bundle_to_bytes,
    class_axis,
    expert_probs,
    head_logits,
    init_bundle,
    init_selector,
)
from .optim import Adam, OptimConfig
from .synthbench import Dataset

logger = logging.getLogger(__name__)

_TAG_STAGE1 = 0x51
_TAG_STAGE2 = 0x52
_TAG_BASELINE = 0xBA5E
CACHE_CHUNK = 32


@dataclass
class TrainLog:
    """Per-epoch losses, loss-term means and wall-clock seconds."""

    epochs: Dict[str, List[dict]] = field(default_factory=dict)

    def add(self, stage: str, epoch: int, loss: float, terms: Dict[str, float], seconds: float) -> None:
        self.epochs.setdefault(stage, []).append(
            {"epoch": epoch, "loss": loss, "terms": terms, "seconds": seconds}
        )

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def _epoch_rng(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(epoch)]))


def domain_batches(data: Dataset, domain_ids: List[int], batch_size: int, rng: np.random.Generator):
    """Domain-homogeneous batches, visiting domains round-robin.

    Yields ``(head_index, sample_indices)``.
    """
    per_domain = []
    by_domain = data.indices_by_domain()
    for head, dom in enumerate(domain_ids):
        idx = by_domain.get(dom)
        if idx is None or len(idx) == 0:
            raise DataError(f"training domain {dom} has no samples")
        idx = idx[rng.permutation(len(idx))]
        per_domain.append([(head, idx[i:i + batch_size]) for i in range(0, len(idx), batch_size)])
    longest = max(len(b) for b in per_domain)
    for r in range(longest):
        for batches in per_domain:
            if r < len(batches):
                yield batches[r]


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{stage}: non-finite loss at epoch {epoch}")


def _declared_domains(data: Dataset) -> List[int]:
    split = data.meta.get("split")
    declared = data.domains
    if split and data.meta.get("split_name") == "train":
        declared = sorted(int(d) for d in split["train_domains"])
        missing = set(declared) - set(data.domains)
        if missing:
            raise DataError(f"training domains {sorted(missing)} have no samples")
    return declared


def train_stage1(
    data: Dataset,
    model_cfg: BackboneConfig,
    optim_cfg: OptimConfig = OptimConfig(),
    affinity_variant: str = "learned",
    loss_cfg: LossConfig = LossConfig(),
    log: Optional[TrainLog] = None,
    callback: Optional[Callable[[int, ModelBundle], None]] = None,
) -> ModelBundle:
    """Train backbone, experts and affinity; returns a bundle tagged ``stage1``.

    ``callback(epoch, bundle)`` runs after every epoch, for monitoring only.
    """
    domain_ids = _declared_domains(data)
    if len(domain_ids) < 2:
        raise DataError(f"stage 1 needs at least 2 training domains, got {len(domain_ids)}")
    if data.task != model_cfg.task:
        raise ParameterError(f"dataset task {data.task!r} does not match model task {model_cfg.task!r}")
    coords = data.domain_coords()
    bundle = init_bundle(model_cfg, len(domain_ids), seed=optim_cfg.seed, variant=affinity_variant,
                         coords=[coords[d] for d in domain_ids], domain_ids=domain_ids)
    groups = [bundle.backbone, *bundle.heads]
    if bundle.variant in ("learned", "d3g_style"):
        groups.append(bundle.affinity_params)
    opt = Adam(groups, optim_cfg)
    curve: List[float] = []
    term_curve: Dict[str, List[float]] = {}
    for epoch in range(optim_cfg.epochs_stage1):
        start = time.perf_counter()
        rng = _epoch_rng(optim_cfg.seed, _TAG_STAGE1, epoch)
        losses, sizes, sums = [], [], {}
        for head, idx in domain_batches(data, domain_ids, optim_cfg.batch_size, rng):
            opt.zero_grad()
            bundle.affinity_params.zero_grad()
            loss, terms = stage1_loss(bundle, data.inputs[idx], data.labels[idx], head, loss_cfg,
                                      return_terms=True)
            _check_finite(float(loss.data), "stage1", epoch)
            backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
            sizes.append(len(idx))
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        n = float(sum(sizes))
        mean_loss = sum(losses) / n
        mean_terms = {k: v / n for k, v in sums.items()}
        curve.append(mean_loss)
        for k, v in mean_terms.items():
            term_curve.setdefault(k, []).append(v)
        logger.debug("stage1 epoch %d loss %.5f", epoch, mean_loss)
        if log is not None:
            log.add("stage1", epoch, mean_loss, mean_terms, time.perf_counter() - start)
        if callback is not None:
            callback(epoch, bundle)
    if len(curve) > 1 and any(b > a for a, b in zip(curve, curve[1:])):
        logger.info("stage1 epoch-mean loss is not monotonically decreasing")
    bundle.stage = "stage1"
    bundle.history = {"stage1": {"loss": curve, "terms": term_curve, "loss_config": loss_cfg.__dict__.copy(),
                                  "seed": int(optim_cfg.seed)}}
    return bundle


def _concat_inputs(parts: List[Stage2Inputs]) -> Stage2Inputs:
    return Stage2Inputs(
        pooled=Tensor(np.concatenate([p.pooled.data for p in parts], axis=0)),
        mixable=Tensor(np.concatenate([p.mixable.data for p in parts], axis=1)),
        acc=np.concatenate([p.acc for p in parts], axis=0),
        labels=np.concatenate([p.labels for p in parts], axis=0),
        n=sum(p.n for p in parts),
        t=parts[0].t,
    )


def frozen_inputs(bundle: ModelBundle, data: Dataset, pooling: str) -> Stage2Inputs:
    """Stage-2 inputs for a whole dataset; valid for as long as the experts stay frozen."""
    parts = []
    for i in range(0, len(data), CACHE_CHUNK):
        sl = slice(i, i + CACHE_CHUNK)
        parts.append(stage2_inputs(bundle, data.inputs[sl], data.labels[sl], pooling))
    return _concat_inputs(parts)


def train_stage2(
    stage1: ModelBundle,
    data: Dataset,
    optim_cfg: OptimConfig = OptimConfig(),
    loss_cfg: LossConfig = LossConfig(),
    pooling: str = "spatiotemporal",
    log: Optional[TrainLog] = None,
) -> ModelBundle:
    """Freeze the experts and train a freshly initialised selector.

    The input bundle is left untouched; a new bundle tagged ``stage2`` is
    returned.
    """
    if stage1.stage != "stage1":
        raise CheckpointError(f"stage 2 needs a stage1 checkpoint, got stage {stage1.stage!r}")
    if pooling not in POOLING_MODES:
        raise ParameterError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    if pooling == "per_timestep" and stage1.task != "segmentation":
        raise ParameterError("per_timestep pooling is only defined for segmentation")
    bundle = bundle_from_bytes(bundle_to_bytes(stage1))
    for g in [bundle.backbone, *bundle.heads, bundle.affinity_params]:
        g.frozen = True
    bundle.pooling = pooling
    init_selector(bundle, optim_cfg.seed)
    bundle.selector.frozen = False

    domain_ids = list(bundle.domain_ids)
    cache = frozen_inputs(bundle, data, pooling) if optim_cfg.epochs_stage2 > 0 else None
    opt = Adam([bundle.selector], optim_cfg)
    trains = loss_cfg.lambda_acc > 0 or loss_cfg.lambda_mix > 0
    curve: List[float] = []
    term_curve: Dict[str, List[float]] = {}
    for epoch in range(optim_cfg.epochs_stage2):
        start = time.perf_counter()
        rng = _epoch_rng(optim_cfg.seed, _TAG_STAGE2, epoch)
        total, count, sums = 0.0, 0, {}
        for _, idx in domain_batches(data, domain_ids, optim_cfg.batch_size, rng):
            opt.zero_grad()
            loss, terms = stage2_loss_from_inputs(bundle, cache.subset(idx), loss_cfg, return_terms=True)
            _check_finite(float(loss.data), "stage2", epoch)
            if trains:
                backward(loss)
                opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        curve.append(total / count)
        for k, v in sums.items():
            term_curve.setdefault(k, []).append(v / count)
        if log is not None:
            log.add("stage2", epoch, total / count, {k: v / count for k, v in sums.items()},
                    time.perf_counter() - start)
    bundle.selector.zero_grad()
    bundle.stage = "stage2"
    bundle.history = dict(stage1.history)
    bundle.history["stage2"] = {"loss": curve, "terms": term_curve, "loss_config": loss_cfg.__dict__.copy(),
                                "pooling": pooling, "seed": int(optim_cfg.seed)}
    return bundle


def train_baseline(
    data: Dataset,
    model_cfg: BackboneConfig,
    optim_cfg: OptimConfig = OptimConfig(),
    loss_cfg: LossConfig = LossConfig(),
    log: Optional[TrainLog] = None,
) -> ModelBundle:
    """Single head on the shared backbone, trained on all domains pooled (plain ERM)."""
    if data.task != model_cfg.task:
        raise ParameterError(f"dataset task {data.task!r} does not match model task {model_cfg.task!r}")
    if len(data) == 0:
        raise DataError("baseline training set is empty")
    bundle = init_bundle(model_cfg, 1, seed=optim_cfg.seed, variant="none", domain_ids=[-1])
    opt = Adam([bundle.backbone, bundle.heads[0]], optim_cfg)
    axis = class_axis(model_cfg.task)
    curve = []
    for epoch in range(optim_cfg.epochs_stage1):
        start = time.perf_counter()
        perm = _epoch_rng(optim_cfg.seed, _TAG_BASELINE, epoch).permutation(len(data))
        total = 0.0
        for i in range(0, len(perm), optim_cfg.batch_size):
            idx = perm[i:i + optim_cfg.batch_size]
            opt.zero_grad()
            feats = backbone_forward(bundle, data.inputs[idx])
            probs = expert_probs(bundle, head_logits(bundle, feats, 0))
            loss = focal_loss(probs, data.labels[idx], loss_cfg.gamma, axis=axis)
            _check_finite(float(loss.data), "baseline", epoch)
            backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        curve.append(total / len(perm))
        if log is not None:
            log.add("baseline", epoch, curve[-1], {"domain": curve[-1]}, time.perf_counter() - start)
    bundle.stage = "baseline"
    bundle.history = {"baseline": {"loss": curve, "seed": int(optim_cfg.seed)}}
    return bundle


__all__ = [
    "TrainLog",
    "domain_batches",
    "frozen_inputs",
    "train_baseline",
    "train_stage1",
    "train_stage2",
]
