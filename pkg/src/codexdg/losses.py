"""Training objectives for both stages.

Stage 1 (backbone, experts, affinity): the focal domain loss on the owning
expert plus the consistency loss on the affinity-weighted mixture of the
other experts. Stage 2 (selector only): accuracy regression plus the focal
loss of the selector-weighted mixture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import ops
from .exceptions import ContractError, DimensionError, ParameterError
from .model import (
    Features,
    ModelBundle,
    backbone_forward,
    class_axis,
    expert_probs,
    head_logits,
    mix_stacked,
    mixture_weights,
    pooled_features,
    selector_head,
)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    tau: float = 1.0
    lambda_con: float = 1.0
    lambda_mix: float = 1.0
    lambda_acc: float = 1.0
    acc_loss_kind: str = "L1"

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError(f"focal exponent must be >= 0, got {self.gamma}")
        if not self.tau > 0:
            raise ParameterError(f"mixture temperature must be > 0, got {self.tau}")
        for name in ("lambda_con", "lambda_mix", "lambda_acc"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.acc_loss_kind not in ("L1", "MSE"):
            raise ParameterError(f"acc_loss_kind must be 'L1' or 'MSE', got {self.acc_loss_kind!r}")


# ----------------------------------------------------------------------------
# focal loss


def focal_loss(probs: Tensor, labels, gamma: float = 2.0, axis: int = -1, per_sample: bool = False) -> Tensor:
    """Mean of ``-(1 - p_y)^gamma * log(p_y)`` over all labelled elements.

    ``probs`` holds class distributions along ``axis``; ``labels`` holds the
    true class index of every element (``probs.shape`` without ``axis``).
    With ``per_sample`` the mean is taken per leading index, giving [N].
    """
    labels = np.asarray(labels, dtype=np.int64)
    ax = axis % probs.ndim
    expected = probs.shape[:ax] + probs.shape[ax + 1:]
    if labels.shape != expected:
        raise DimensionError(f"focal_loss: labels {labels.shape} do not match probabilities {probs.shape} (class axis {ax})")
    p_y = ops.gather(probs, labels, axis=ax)
    log_p = ops.log(ops.clamp_min(p_y, PROB_FLOOR))
    if gamma == 0:
        term = ops.scale(log_p, -1.0)
    else:
        weight = ops.power(ops.clamp_min(ops.sub(1.0, p_y), 0.0), gamma)
        term = ops.scale(ops.mul(weight, log_p), -1.0)
    if per_sample:
        return ops.mean(term, axis=tuple(range(1, term.ndim))) if term.ndim > 1 else term
    return ops.mean(term)


# ----------------------------------------------------------------------------
# accuracy targets


def per_sample_accuracy(probs: np.ndarray, labels, task: str, per_timestep: bool = False) -> np.ndarray:
    """Fraction of correctly classified elements per sample: [N] (or [N, T])."""
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = np.asarray(labels)
    pred = np.argmax(probs, axis=class_axis(task))
    hit = (pred == labels).astype(np.float64)
    if task == "classification":
        return hit
    if per_timestep:
        return hit.mean(axis=(2, 3))
    return hit.reshape(hit.shape[0], -1).mean(axis=1)


def accuracy_measure(pred_probs, y, task: str) -> float:
    """Accuracy of one prediction: 0/1 for classification, pixel accuracy for segmentation.

    ``pred_probs`` is [K] or [T, K, H, W] with labels a class index or [T, H, W].
    """
    probs = pred_probs.data if isinstance(pred_probs, Tensor) else np.asarray(pred_probs)
    return float(per_sample_accuracy(probs[None], np.asarray(y)[None], task)[0])


# ----------------------------------------------------------------------------
# stage 1


def _check_domain(bundle: ModelBundle, d: int, sample_domains) -> None:
    if not 0 <= d < bundle.D:
        raise IndexError(f"expert index {d} out of range for D={bundle.D}")
    if sample_domains is not None:
        doms = np.asarray(sample_domains).reshape(-1)
        if np.any(doms != bundle.domain_ids[d]):
            raise ContractError(
                f"domain loss for expert {d} (domain {bundle.domain_ids[d]}) got samples from domains {sorted(set(doms.tolist()))}"
            )


def domain_loss(bundle: ModelBundle, x, y, d: int, cfg: LossConfig = LossConfig(), *,
                sample_domains=None, feats: Optional[Features] = None, per_sample: bool = False) -> Tensor:
    """Focal loss of expert ``d`` on samples of its own domain."""
    _check_domain(bundle, d, sample_domains)
    feats = feats if feats is not None else backbone_forward(bundle, x)
    probs = expert_probs(bundle, head_logits(bundle, feats, d))
    return focal_loss(probs, y, cfg.gamma, axis=class_axis(bundle.task), per_sample=per_sample)


def _mixable(bundle: ModelBundle, logits: Sequence[Tensor]) -> Tensor:
    """Per-expert outputs in the space where mixing happens, stacked on axis 0."""
    if bundle.config.mix_space == "logit":
        return ops.stack(logits, axis=0)
    return ops.stack([expert_probs(bundle, z) for z in logits], axis=0)


def _finish_mixture(bundle: ModelBundle, mixed: Tensor) -> Tensor:
    if bundle.config.mix_space == "logit":
        return expert_probs(bundle, mixed)
    return mixed


def consistency_loss(bundle: ModelBundle, x, y, d: int, affinity: Optional[Tensor] = None,
                     cfg: LossConfig = LossConfig(), *, sample_domains=None,
                     feats: Optional[Features] = None, logits: Optional[Sequence[Tensor]] = None,
                     per_sample: bool = False) -> Tensor:
    """Focal loss of the affinity-weighted mixture of experts e != d."""
    _check_domain(bundle, d, sample_domains)
    if bundle.D < 2:
        raise ParameterError("consistency loss needs at least 2 experts")
    if affinity is None:
        affinity = bundle.affinity()
    if logits is None:
        feats = feats if feats is not None else backbone_forward(bundle, x)
        logits = [head_logits(bundle, feats, e) for e in range(bundle.D)]
    row = ops.take(affinity, d, axis=0)
    mixed = _finish_mixture(bundle, mix_stacked(_mixable(bundle, logits), row))
    return focal_loss(mixed, y, cfg.gamma, axis=class_axis(bundle.task), per_sample=per_sample)


def stage1_terms(bundle: ModelBundle, x, y, d: int, cfg: LossConfig = LossConfig(), *,
                 sample_domains=None) -> Dict[str, Tensor]:
    """Per-sample domain and consistency losses ([N] each) from one shared forward."""
    _check_domain(bundle, d, sample_domains)
    feats = backbone_forward(bundle, x)
    terms = {}
    use_con = cfg.lambda_con > 0 and bundle.D >= 2
    if use_con:
        logits = [head_logits(bundle, feats, e) for e in range(bundle.D)]
        own = logits[d]
    else:
        own = head_logits(bundle, feats, d)
    terms["domain"] = focal_loss(expert_probs(bundle, own), y, cfg.gamma,
                                 axis=class_axis(bundle.task), per_sample=True)
    if use_con:
        terms["consistency"] = consistency_loss(bundle, None, y, d, bundle.affinity(), cfg,
                                                logits=logits, per_sample=True)
    return terms


def stage1_loss(bundle: ModelBundle, x, y, d: int, cfg: LossConfig = LossConfig(), *,
                sample_domains=None, return_terms: bool = False):
    """Batch mean of ``domain_loss + lambda_con * consistency_loss`` for a domain-``d`` batch."""
    terms = stage1_terms(bundle, x, y, d, cfg, sample_domains=sample_domains)
    per = terms["domain"]
    if "consistency" in terms:
        per = ops.add(per, ops.scale(terms["consistency"], cfg.lambda_con))
    total = ops.mean(per)
    if return_terms:
        return total, {k: float(np.mean(v.data)) for k, v in terms.items()}
    return total


# ----------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Inputs:
    """Everything the stage-2 objective needs from the (frozen) experts.

    ``mixable`` is [D, N, ...] expert outputs in the mixing space, ``acc`` the
    per-expert accuracy targets [N, D] (or [N, T, D]), ``pooled`` the
    selector input features.
    """

    pooled: Tensor
    mixable: Tensor
    acc: np.ndarray
    labels: np.ndarray
    n: int
    t: int

    def subset(self, index) -> "Stage2Inputs":
        index = np.asarray(index, dtype=np.int64)
        if self.pooled.shape[0] == self.n:
            pooled = self.pooled.data[index]
        else:  # per-timestep rows [N*T, F]
            pooled = self.pooled.data.reshape(self.n, self.t, -1)[index].reshape(len(index) * self.t, -1)
        return Stage2Inputs(Tensor(pooled), Tensor(self.mixable.data[:, index]), self.acc[index],
                            self.labels[index], len(index), self.t)


def stage2_inputs(bundle: ModelBundle, x, y, pooling: str = "spatiotemporal") -> Stage2Inputs:
    """Forward the experts for stage 2.

    Frozen groups are cut out of the graph with a stop-gradient, so losses
    built on these inputs leave them with exactly zero gradient.
    """
    feats = backbone_forward(bundle, x)
    if bundle.backbone.frozen:
        feats = Features([ops.stop_gradient(b) for b in feats.blocks], feats.n, feats.t,
                         None if feats.cols is None else ops.stop_gradient(feats.cols))
    logits = []
    for d in range(bundle.D):
        z = head_logits(bundle, feats, d)
        logits.append(ops.stop_gradient(z) if bundle.heads[d].frozen else z)
    probs = [expert_probs(bundle, z) for z in logits]
    per_t = pooling == "per_timestep"
    acc = np.stack([per_sample_accuracy(p.data, y, bundle.task, per_timestep=per_t) for p in probs], axis=-1)
    mixable = ops.stack(logits, axis=0) if bundle.config.mix_space == "logit" else ops.stack(probs, axis=0)
    pooled = pooled_features(bundle, feats, pooling)
    return Stage2Inputs(pooled, mixable, acc, np.asarray(y, dtype=np.int64), feats.n, feats.t)


def _selector_out(bundle: ModelBundle, inputs: Stage2Inputs) -> Tensor:
    out = selector_head(bundle, inputs.pooled)
    if out.shape[0] != inputs.n:
        out = ops.reshape(out, (inputs.n, inputs.t, bundle.D))
    return out


def _accuracy_term(scores: Tensor, acc: np.ndarray, kind: str) -> Tensor:
    resid = ops.sub(scores, Tensor(acc))
    per = ops.absolute(resid) if kind == "L1" else ops.power(resid, 2.0)
    per = ops.sum(per, axis=-1)  # [N] or [N, T]
    if per.ndim > 1:
        per = ops.mean(per, axis=1)
    return per


def _mixture_term(bundle: ModelBundle, scores: Tensor, inputs: Stage2Inputs, cfg: LossConfig) -> Tensor:
    p_mix = mixture_weights(scores, cfg.tau)
    mixed = _finish_mixture(bundle, mix_stacked(inputs.mixable, p_mix))
    return focal_loss(mixed, inputs.labels, cfg.gamma, axis=class_axis(bundle.task), per_sample=True)


def stage2_terms(bundle: ModelBundle, inputs: Stage2Inputs, cfg: LossConfig = LossConfig()) -> Dict[str, Tensor]:
    scores = _selector_out(bundle, inputs)
    terms = {}
    if cfg.lambda_acc > 0:
        terms["accuracy"] = _accuracy_term(scores, inputs.acc, cfg.acc_loss_kind)
    if cfg.lambda_mix > 0:
        terms["mixture"] = _mixture_term(bundle, scores, inputs, cfg)
    return terms


def stage2_loss_from_inputs(bundle: ModelBundle, inputs: Stage2Inputs, cfg: LossConfig = LossConfig(),
                            return_terms: bool = False):
    terms = stage2_terms(bundle, inputs, cfg)
    per = None
    for key, lam in (("accuracy", cfg.lambda_acc), ("mixture", cfg.lambda_mix)):
        if key in terms:
            part = ops.scale(terms[key], lam)
            per = part if per is None else ops.add(per, part)
    total = ops.mean(per) if per is not None else Tensor(0.0)
    if return_terms:
        return total, {k: float(np.mean(v.data)) for k, v in terms.items()}
    return total


def accuracy_loss(bundle: ModelBundle, x, y, cfg: LossConfig = LossConfig(),
                  pooling: str = "spatiotemporal", per_sample: bool = False) -> Tensor:
    """``sum_d |selector(x)[d] - acc_d|`` (squared residuals for the MSE variant)."""
    inputs = stage2_inputs(bundle, x, y, pooling)
    per = _accuracy_term(_selector_out(bundle, inputs), inputs.acc, cfg.acc_loss_kind)
    return per if per_sample else ops.mean(per)


def mixture_loss(bundle: ModelBundle, x, y, cfg: LossConfig = LossConfig(),
                 pooling: str = "spatiotemporal", per_sample: bool = False) -> Tensor:
    """Focal loss of the selector-weighted expert mixture."""
    inputs = stage2_inputs(bundle, x, y, pooling)
    per = _mixture_term(bundle, _selector_out(bundle, inputs), inputs, cfg)
    return per if per_sample else ops.mean(per)


def stage2_loss(bundle: ModelBundle, x, y, cfg: LossConfig = LossConfig(),
                pooling: str = "spatiotemporal", return_terms: bool = False):
    """Batch mean of ``lambda_acc * accuracy_loss + lambda_mix * mixture_loss``."""
    return stage2_loss_from_inputs(bundle, stage2_inputs(bundle, x, y, pooling), cfg, return_terms)
