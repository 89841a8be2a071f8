"""Evaluation of every prediction mode, the oracle, and the affinity analysis."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import spearmanr

from .autodiff import Tensor
from .container import canonical_json
from .exceptions import ContractError, ParameterError
from .metrics import compute_metric, metric_miou
from .model import (
    ModelBundle,
    angular_distances,
    backbone_forward,
    class_axis,
    expert_probs,
    head_logits,
    mixture_from_logits,
    mixture_weights,
    selector_scores,
)
from .synthbench import Dataset, DomainSpec

EVAL_CHUNK = 32
RANK_DECIMALS = 12


def metric_names(task: str) -> tuple:
    return ("miou", "oa") if task == "segmentation" else ("avg_acc", "oa")


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    """Metrics for every evaluated mode, plus the provenance of the run.

    ``modes`` maps a mode name to ``{metric: value}``; ``per_head`` is a
    list with one entry per expert. Oracle dominance over the per-head and
    argmax-head modes is checked on construction for the accuracy metrics,
    where it holds exactly.
    """

    task: str
    config_hash: str
    seed: int
    tau: float
    pooling: str
    n_samples: int
    modes: Dict[str, Dict[str, float]]
    per_head: List[Dict[str, object]]
    oracle_scoring: Dict[str, str]
    affinity: Optional[List[List[float]]] = None
    proximity: Optional[Dict[str, object]] = None
    test_domains: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.check_oracle_dominance()

    def dominance_metrics(self) -> List[str]:
        # Pooled mIoU is not a per-sample sum, so the max argument does not apply.
        return [m for m, how in self.oracle_scoring.items() if how == "accuracy"]

    def check_oracle_dominance(self) -> None:
        oracle = self.modes.get("oracle")
        if oracle is None:
            return
        for metric in self.dominance_metrics():
            rivals = [(f"per_head[{h['head']}]", h[metric]) for h in self.per_head]
            if "argmax_head" in self.modes:
                rivals.append(("argmax_head", self.modes["argmax_head"][metric]))
            for name, value in rivals:
                if oracle[metric] < value:
                    raise ContractError(f"oracle {metric} {oracle[metric]!r} below {name} {value!r}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tau": self.tau,
            "pooling": self.pooling,
            "n_samples": self.n_samples,
            "modes": self.modes,
            "per_head": self.per_head,
            "oracle_scoring": self.oracle_scoring,
            "affinity": self.affinity,
            "proximity": self.proximity,
            "test_domains": self.test_domains,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def rows(self) -> List[dict]:
        names = metric_names(self.task)
        out = []
        for h in self.per_head:
            out.append({"mode": "per_head", "head": h["head"], "domain_id": h["domain_id"],
                        **{m: h[m] for m in names}})
        for mode in ("argmax_head", "mixture", "uniform_mixture", "oracle", "baseline"):
            if mode in self.modes:
                out.append({"mode": mode, "head": "", "domain_id": "", **{m: self.modes[mode][m] for m in names}})
        return out

    def to_csv(self) -> str:
        names = metric_names(self.task)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["mode", "head", "domain_id", *names], lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def metric(self, mode: str, name: str = "oa") -> float:
        return float(self.modes[mode][name])


def _check_compatible(bundle: ModelBundle, data: Dataset) -> None:
    cfg = bundle.config
    if data.task != cfg.task:
        raise ContractError(f"dataset task {data.task!r} does not match checkpoint task {cfg.task!r}")
    if data.K != cfg.n_classes:
        raise ContractError(f"dataset has K={data.K} classes, checkpoint expects {cfg.n_classes}")
    channel_axis = 2 if cfg.task == "segmentation" else 1
    expected_ndim = 5 if cfg.task == "segmentation" else 2
    if data.inputs.ndim != expected_ndim or data.inputs.shape[channel_axis] != cfg.in_channels:
        raise ContractError(f"dataset inputs {data.inputs.shape} do not fit a checkpoint with "
                            f"{cfg.in_channels} input channels")
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")


def _has_selector(bundle: ModelBundle) -> bool:
    return bundle.stage == "stage2" and len(bundle.selector) > 0


@dataclass
class _Predictions:
    heads: np.ndarray              # [D, N, ...] hard predictions
    argmax_head: Optional[np.ndarray]
    mixture: Optional[np.ndarray]
    uniform: Optional[np.ndarray]


def predict_all(bundle: ModelBundle, data: Dataset, tau: float = 1.0) -> _Predictions:
    """Hard predictions of every expert and of the selector-driven modes."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    axis = class_axis(bundle.task)
    use_sel = _has_selector(bundle)
    per_t = bundle.pooling == "per_timestep"
    heads, argmax, mixed, uniform = [], [], [], []
    for i in range(0, len(data), EVAL_CHUNK):
        x = data.inputs[i:i + EVAL_CHUNK]
        feats = backbone_forward(bundle, x)
        logits = [head_logits(bundle, feats, d) for d in range(bundle.D)]
        probs = np.stack([expert_probs(bundle, z).data for z in logits])
        heads.append(probs.argmax(axis=axis + 1))
        if bundle.D > 1:
            flat = Tensor(np.full(bundle.D, 1.0 / bundle.D))
            uniform.append(mixture_from_logits(bundle, logits, flat).data.argmax(axis=axis))
        if use_sel:
            scores = selector_scores(bundle, feats, bundle.pooling)
            pick = scores.data.argmax(axis=-1)  # [n] or [n, T]
            n = probs.shape[1]
            if per_t:
                t_idx = np.arange(probs.shape[2])[None, :]
                chosen = probs[pick, np.arange(n)[:, None], t_idx]
            else:
                chosen = probs[pick, np.arange(n)]
            argmax.append(chosen.argmax(axis=axis))
            mixed.append(mixture_from_logits(bundle, logits, mixture_weights(scores, tau)).data.argmax(axis=axis))
    cat = lambda parts, ax=0: np.concatenate(parts, axis=ax) if parts else None  # noqa: E731
    return _Predictions(np.concatenate(heads, axis=1), cat(argmax), cat(mixed), cat(uniform))


def _units(preds: np.ndarray, labels: np.ndarray, per_timestep: bool):
    """Reshape to [U, ...] selection units: samples, or (sample, timestep) pairs."""
    if per_timestep and labels.ndim == 4:
        lead = preds.shape[:-4]
        return (preds.reshape(lead + (-1,) + preds.shape[-2:]), labels.reshape((-1,) + labels.shape[-2:]))
    return preds, labels


def oracle_predictions(head_preds: np.ndarray, labels: np.ndarray, score: str, K: int,
                       per_timestep: bool = False) -> np.ndarray:
    """Per-unit best head (lowest index on ties), returned as assembled predictions."""
    preds, y = _units(head_preds, np.asarray(labels), per_timestep)
    D, U = preds.shape[0], preds.shape[1]
    if score == "accuracy":
        s = (preds == y[None]).reshape(D, U, -1).sum(axis=2)
    elif score == "iou":
        s = np.array([[metric_miou(preds[d, u], y[u], K) for u in range(U)] for d in range(D)])
    else:
        raise ParameterError(f"oracle score must be 'accuracy' or 'iou', got {score!r}")
    best = np.argmax(s, axis=0)
    return preds[best, np.arange(U)].reshape(head_preds.shape[1:])


def oracle_eval(bundle: ModelBundle, dataset: Dataset, metric_kind: str = "oa", tau: float = 1.0) -> float:
    """Aggregate metric of the per-sample best expert.

    ``metric_kind="miou"`` selects heads by per-sample IoU; every other
    metric selects by per-sample accuracy.
    """
    _check_compatible(bundle, dataset)
    preds = predict_all(bundle, dataset, tau).heads
    score = "iou" if metric_kind == "miou" else "accuracy"
    chosen = oracle_predictions(preds, dataset.labels, score, dataset.K, bundle.pooling == "per_timestep")
    return compute_metric(metric_kind, chosen, dataset.labels, dataset.K)


def _metrics(preds: np.ndarray, labels: np.ndarray, task: str, K: int) -> Dict[str, float]:
    return {m: compute_metric(m, preds, labels, K) for m in metric_names(task)}


def affinity_proximity_correlation(affinity, domains, return_tie: bool = False):
    """Spearman correlation between off-diagonal affinities and angular distances.

    ``domains`` is a sequence of :class:`DomainSpec` or an array of unit
    coordinates. Constant inputs have no defined rank correlation; the result
    is then 0 and, with ``return_tie``, the tie flag is set.
    """
    A = np.asarray(affinity.data if isinstance(affinity, Tensor) else affinity, dtype=np.float64)
    if len(domains) and isinstance(domains[0], DomainSpec):
        coords = np.array([d.coords for d in domains], dtype=np.float64)
    else:
        coords = np.asarray(domains, dtype=np.float64)
    D = A.shape[0]
    if A.shape != (D, D) or coords.shape != (D, 2):
        raise ParameterError(f"affinity {A.shape} and coordinates {coords.shape} disagree")
    if D < 3:
        raise ParameterError(f"rank correlation needs D >= 3 domains, got {D}")
    off = ~np.eye(D, dtype=bool)
    # Round away last-bit noise so that mathematically equal values tie.
    a = np.round(A[off], RANK_DECIMALS)
    delta = np.round(angular_distances(coords)[off], RANK_DECIMALS)
    tied = bool(np.ptp(a) == 0 or np.ptp(delta) == 0)
    rho = 0.0 if tied else float(spearmanr(a, delta).statistic)
    return (rho, tied) if return_tie else rho


def evaluate(
    bundle: ModelBundle,
    dataset: Dataset,
    tau: float = 1.0,
    baseline: Optional[ModelBundle] = None,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunReport:
    """Evaluate per-head, argmax-head, mixture, uniform-mixture and oracle modes."""
    _check_compatible(bundle, dataset)
    y, K, task = dataset.labels, dataset.K, bundle.task
    pred = predict_all(bundle, dataset, tau)
    per_head = []
    for d in range(bundle.D):
        per_head.append({"head": d, "domain_id": int(bundle.domain_ids[d]),
                         **_metrics(pred.heads[d], y, task, K)})
    modes: Dict[str, Dict[str, float]] = {}
    if pred.argmax_head is not None:
        modes["argmax_head"] = _metrics(pred.argmax_head, y, task, K)
        modes["mixture"] = _metrics(pred.mixture, y, task, K)
    if pred.uniform is not None:
        modes["uniform_mixture"] = _metrics(pred.uniform, y, task, K)
    per_t = bundle.pooling == "per_timestep"
    scoring = {m: ("iou" if m == "miou" else "accuracy") for m in metric_names(task)}
    modes["oracle"] = {
        m: compute_metric(m, oracle_predictions(pred.heads, y, how, K, per_t), y, K) for m, how in scoring.items()
    }
    if baseline is not None:
        _check_compatible(baseline, dataset)
        if baseline.D != 1:
            raise ContractError(f"baseline checkpoint must have a single head, got {baseline.D}")
        modes["baseline"] = _metrics(predict_all(baseline, dataset, tau).heads[0], y, task, K)

    affinity = proximity = None
    if bundle.variant != "none" and bundle.D >= 2:
        A = bundle.affinity().data
        affinity = A.tolist()
        if bundle.D >= 3:
            rho, tied = affinity_proximity_correlation(A, bundle.coords, return_tie=True)
            proximity = {"rho": rho, "tied": tied}
    stage_hist = bundle.history.get("stage2") or bundle.history.get("stage1") or {}
    stamp = bundle.history.get("experiment", {})
    if seed is None:
        seed = int(stamp.get("seed", stage_hist.get("seed", 0)))
    if config_hash is None:
        config_hash = stamp.get("config_hash") or config_digest({"model": bundle.config.to_dict(), "variant": bundle.variant,
                                     "loss": {k: v.get("loss_config") for k, v in bundle.history.items()
                                              if k != "experiment"}})
    return RunReport(
        task=task, config_hash=config_hash, seed=int(seed), tau=float(tau), pooling=bundle.pooling,
        n_samples=len(dataset), modes=modes, per_head=per_head, oracle_scoring=scoring,
        affinity=affinity, proximity=proximity, test_domains=[int(d) for d in dataset.domains],
    )
