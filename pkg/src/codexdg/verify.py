"""Acceptance checks, shared by the test suite and ``codex verify``.

Each check returns a :class:`CheckResult`; none of them raise on a failed
property, so a run always reports every check.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, TextIO

import numpy as np

from .autodiff import Tensor, backward, grad_check, ops
from .config import ExperimentConfig
from .evaluation import evaluate
from .losses import (
    LossConfig,
    consistency_loss,
    domain_loss,
    focal_loss,
    stage1_loss,
    stage2_inputs,
    stage2_loss,
)
from .model import (
    BackboneConfig,
    affinity_d3g_style,
    affinity_handcrafted,
    affinity_learned,
    frozen_state_bytes,
    init_bundle,
    init_d3g_mlp,
)
from .metrics import metric_avg_acc, metric_miou, metric_oa
from .optim import OptimConfig
from .synthbench import (
    BenchmarkConfig,
    Dataset,
    build_benchmark,
    generate_domains,
    sample_classification,
    sample_segmentation,
)
from .trainer import TrainLog, train_baseline, train_stage1, train_stage2

GRAD_TOL = 1e-4
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
ABLATION_SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ----------------------------------------------------------------------------
# micro problems


def micro_segmentation(D: int = 3, n: int = 2, seed: int = 0, sigma: float = 0.1):
    """A tiny segmentation problem: (bundle, dataset) with D domains, 8x8 maps."""
    doms = generate_domains(D, seed)
    samples = []
    for dom in doms:
        samples.extend(sample_segmentation(dom, n, T=2, C=2, H=8, W=8, K=3, noise_sigma=sigma, seed=seed))
    data = Dataset.from_samples(samples, task="segmentation", K=3, meta={"micro": True})
    cfg = BackboneConfig(task="segmentation", in_channels=2, n_classes=3, widths=(2, 3, 3))
    bundle = init_bundle(cfg, D, seed=seed, variant="learned", coords=[d.coords for d in doms],
                         domain_ids=[d.id for d in doms])
    return bundle, data


def micro_classification(D: int = 3, n: int = 4, seed: int = 0, sigma: float = 0.1, K: int = 3, F: int = 4):
    doms = generate_domains(D, seed)
    samples = []
    for dom in doms:
        samples.extend(sample_classification(dom, n, K, F, sigma, seed))
    data = Dataset.from_samples(samples, task="classification", K=K, meta={"micro": True})
    cfg = BackboneConfig(task="classification", in_channels=F, n_classes=K, widths=(6, 5))
    bundle = init_bundle(cfg, D, seed=seed, variant="learned", coords=[d.coords for d in doms],
                         domain_ids=[d.id for d in doms])
    return bundle, data


def _randomize(bundle, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Move every parameter off its initialisation (zero biases and logits included)."""
    for t in bundle.parameters():
        t.data = t.data + scale * rng.standard_normal(t.shape)


def _domain_batch(data: Dataset, bundle, d: int):
    idx = data.indices_by_domain()[bundle.domain_ids[d]]
    return data.inputs[idx], data.labels[idx]


# ----------------------------------------------------------------------------
# 1. gradient correctness


def primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """Objective builders for each primitive: name -> (f, params)."""

    def leaf(*shape, positive=False, offset=0.0):
        x = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape) + offset
        return Tensor(x, requires_grad=True)

    def probe(out_fn, params):
        w = rng.standard_normal(out_fn().shape)
        return (lambda: ops.sum(ops.mul(out_fn(), Tensor(w))), params)

    a, b = leaf(3, 4), leaf(3, 4)
    row = leaf(4)
    pos = leaf(3, 4, positive=True)
    m1, m2, bias = leaf(3, 5), leaf(5, 2), leaf(2)
    img = leaf(2, 2, 4, 4)
    ker, kb = leaf(3, 2, 3, 3), leaf(3)
    idx = rng.integers(0, 4, size=(3, 1))
    mask = np.ones((3, 4), dtype=bool)
    mask[np.arange(3), rng.integers(0, 4, 3)] = False
    # keep kinks away from the probe point
    away = Tensor(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.2, 1.0, (3, 4)), requires_grad=True)
    cases = {
        "add": probe(lambda: ops.add(a, row), [a, row]),
        "sub": probe(lambda: ops.sub(a, b), [a, b]),
        "mul": probe(lambda: ops.mul(a, row), [a, row]),
        "scale": probe(lambda: ops.scale(a, -1.7), [a]),
        "relu": probe(lambda: ops.relu(away), [away]),
        "exp": probe(lambda: ops.exp(a), [a]),
        "log": probe(lambda: ops.log(pos), [pos]),
        "power": probe(lambda: ops.power(pos, 2.5), [pos]),
        "absolute": probe(lambda: ops.absolute(away), [away]),
        "clamp_min": probe(lambda: ops.clamp_min(away, 0.0), [away]),
        "sum": probe(lambda: ops.sum(a, axis=1, keepdims=True), [a]),
        "mean": probe(lambda: ops.mean(a, axis=0), [a]),
        "reshape": probe(lambda: ops.reshape(a, (2, 6)), [a]),
        "transpose": probe(lambda: ops.transpose(a, (1, 0)), [a]),
        "concat": probe(lambda: ops.concat([a, b], axis=1), [a, b]),
        "stack": probe(lambda: ops.stack([a, b], axis=0), [a, b]),
        "take": probe(lambda: ops.take(a, 1, axis=0), [a]),
        "gather": probe(lambda: ops.gather(a, idx, axis=1), [a]),
        "matmul": probe(lambda: ops.matmul(m1, m2), [m1, m2]),
        "dense": probe(lambda: ops.dense(m1, m2, bias), [m1, m2, bias]),
        "conv2d_3x3": probe(lambda: ops.conv2d_3x3(img, ker, kb), [img, ker, kb]),
        "upsample2x": probe(lambda: ops.upsample2x(img), [img]),
        "avgpool2x": probe(lambda: ops.avgpool2x(img), [img]),
        "softmax_temp": probe(lambda: ops.softmax_temp(a, 0.7, axis=1), [a]),
        "softmax_masked": probe(lambda: ops.softmax_temp(a, 1.3, axis=1, mask=mask), [a]),
    }
    return cases


def check_gradients(seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for name, (f, params) in primitive_cases(rng).items():
        worst[name] = grad_check(f, params)

    lcfg = LossConfig()
    for task, maker in (("seg", micro_segmentation), ("cls", micro_classification)):
        bundle, data = maker(D=3, seed=seed)
        _randomize(bundle, rng, 0.3)
        x, y = _domain_batch(data, bundle, 1)
        trainable = bundle.backbone.tensors + [t for h in bundle.heads for t in h.tensors] \
            + bundle.affinity_params.tensors
        worst[f"stage1_loss[{task}]"] = grad_check(lambda: stage1_loss(bundle, x, y, 1, lcfg), trainable)
        for kind in ("L1", "MSE"):
            s2cfg = LossConfig(acc_loss_kind=kind)
            for g in [bundle.backbone, *bundle.heads, bundle.affinity_params]:
                g.frozen = True
            worst[f"stage2_loss[{task},{kind}]"] = grad_check(
                lambda: stage2_loss(bundle, data.inputs, data.labels, s2cfg), bundle.selector.tensors)
            for g in [bundle.backbone, *bundle.heads, bundle.affinity_params]:
                g.frozen = False
    d3g_bundle, d3g_data = micro_classification(D=3, seed=seed)
    d3g_bundle = init_bundle(d3g_bundle.config, 3, seed=seed, variant="d3g_style", coords=d3g_bundle.coords,
                             domain_ids=d3g_bundle.domain_ids)
    _randomize(d3g_bundle, rng, 0.3)
    x, y = _domain_batch(d3g_data, d3g_bundle, 0)
    # Biases feeding units that stay active on every distance only shift a
    # whole row of scores, which the softmax ignores. Their true gradient is
    # zero, so the relative error would compare rounding noise with itself.
    w1, _, w2, _ = d3g_bundle.affinity_params.tensors
    worst["stage1_loss[d3g]"] = grad_check(lambda: stage1_loss(d3g_bundle, x, y, 0, lcfg),
                                           [w1, w2] + d3g_bundle.heads[1].tensors)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < GRAD_TOL and elapsed < 30.0
    return CheckResult(1, "gradient correctness", ok,
                       f"{len(worst)} objectives, max rel error {worst[top]:.2e} ({top}), budget 30s", elapsed)


# ----------------------------------------------------------------------------
# 2. affinity invariants


def _affinity_ok(A: np.ndarray) -> bool:
    off = ~np.eye(len(A), dtype=bool)
    return (
        bool(np.all(np.diag(A) == 0.0))
        and bool(np.all(np.abs(A.sum(axis=1) - 1.0) <= 1e-12))
        and bool(np.all((A[off] > 0.0) & (A[off] < 1.0)))
    )


def _random_coords(rng: np.random.Generator, D: int) -> np.ndarray:
    ang = np.sort(rng.uniform(0, 2 * np.pi, D))
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def check_affinity(trials: int = 100, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = []
    for trial in range(trials):
        D = int(rng.integers(3, 9))
        coords = _random_coords(rng, D)
        mlp = init_d3g_mlp(rng)
        for t in mlp:
            t.data = t.data + rng.standard_normal(t.shape)
        mats = {
            "learned": affinity_learned(Tensor(3.0 * rng.standard_normal((D, D)))).data,
            "handcrafted": affinity_handcrafted(coords, temperature=float(rng.uniform(0.2, 3.0))).data,
            "d3g_style": affinity_d3g_style(coords, mlp).data,
        }
        bad.extend(f"{k}@{trial}" for k, A in mats.items() if not _affinity_ok(A))
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    coords2 = _random_coords(rng, 2)
    two = {
        "learned": affinity_learned(Tensor(rng.standard_normal((2, 2)))).data,
        "handcrafted": affinity_handcrafted(coords2).data,
        "d3g_style": affinity_d3g_style(coords2, init_d3g_mlp(rng)).data,
    }
    bad.extend(f"{k}@D=2" for k, A in two.items() if not np.array_equal(A, perm))
    ok = not bad
    detail = f"{trials} parameterizations x 3 variants, D=2 permutation exact" if ok else f"violations: {bad[:5]}"
    return CheckResult(2, "affinity invariants", ok, detail, time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 3. gradient routing


def _grads(groups) -> Dict[str, List[Optional[np.ndarray]]]:
    return {g.name: [t.grad for t in g.tensors] for g in groups}


def _all_zero(grads: List[Optional[np.ndarray]]) -> bool:
    return all(g is None or not np.any(g) for g in grads)


def _any_nonzero(grads: List[Optional[np.ndarray]]) -> bool:
    return any(g is not None and np.any(g) for g in grads)


def routing_violations(bundle, data, d: int, cfg: LossConfig = LossConfig()) -> List[str]:
    """Exact-zero gradient routing for one domain-``d`` batch; empty means all good."""
    x, y = _domain_batch(data, bundle, d)
    groups = bundle.groups()
    problems = []

    bundle.zero_grad()
    backward(domain_loss(bundle, x, y, d, cfg))
    g = _grads(groups)
    for e, h in enumerate(bundle.heads):
        if e != d and not _all_zero(g[h.name]):
            problems.append(f"domain_loss reached head {e}")
    if not _any_nonzero(g[bundle.heads[d].name]):
        problems.append("domain_loss missed its own head")
    if not _all_zero(g["affinity"]) or not _all_zero(g["selector"]):
        problems.append("domain_loss reached affinity/selector")

    bundle.zero_grad()
    backward(consistency_loss(bundle, x, y, d, cfg=cfg))
    g = _grads(groups)
    if not _all_zero(g[bundle.heads[d].name]):
        problems.append("consistency_loss reached its own head")
    if not _all_zero(g["selector"]):
        problems.append("consistency_loss reached the selector")

    frozen = [bundle.backbone, *bundle.heads, bundle.affinity_params]
    for grp in frozen:
        grp.frozen = True
    for kind in ("L1", "MSE"):
        bundle.zero_grad()
        backward(stage2_loss(bundle, data.inputs, data.labels, LossConfig(acc_loss_kind=kind)))
        g = _grads(groups)
        for grp in frozen:
            if not _all_zero(g[grp.name]):
                problems.append(f"stage2_loss[{kind}] reached frozen {grp.name}")
        if not _any_nonzero(g["selector"]):
            problems.append(f"stage2_loss[{kind}] missed the selector")
    for grp in frozen:
        grp.frozen = False
    bundle.zero_grad()
    return problems


def check_routing(seeds=range(10)) -> CheckResult:
    start = time.perf_counter()
    problems = []
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for maker in (micro_segmentation, micro_classification):
            bundle, data = maker(D=3, seed=seed)
            _randomize(bundle, rng, 0.3)
            d = seed % 3
            problems.extend(f"seed {seed}: {p}" for p in routing_violations(bundle, data, d))
    ok = not problems
    detail = f"{len(list(seeds))} seeds x 2 tasks, all routes exact" if ok else "; ".join(problems[:4])
    return CheckResult(3, "gradient routing", ok, detail, time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 4. freeze contract


def check_freeze(seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    problems = []
    for maker in (micro_segmentation, micro_classification):
        bundle, data = maker(D=3, n=4, seed=seed)
        task = bundle.task
        oc = OptimConfig(lr=1e-2, epochs_stage1=2, epochs_stage2=3, batch_size=2, seed=seed)
        s1 = train_stage1(data, bundle.config, oc)
        before = frozen_state_bytes(s1)
        for pooling in (("spatiotemporal", "per_timestep") if task == "segmentation" else ("spatiotemporal",)):
            s2 = train_stage2(s1, data, oc, pooling=pooling)
            if frozen_state_bytes(s2) != before:
                problems.append(f"{task}/{pooling}: frozen state changed")
            if frozen_state_bytes(s1) != before:
                problems.append(f"{task}/{pooling}: stage-1 bundle mutated")
            sel0 = init_bundle(s1.config, s1.D, seed=seed).selector
            if all(np.array_equal(a.data, b.data) for a, b in zip(sel0.tensors, s2.selector.tensors)) \
                    and pooling == "spatiotemporal":
                problems.append(f"{task}/{pooling}: selector did not train")
    ok = not problems
    detail = "backbone, heads and affinity byte-identical after stage 2" if ok else "; ".join(problems)
    return CheckResult(4, "freeze contract", ok, detail, time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 5. focal loss


def check_focal(batches: int = 50, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(batches):
        n, K = int(rng.integers(1, 20)), int(rng.integers(2, 7))
        logits = rng.standard_normal((n, K)) * 3
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        y = rng.integers(0, K, n)
        ce = float(np.mean(-np.log(p[np.arange(n), y])))
        worst = max(worst, abs(float(focal_loss(Tensor(p), y, gamma=0.0, axis=1).data) - ce))
    spot = float(focal_loss(Tensor(np.array([[0.5, 0.5]])), np.array([0]), gamma=2.0, axis=1).data)
    spot_err = abs(spot - 0.25 * math.log(2.0))
    ok = worst <= 1e-12 and spot_err <= 1e-12
    return CheckResult(5, "focal-loss reduction", ok,
                       f"gamma=0 vs CE max diff {worst:.1e}; spot value error {spot_err:.1e}",
                       time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 6. oracle dominance


def dominance_gaps(report) -> List[float]:
    """``oracle - rival`` for every dominated mode and accuracy metric (all must be >= 0)."""
    gaps = []
    for m in report.dominance_metrics():
        o = report.modes["oracle"][m]
        gaps.extend(o - h[m] for h in report.per_head)
        if "argmax_head" in report.modes:
            gaps.append(o - report.modes["argmax_head"][m])
    return gaps


def check_oracle(reports=None, seeds=range(3)) -> CheckResult:
    """Builds reports on micro benchmarks (and any supplied ones) and checks the gaps."""
    start = time.perf_counter()
    reports = list(reports or [])
    for seed in seeds:
        for task in ("segmentation", "classification"):
            cfg = BenchmarkConfig(task=task, D=6, K=3, T=2, H=8, W=8, samples_per_domain=4, seed=seed,
                                  train_frac=0.5, val_frac=1 / 6)
            bench = build_benchmark(cfg)
            mc = BackboneConfig(task=task, in_channels=cfg.C if task == "segmentation" else cfg.F,
                                n_classes=cfg.K, widths=(4, 6, 6) if task == "segmentation" else (8, 8))
            oc = OptimConfig(lr=1e-2, epochs_stage1=2, epochs_stage2=2, batch_size=4, seed=seed)
            s1 = train_stage1(bench.train, mc, oc)
            poolings = ("spatiotemporal", "per_timestep") if task == "segmentation" else ("spatiotemporal",)
            for pooling in poolings:
                s2 = train_stage2(s1, bench.train, oc, pooling=pooling)
                for split in (bench.train, bench.val, bench.test):
                    reports.append(evaluate(s2, split))
    gaps = [g for r in reports for g in dominance_gaps(r)]
    ok = bool(gaps) and min(gaps) >= 0.0
    return CheckResult(6, "oracle dominance", ok, f"{len(reports)} reports, min gap {min(gaps):.4f}",
                       time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 7. metric oracles


def brute_force_metrics(preds: np.ndarray, labels: np.ndarray, K: int):
    """Loop-based confusion matrix and the three metrics derived from it."""
    cm = [[0] * K for _ in range(K)]
    for p, y in zip(preds.ravel().tolist(), labels.ravel().tolist()):
        cm[y][p] += 1
    total = sum(sum(r) for r in cm)
    oa = sum(cm[k][k] for k in range(K)) / total
    ious, recalls = [], []
    for k in range(K):
        tp = cm[k][k]
        fp = sum(cm[i][k] for i in range(K)) - tp
        fn = sum(cm[k]) - tp
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
        if sum(cm[k]):
            recalls.append(tp / sum(cm[k]))
    return oa, sum(ious) / len(ious), sum(recalls) / len(recalls)


def check_metrics(seeds=range(50)) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        labels = rng.integers(0, 6, shape)
        preds = np.where(rng.random(shape) < 0.5, labels, rng.integers(0, 6, shape))
        oa, miou, avg = brute_force_metrics(preds, labels, 6)
        worst = max(worst, abs(metric_oa(preds, labels) - oa), abs(metric_miou(preds, labels, 6) - miou),
                    abs(metric_avg_acc(preds, labels, 6) - avg))
    hand = abs(metric_miou(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2) - 7 / 12)
    ok = worst <= 1e-12 and hand <= 1e-12
    return CheckResult(7, "metric oracles", ok, f"max deviation {worst:.1e}; hand mIoU error {hand:.1e}",
                       time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 8-10, 12: desk-scale experiments on the default benchmark


class DeskScale:
    """Lazily trained default-benchmark runs, shared by the stochastic checks."""

    def __init__(self, base: Optional[ExperimentConfig] = None):
        self.base = base or ExperimentConfig()
        self.benchmarks: Dict[int, object] = {}
        self.stage1_cache: dict = {}
        self.reports: Dict[int, object] = {}
        self.stage1: Dict[int, object] = {}
        self.seconds: Dict[int, float] = {}

    def benchmark(self, seed: int):
        if seed not in self.benchmarks:
            self.benchmarks[seed] = build_benchmark(self.base.updated(seed=seed).benchmark())
        return self.benchmarks[seed]

    def run(self, seed: int):
        """Full configuration, learned affinity: (stage-1 bundle, RunReport)."""
        from .ablation import _stage1_key
        from .pipeline import fit_stage1, fit_stage2

        if seed not in self.reports:
            start = time.perf_counter()
            cfg = self.base.updated(seed=seed)
            bench = self.benchmark(seed)
            key = _stage1_key(cfg)
            if key not in self.stage1_cache:
                self.stage1_cache[key] = fit_stage1(cfg, bench.train)
            s1 = self.stage1_cache[key]
            s2 = fit_stage2(cfg, s1, bench.train)
            self.stage1[seed] = s1
            self.reports[seed] = evaluate(s2, bench.test, cfg.loss.tau, config_hash=cfg.hash(), seed=seed)
            self.seconds[seed] = time.perf_counter() - start
        return self.stage1[seed], self.reports[seed]


def efficacy_flags(report) -> Dict[str, bool]:
    m = report.modes
    heads = [h["oa"] for h in report.per_head]
    return {
        "a": m["mixture"]["oa"] > m["uniform_mixture"]["oa"],
        "b": m["mixture"]["oa"] - min(heads) >= 0.05,
        "c": m["argmax_head"]["oa"] > float(np.mean(heads)),
    }


def check_efficacy(desk: DeskScale, seeds=ACCEPTANCE_SEEDS, need: int = 4) -> CheckResult:
    start = time.perf_counter()
    parts, wins, slow = [], 0, []
    for seed in seeds:
        _, rep = desk.run(seed)
        f = efficacy_flags(rep)
        wins += all(f.values())
        if desk.seconds[seed] >= 600:
            slow.append(seed)
        parts.append(f"s{seed}:" + "".join(k if v else "-" for k, v in f.items()))
    ok = wins >= need and not slow
    detail = f"{wins}/{len(seeds)} seeds pass (a,b,c) [{' '.join(parts)}]"
    if slow:
        detail += f"; over 10 min: seeds {slow}"
    return CheckResult(8, "desk-scale efficacy", ok, detail, time.perf_counter() - start)


def check_affinity_structure(desk: DeskScale, seeds=ACCEPTANCE_SEEDS, need: int = 4) -> CheckResult:
    start = time.perf_counter()
    rhos = []
    for seed in seeds:
        _, rep = desk.run(seed)
        rhos.append(rep.proximity["rho"])
    wins = sum(r <= -0.3 for r in rhos)
    return CheckResult(9, "learned-affinity structure", wins >= need,
                       f"{wins}/{len(seeds)} seeds with rho <= -0.3 [{', '.join(f'{r:.2f}' for r in rhos)}]",
                       time.perf_counter() - start)


def check_ablation(desk: DeskScale, seeds=ABLATION_SEEDS, slack: float = 0.005) -> CheckResult:
    from .ablation import run_ablation, single_ablations

    start = time.perf_counter()
    for seed in seeds:
        desk.benchmark(seed)
    named = single_ablations(desk.base)
    result = run_ablation([dict(cell) for cell in named.values()], desk.base, threads=1,
                          benchmarks=desk.benchmarks, stage1_cache=desk.stage1_cache, seeds=seeds)
    means: Dict[str, float] = {}
    for name, cell in named.items():
        means[name] = result.mean_metric(cell, "oa")
    full = means.pop("full")
    worse = {k: v for k, v in means.items() if full < v - slack}
    detail = f"full {full:.4f}; " + ", ".join(f"{k} {v:.4f}" for k, v in means.items())
    return CheckResult(10, "ablation direction", not worse, detail, time.perf_counter() - start)


def epoch_overhead(desk: DeskScale, seed: int = 0, epochs: int = 3) -> tuple:
    """(multi-expert stage-1 epoch seconds, baseline epoch seconds), each the minimum over epochs."""
    cfg = desk.base.updated(seed=seed, **{"optim.epochs_stage1": epochs})
    bench = desk.benchmark(seed)
    log = TrainLog()
    train_stage1(bench.train, cfg.backbone(), cfg.optimizer(), cfg.affinity_variant, cfg.losses(), log=log)
    train_baseline(bench.train, cfg.backbone(), cfg.optimizer(), cfg.losses(), log=log)
    multi = min(e["seconds"] for e in log.epochs["stage1"])
    single = min(e["seconds"] for e in log.epochs["baseline"])
    return multi, single


def check_overhead(desk: DeskScale) -> CheckResult:
    start = time.perf_counter()
    multi, single = epoch_overhead(desk)
    ratio = multi / single
    n_train = len(desk.benchmark(0).train.domains)
    return CheckResult(12, "overhead smoke check", ratio <= 2.0,
                       f"D={n_train}: stage-1 epoch {multi:.2f}s vs baseline {single:.2f}s, ratio {ratio:.2f}",
                       time.perf_counter() - start)


# ----------------------------------------------------------------------------
# 11. determinism


def tiny_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig().updated(
        seed=seed, D=6, H=8, W=8, samples_per_domain=4, train_frac=0.5,
        **{"optim.epochs_stage1": 2, "optim.epochs_stage2": 2, "optim.batch_size": 4},
    )


def _pipeline_files(cfg: ExperimentConfig, root: Path) -> Dict[str, bytes]:
    from .cli import main

    cfg_path = root / "config.json"
    cfg_path.write_text(cfg.to_json())
    codes = [
        main(["gen-data", "--config", str(cfg_path), "--out", str(root / "data")]),
        main(["train", "--config", str(cfg_path), "--data", str(root / "data"), "--out", str(root / "ckpt"),
              "--baseline"]),
        main(["eval", "--checkpoint", str(root / "ckpt" / "stage2.cdxc"), "--data", str(root / "data"),
              "--baseline", str(root / "ckpt" / "baseline.cdxc"), "--out", str(root / "eval")]),
    ]
    if any(codes):
        raise RuntimeError(f"pipeline exit codes {codes}")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("timings.json", "config.json")}


def check_determinism(cfg: Optional[ExperimentConfig] = None) -> CheckResult:
    start = time.perf_counter()
    cfg = cfg or tiny_config()
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        try:
            first, second = _pipeline_files(cfg, Path(a)), _pipeline_files(cfg, Path(b))
        except RuntimeError as exc:
            return CheckResult(11, "determinism", False, str(exc), time.perf_counter() - start)
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differ and any(k.endswith(".cdxc") for k in first) and any(k.endswith("report.json") for k in first)
    detail = f"{len(first)} artifacts byte-identical" if ok else f"differing: {differ}"
    return CheckResult(11, "determinism", ok, detail, time.perf_counter() - start)


# ----------------------------------------------------------------------------
# driver


FAST_CHECKS: List[Callable[[], CheckResult]] = [
    check_gradients, check_affinity, check_routing, check_freeze, check_focal,
    lambda: check_oracle(seeds=range(1)), check_metrics, check_determinism,
]


def run_level(level: str = "fast", stream: Optional[TextIO] = None, desk: Optional[DeskScale] = None) -> List[CheckResult]:
    """Run the fast (criteria 1-7, 11) or full (all twelve) acceptance checks."""
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    results: List[CheckResult] = []

    def emit(r: CheckResult):
        results.append(r)
        if stream is not None:
            print(r.line(), file=stream, flush=True)

    fast = FAST_CHECKS
    if level == "full":
        fast = [c for c in FAST_CHECKS if c is not FAST_CHECKS[5]]
    for check in fast:
        emit(check())
    if level == "full":
        desk = desk or DeskScale()
        emit(check_overhead(desk))
        emit(check_efficacy(desk))
        emit(check_affinity_structure(desk))
        emit(check_oracle(reports=list(desk.reports.values()), seeds=range(3)))
        emit(check_ablation(desk))
        results.sort(key=lambda r: r.number)
    return results
