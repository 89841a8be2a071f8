"""End-to-end helpers: benchmark, two-stage training and evaluation from one config."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .config import ExperimentConfig
from .evaluation import RunReport, evaluate
from .model import ModelBundle
from .synthbench import Benchmark, Dataset, build_benchmark
from .trainer import TrainLog, train_baseline, train_stage1, train_stage2


@dataclass
class PipelineResult:
    stage1: ModelBundle
    stage2: ModelBundle
    report: RunReport
    log: TrainLog
    baseline: Optional[ModelBundle] = None


def fit_stage1(cfg: ExperimentConfig, train: Dataset, log: Optional[TrainLog] = None) -> ModelBundle:
    return train_stage1(train, cfg.backbone(), cfg.optimizer(), cfg.affinity_variant, cfg.losses(), log=log)


def fit_stage2(cfg: ExperimentConfig, stage1: ModelBundle, train: Dataset,
               log: Optional[TrainLog] = None) -> ModelBundle:
    return train_stage2(stage1, train, cfg.optimizer(), cfg.losses(), cfg.pooling, log=log)


def run_experiment(cfg: ExperimentConfig, bench: Optional[Benchmark] = None, with_baseline: bool = False,
                   stage1: Optional[ModelBundle] = None) -> PipelineResult:
    """Train both stages on the train split and evaluate on the test split."""
    bench = bench or build_benchmark(cfg.benchmark())
    log = TrainLog()
    s1 = stage1 if stage1 is not None else fit_stage1(cfg, bench.train, log)
    s2 = fit_stage2(cfg, s1, bench.train, log)
    base = None
    if with_baseline:
        base = train_baseline(bench.train, cfg.backbone(), cfg.optimizer(), cfg.losses(), log=log)
    report = evaluate(s2, bench.test, cfg.loss.tau, baseline=base, config_hash=cfg.hash(), seed=cfg.seed)
    return PipelineResult(s1, s2, report, log, base)
