"""Grid runner over the design switches, with stage-1 checkpoints shared across cells."""

from __future__ import annotations

import csv
import io
import itertools
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .config import ExperimentConfig
from .evaluation import RunReport, evaluate, metric_names
from .exceptions import ConfigError
from .pipeline import fit_stage1, fit_stage2
from .synthbench import Benchmark, build_benchmark

SWITCHES: Dict[str, str] = {
    "pooling": "pooling",
    "lambda_con": "loss.lambda_con",
    "lambda_mix": "loss.lambda_mix",
    "lambda_acc": "loss.lambda_acc",
    "acc_loss_kind": "loss.acc_loss_kind",
}
FULL_GRID: Dict[str, list] = {
    "pooling": ["spatiotemporal", "per_timestep"],
    "lambda_con": [0.0, 1.0],
    "lambda_mix": [0.0, 1.0],
    "lambda_acc": [0.0, 1.0],
    "acc_loss_kind": ["L1", "MSE"],
}

Cell = Tuple[Tuple[str, object], ...]


def _normalize(key: str, value):
    if key not in SWITCHES:
        raise ConfigError(f"unknown ablation switch {key!r}; expected one of {sorted(SWITCHES)}")
    if key.startswith("lambda_"):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise ConfigError(f"{key} must be a non-negative number, got {value!r}")
        return float(value)
    allowed = FULL_GRID[key]
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
    return value


def expand_grid(grid: Union[dict, Sequence[dict]], base: ExperimentConfig) -> Tuple[List[Cell], List[int]]:
    """Cells (switch settings, every switch filled in) and seeds described by ``grid``.

    ``grid`` is either a mapping of switch to list of values, expanded as a
    cross product, or an explicit list of cells. An optional ``seeds`` entry
    (mapping form only) lists the seeds shared by every cell.
    """
    defaults = {
        "pooling": base.pooling,
        "lambda_con": base.loss.lambda_con,
        "lambda_mix": base.loss.lambda_mix,
        "lambda_acc": base.loss.lambda_acc,
        "acc_loss_kind": base.loss.acc_loss_kind,
    }
    seeds = [base.seed]
    if isinstance(grid, dict):
        grid = dict(grid)
        if "seeds" in grid:
            seeds = grid.pop("seeds")
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")
        for key, values in grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid entry {key!r} must be a non-empty list")
        keys = list(grid)
        raw = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    elif isinstance(grid, (list, tuple)):
        raw = list(grid)
        if not all(isinstance(c, dict) for c in raw):
            raise ConfigError("a list grid must contain one mapping per cell")
    else:
        raise ConfigError(f"grid must be a mapping or a list of cells, got {type(grid).__name__}")
    if not raw:
        raise ConfigError("ablation grid is empty")
    cells: List[Cell] = []
    for entry in raw:
        settings = dict(defaults)
        settings.update({k: _normalize(k, v) for k, v in entry.items()})
        if base.task != "segmentation" and settings["pooling"] == "per_timestep":
            raise ConfigError("per_timestep pooling needs the segmentation task")
        cell = tuple((k, settings[k]) for k in SWITCHES)
        if cell not in cells:
            cells.append(cell)
    return cells, [int(s) for s in seeds]


def cell_config(base: ExperimentConfig, cell: Cell, seed: int) -> ExperimentConfig:
    return base.updated(seed=seed, **{SWITCHES[k]: v for k, v in cell})


@dataclass
class AblationResult:
    task: str
    cells: List[Cell]
    seeds: List[int]
    reports: Dict[Tuple[int, int], RunReport]  # (cell index, seed) -> report

    def rows(self) -> List[dict]:
        names = metric_names(self.task)
        out = []
        for i, cell in enumerate(self.cells):
            settings = dict(cell)
            for seed in self.seeds:
                r = self.reports[(i, seed)]
                row = {
                    "pooling": settings["pooling"],
                    "lambda_con": settings["lambda_con"],
                    "lambda_mix": settings["lambda_mix"],
                    "lambda_acc": settings["lambda_acc"],
                    "acc_loss": settings["acc_loss_kind"],
                    "seed": seed,
                }
                for m in names:
                    row[m] = r.metric("mixture", m)
                row["argmax_head_oa"] = r.metric("argmax_head", "oa")
                row["oracle_oa"] = r.metric("oracle", "oa")
                out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def mean_metric(self, cell: Cell, metric: str = "oa") -> float:
        i = self.cells.index(cell)
        return sum(self.reports[(i, s)].metric("mixture", metric) for s in self.seeds) / len(self.seeds)


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("CODEX_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CODEX_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CODEX_THREADS must be >= 1, got {n}")
    return n


def run_ablation(
    grid: Union[dict, Sequence[dict], None],
    base_config: ExperimentConfig,
    threads: Optional[int] = None,
    benchmarks: Optional[Dict[int, Benchmark]] = None,
    stage1_cache: Optional[dict] = None,
    seeds: Optional[Sequence[int]] = None,
) -> AblationResult:
    """Train and evaluate every grid cell for every seed.

    Cells that differ only in stage-2 switches reuse one stage-1 checkpoint,
    since stage 1 depends on the consistency weight alone among the switches.
    """
    cells, grid_seeds = expand_grid(FULL_GRID if grid is None else grid, base_config)
    seeds = list(grid_seeds if seeds is None else seeds)
    threads = thread_count() if threads is None else threads
    benchmarks = {} if benchmarks is None else benchmarks
    stage1_cache = {} if stage1_cache is None else stage1_cache
    lock = threading.Lock()

    for seed in seeds:
        if seed not in benchmarks:
            benchmarks[seed] = build_benchmark(base_config.updated(seed=seed).benchmark())

    def stage1_for(cfg: ExperimentConfig, seed: int):
        key = _stage1_key(cfg)
        with lock:
            hit = stage1_cache.get(key)
        if hit is None:
            hit = fit_stage1(cfg, benchmarks[seed].train)
            with lock:
                stage1_cache[key] = hit
        return hit

    def run(job):
        i, seed = job
        cfg = cell_config(base_config, cells[i], seed)
        s1 = stage1_for(cfg, seed)
        s2 = fit_stage2(cfg, s1, benchmarks[seed].train)
        return job, evaluate(s2, benchmarks[seed].test, cfg.loss.tau, config_hash=cfg.hash(), seed=seed)

    # One job per distinct stage-1 checkpoint runs first, so worker threads
    # never race to train the same one.
    firsts = {}
    for i in range(len(cells)):
        for seed in seeds:
            firsts.setdefault(_stage1_key(cell_config(base_config, cells[i], seed)), (i, seed))
    jobs = [(i, s) for i in range(len(cells)) for s in seeds]
    ordered = list(firsts.values()) + [j for j in jobs if j not in firsts.values()]
    reports = {}
    if threads == 1:
        for job in ordered:
            key, rep = run(job)
            reports[key] = rep
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for key, rep in pool.map(run, list(firsts.values())):
                reports[key] = rep
            rest = [j for j in ordered if j not in reports]
            for key, rep in pool.map(run, rest):
                reports[key] = rep
    return AblationResult(base_config.task, cells, seeds, reports)


def _stage1_key(cfg: ExperimentConfig) -> str:
    # Everything stage 1 depends on; stage-2 switches are neutralised.
    neutral = cfg.updated(pooling="spatiotemporal", **{"loss.lambda_mix": 1.0, "loss.lambda_acc": 1.0,
                                                     "loss.acc_loss_kind": "L1"})
    return neutral.hash()


def single_ablations(base: ExperimentConfig) -> Dict[str, Cell]:
    """The full configuration plus each one-switch departure from it."""
    full = {"pooling": "spatiotemporal", "lambda_con": 1.0, "lambda_mix": 1.0, "lambda_acc": 1.0,
            "acc_loss_kind": "L1"}
    flips = {"pooling": "per_timestep", "lambda_con": 0.0, "lambda_mix": 0.0, "lambda_acc": 0.0,
             "acc_loss_kind": "MSE"}
    out = {"full": tuple((k, full[k]) for k in SWITCHES)}
    for key, value in flips.items():
        if key == "pooling" and base.task != "segmentation":
            continue
        cell = dict(full, **{key: value})
        out[f"{key}={value}"] = tuple((k, cell[k]) for k in SWITCHES)
    return out
