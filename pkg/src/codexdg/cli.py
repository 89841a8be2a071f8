"""``codex`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import verify
from .ablation import run_ablation
from .config import ExperimentConfig, load_config
from .evaluation import evaluate
from .exceptions import CheckpointError, ConfigError, ContractError, DataError, NumericError
from .model import load_bundle, save_bundle
from .synthbench import Dataset, build_benchmark
from .trainer import TrainLog, train_baseline
from .pipeline import fit_stage1, fit_stage2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

log = logging.getLogger("codexdg")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _dataset_path(path: Path, split: str) -> Path:
    return path / f"{split}.cdxd" if path.is_dir() else path


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    bench = build_benchmark(cfg.benchmark())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        getattr(bench, name).save(out / f"{name}.cdxd")
    _write(out / "manifest.json", _dump({**bench.manifest(), "config_hash": cfg.hash()}))
    log.info("wrote benchmark to %s", out)
    return EXIT_OK


def _stamp(bundle, cfg: ExperimentConfig) -> None:
    bundle.history["experiment"] = {"config_hash": cfg.hash(), "seed": cfg.seed}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train = Dataset.load(_dataset_path(Path(args.data), "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    if args.resume:
        s1 = load_bundle(args.resume)
        if s1.stage != "stage1":
            raise CheckpointError(f"--resume needs a stage1 checkpoint, got stage {s1.stage!r}")
    else:
        s1 = fit_stage1(cfg, train, tlog)
        _stamp(s1, cfg)
        save_bundle(s1, out / "stage1.cdxc")
    if args.stage != "1":
        s2 = fit_stage2(cfg, s1, train, tlog)
        _stamp(s2, cfg)
        save_bundle(s2, out / "stage2.cdxc")
    if args.baseline:
        base = train_baseline(train, cfg.backbone(), cfg.optimizer(), cfg.losses(), tlog)
        _stamp(base, cfg)
        save_bundle(base, out / "baseline.cdxc")
    # Losses are deterministic; wall-clock lives in its own file so that
    # re-runs leave every other artifact byte-identical.
    losses = {stage: [{k: e[k] for k in ("epoch", "loss", "terms")} for e in entries]
              for stage, entries in tlog.epochs.items()}
    _write(out / "train_log.json", _dump({"config_hash": cfg.hash(), "epochs": losses}))
    _write(out / "timings.json", _dump({stage: [e["seconds"] for e in entries]
                                        for stage, entries in tlog.epochs.items()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = load_bundle(args.checkpoint)
    data = Dataset.load(_dataset_path(Path(args.data), "test"))
    baseline = load_bundle(args.baseline) if args.baseline else None
    tau = args.tau
    if tau is None:
        hist = bundle.history.get("stage2") or bundle.history.get("stage1") or {}
        tau = float(hist.get("loss_config", {}).get("tau", 1.0))
    report = evaluate(bundle, data, tau, baseline=baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    print(f"mixture OA {report.modes.get('mixture', {}).get('oa', float('nan')):.4f}  "
          f"oracle OA {report.modes['oracle']['oa']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"grid file not found: {args.grid}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid {args.grid} is not valid JSON: {exc}") from exc
    result = run_ablation(grid, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "ablation.csv", result.to_csv())
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_level(args.level, stream=sys.stdout)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codex", description="Multi-expert domain generalization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory or train container")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "both"), default="both")
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")
    p.add_argument("--baseline", action="store_true", help="also train the single-head baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or container")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", help="baseline checkpoint to include")
    p.add_argument("--tau", type=float, help="mixture temperature (defaults to the training value)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"codex: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ContractError) as exc:
        print(f"codex: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"codex: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
