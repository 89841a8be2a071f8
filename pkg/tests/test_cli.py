import json

import pytest

from codexdg.cli import main
from codexdg.model import load_bundle
from codexdg.synthbench import Dataset
from codexdg.verify import tiny_config


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(tiny_config().to_json())
    return path


@pytest.fixture
def data_dir(tmp_path, cfg_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_gen_data_writes_disjoint_splits(data_dir, cfg_path, tmp_path):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    split = manifest["split"]
    train, test = set(split["train_domains"]), set(split["test_domains"])
    assert not train & test and not train & set(split["val_domains"])
    assert set(Dataset.load(data_dir / "test.cdxd").domains) == test
    again = tmp_path / "again"
    main(["gen-data", "--config", str(cfg_path), "--out", str(again)])
    for name in ("train.cdxd", "val.cdxd", "test.cdxd", "manifest.json"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "config" in capsys.readouterr().err


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_stage1_only(data_dir, cfg_path, tmp_path):
    out = tmp_path / "s1"
    assert main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out), "--stage", "1"]) == 0
    assert (out / "stage1.cdxc").exists() and not (out / "stage2.cdxc").exists()
    assert load_bundle(out / "stage1.cdxc").stage == "stage1"


def test_resume_matches_uninterrupted(data_dir, cfg_path, tmp_path):
    full, part, resumed = tmp_path / "full", tmp_path / "part", tmp_path / "resumed"
    main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(full)])
    main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(part), "--stage", "1"])
    code = main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(resumed),
                 "--resume", str(part / "stage1.cdxc")])
    assert code == 0
    assert (resumed / "stage2.cdxc").read_bytes() == (full / "stage2.cdxc").read_bytes()


def test_resume_from_stage2_rejected(data_dir, cfg_path, tmp_path):
    out = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out)])
    code = main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(tmp_path / "x"),
                 "--resume", str(out / "stage2.cdxc")])
    assert code == 3


def test_eval_writes_reports(data_dir, cfg_path, tmp_path, capsys):
    ckpt, ev = tmp_path / "ckpt", tmp_path / "eval"
    main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(ckpt), "--baseline"])
    code = main(["eval", "--checkpoint", str(ckpt / "stage2.cdxc"), "--data", str(data_dir), "--out", str(ev),
                 "--baseline", str(ckpt / "baseline.cdxc")])
    assert code == 0
    report = json.loads((ev / "report.json").read_text())
    assert {"mixture", "oracle", "baseline", "argmax_head", "uniform_mixture"} <= set(report["modes"])
    assert report["config_hash"] == tiny_config().hash()
    assert (ev / "report.csv").read_text().startswith("mode,head,domain_id,miou,oa")
    assert "oracle OA" in capsys.readouterr().out
    assert "seconds" not in (ckpt / "train_log.json").read_text()
    assert json.loads((ckpt / "timings.json").read_text())["stage1"]


def test_malformed_checkpoint_exits_3(data_dir, tmp_path):
    bad = tmp_path / "bad.cdxc"
    bad.write_bytes(b"CDXC garbage")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "e")]) == 3


def test_missing_dataset_exits_3(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "none.cdxd"),
                 "--out", str(tmp_path / "o")]) == 3


def test_ablate(data_dir, cfg_path, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"lambda_mix": [0.0, 1.0]}))
    assert main(["ablate", "--config", str(cfg_path), "--grid", str(grid), "--out", str(tmp_path / "ab")]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    grid.write_text(json.dumps({"lambda_mix": [-1]}))
    assert main(["ablate", "--config", str(cfg_path), "--grid", str(grid), "--out", str(tmp_path / "ab")]) == 2


def test_verify_fast_level(capsys):
    import time

    start = time.perf_counter()
    assert main(["verify", "--level", "fast"]) == 0
    assert time.perf_counter() - start < 60
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 8 and "8/8 checks passed" in out
