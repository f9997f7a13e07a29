import csv
from pathlib import Path
from unittest import mock

import pytest
import yaml

from cddmsl import losses
from cddmsl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_EVAL_MISMATCH, main
from cddmsl.synthdomains import file_checksum

TINY = {
    "dataset": {"counts": {"labeled": 16, "unlabeled": 6, "target": 5}},
    "train": {"burnup_steps": 4, "joint_steps": 4, "batch_size": 4, "lr": 0.01, "checkpoint_every": 3},
}


def _config(tmp_path, name="c.yaml", **extra):
    d = yaml.safe_load(yaml.safe_dump(TINY))
    for k, v in extra.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return str(p)


def _log(run):
    with open(Path(run) / "train_log.csv") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    run = tmp / "run"
    assert main(["build-data", "--config", cfg, "--out", str(run)]) == 0
    assert main(["train", "--config", cfg, "--out", str(run)]) == 0
    return cfg, run


def test_build_data_idempotent_and_sized(tmp_path):
    cfg = _config(tmp_path)
    assert main(["build-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["build-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    manifests = sorted((tmp_path / "a" / "data" / "manifests").iterdir())
    assert manifests
    for m in manifests:
        assert file_checksum(m) == file_checksum(tmp_path / "b" / "data" / "manifests" / m.name)
    from cddmsl.synthdomains import load_dataset
    built = load_dataset(tmp_path / "a" / "data")
    assert len(built.labeled) == 16 and len(built.unlabeled[0]) == 6
    assert [len(t) for t in built.targets] == [5, 5]


def test_seed_flag_changes_data(tmp_path):
    cfg = _config(tmp_path)
    main(["build-data", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["build-data", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "b")])
    a, b = tmp_path / "a" / "data", tmp_path / "b" / "data"
    images = sorted(p.relative_to(a) for p in a.rglob("*.png"))
    assert images and any(file_checksum(a / p) != file_checksum(b / p) for p in images)
    assert yaml.safe_load((tmp_path / "b" / "config.yaml").read_text())["train"]["seed"] == 5


def test_train_log_columns_cddmsl(trained):
    _, run = trained
    rows = _log(run)
    assert [int(r["step"]) for r in rows] == list(range(8))
    joint = [r for r in rows if r["stage"] == "joint"]
    for col in ("l_inst", "l_img", "l_dist"):
        assert any(float(r[col]) != 0 for r in joint), col
    assert (run / "checkpoints" / "LATEST").read_text().strip() == "final.ckpt"


def test_dva_log_has_no_kd(tmp_path):
    cfg = _config(tmp_path, method="dva")
    run = str(tmp_path / "run")
    main(["build-data", "--config", cfg, "--out", run])
    assert main(["train", "--config", cfg, "--out", run]) == 0
    assert all(float(r["l_dist"]) == 0.0 for r in _log(run))
    assert any(float(r["l_inst"]) > 0 for r in _log(run))


def test_resume_continues_without_gaps(trained, tmp_path):
    cfg, run = trained
    full = (run / "train_log.csv").read_text()
    out = tmp_path / "resumed"
    main(["build-data", "--config", cfg, "--out", str(out)])
    # a log that stopped right after the step-3 checkpoint
    lines = full.splitlines()
    (out / "train_log.csv").write_text("\n".join(lines[:4]) + "\n")
    ckpt = run / "checkpoints" / "step_000003.ckpt"
    assert main(["train", "--config", cfg, "--out", str(out), "--resume", str(ckpt)]) == 0
    steps = [int(r["step"]) for r in _log(out)]
    assert steps == list(range(8))
    assert (out / "train_log.csv").read_text() == full
    assert file_checksum(out / "checkpoints" / "final.ckpt") == file_checksum(run / "checkpoints" / "final.ckpt")


def test_eval_is_repeatable(trained):
    cfg, run = trained
    assert main(["eval", "--config", cfg, "--out", str(run)]) == 0
    ev = run / "eval"
    first = {p.name: p.read_bytes() for p in ev.iterdir()}
    assert main(["eval", "--config", cfg, "--out", str(run)]) == 0
    second = {p.name: p.read_bytes() for p in ev.iterdir()}
    assert first == second
    assert {"metrics.tsv", "target_C.tsv", "target_D.tsv", "per_target_map.png", "loss_curves.png"} <= set(first)
    assert len([n for n in first if n.startswith("target_")]) == 2
    assert first["metrics.tsv"].decode().splitlines()[0] == "target\tclass\tap50"
    assert first["per_target_map.png"][:8] == b"\x89PNG\r\n\x1a\n"
    assert b"Software" not in first["per_target_map.png"]


def test_report_delta_stability(trained, tmp_path):
    cfg, run = trained
    main(["eval", "--config", cfg, "--out", str(run)])
    da_cfg = _config(tmp_path, "da.yaml", eval={"protocol": "da"})
    da = tmp_path / "da"
    for cmd in ("build-data", "train", "eval"):
        assert main([cmd, "--config", da_cfg, "--out", str(da)]) == 0
    # DG targets are C, D and the DA target is B: nothing to compare
    assert main(["report", "--da", str(da), "--dg", str(run), "--out", str(tmp_path / "r")]) == EXIT_EVAL_MISMATCH
    dg_b_cfg = _config(tmp_path, "dgb.yaml", dataset={"unlabeled": ["C"]}, eval={"targets": ["B"]})
    dg_b = tmp_path / "dgb"
    for cmd in ("build-data", "train", "eval"):
        assert main([cmd, "--config", dg_b_cfg, "--out", str(dg_b)]) == 0
    assert main(["report", "--da", str(da), "--dg", str(dg_b), "--out", str(tmp_path / "r")]) == 0
    rows = (tmp_path / "r" / "delta_stability.tsv").read_text().splitlines()
    assert rows[0] == "target\tda_map\tdg_map\tdelta"
    t, a, g, d = rows[1].split("\t")
    assert t == "B" and float(d) == pytest.approx(float(a) - float(g), abs=1e-3)
    assert (tmp_path / "r" / "delta_stability.png").exists()


def test_ablate_grid(tmp_path):
    cfg = _config(tmp_path)
    grid = tmp_path / "grid.yaml"
    off = {"use_inst": False, "use_img": False, "use_dist": False}
    grid.write_text(yaml.safe_dump({"cells": [
        {"name": "no_init", "overrides": {"train": {**off, "burnup_steps": 2}}},
        {"name": "source_only", "overrides": {"method": "source_only"}},
        {"name": "img", "overrides": {"train": {"use_inst": False, "use_dist": False}}},
        {"name": "inst", "overrides": {"train": {"use_img": False, "use_dist": False}}},
        {"name": "img_inst", "overrides": {"train": {"use_dist": False}}},
        {"name": "all_off", "overrides": {"train": off}},
    ]}))
    out = tmp_path / "abl"
    assert main(["ablate", "--config", cfg, "--grid", str(grid), "--out", str(out)]) == 0
    rows = [ln.split("\t") for ln in (out / "ablation.tsv").read_text().splitlines()]
    assert rows[0] == ["cell", "C", "D", "mean"]
    assert [r[0] for r in rows[1:]] == ["no_init", "source_only", "img", "inst", "img_inst", "all_off"]
    assert rows[2][1:] == rows[6][1:]
    assert (out / "ablation.png").exists()


@pytest.mark.parametrize("content,code", [
    ({"dataset": {"unlabeled": ["Z"]}}, EXIT_CONFIG),
    ({"train": {"unknown_knob": 1}}, EXIT_CONFIG),
])
def test_config_errors(tmp_path, content, code):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(content))
    assert main(["build-data", "--config", str(p), "--out", str(tmp_path / "x")]) == code


def test_missing_data_and_checkpoint(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == EXIT_DATA
    main(["build-data", "--config", cfg, "--out", str(tmp_path / "d")])
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "d"), "--resume", str(bad)]) == EXIT_DATA


def test_divergence_exit_code(tmp_path):
    cfg = _config(tmp_path)
    run = str(tmp_path / "run")
    main(["build-data", "--config", cfg, "--out", run])
    with mock.patch.object(losses, "total_loss", side_effect=losses.NonFiniteLossError("l_det is not finite")):
        assert main(["train", "--config", cfg, "--out", run]) == EXIT_DIVERGENCE


def test_eval_mismatch_exit_code(trained, tmp_path):
    _, run = trained
    # same training settings, but the DA target B was never rendered as a target split
    da_cfg = _config(tmp_path, "da.yaml", eval={"protocol": "da"})
    assert main(["eval", "--config", da_cfg, "--out", str(run)]) == EXIT_EVAL_MISMATCH


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
