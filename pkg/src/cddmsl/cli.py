"""Command-line entry point: ``cddmsl {build-data,train,eval,ablate,report}``.

Run layout under ``--out`` (default: the config's ``output_dir``)::

    config.yaml             resolved config used by every later command
    data/                   images, labels, held-out target labels, manifests
    train_log.csv           one row per optimisation step
    checkpoints/            periodic and final checkpoints, LATEST pointer
    eval/metrics.tsv        target, class, ap50 (points)
    eval/target_<S>.tsv     per-target table
    eval/*.png              loss curves and per-target bars
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from . import evalkit, experiment, plots
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .synthdomains import DataError, load_dataset
from .training import CheckpointError, TrainingDivergence, load_checkpoint, save_checkpoint

log = logging.getLogger("cddmsl")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGENCE = 5
EXIT_EVAL_MISMATCH = 6

FINAL_CKPT = "final.ckpt"


def _resolve(args) -> tuple:
    """(config, run directory) with ``--seed`` applied to both the data and the trainer."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, {"dataset": {"seed": args.seed}, "train": {"seed": args.seed}})
    out = Path(args.out or cfg.output_dir)
    return cfg, out


def _dump_config(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))


def _plain(obj):
    # tuples -> lists so the YAML stays safe_load-able
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _load_data(cfg, out: Path) -> experiment.ExperimentData:
    root = out / "data"
    if not (root / "manifests").is_dir():
        raise DataError(f"no dataset under {root}; run build-data first")
    return experiment.load_data(cfg, load_dataset(root))


def cmd_build_data(args) -> int:
    cfg, out = _resolve(args)
    _dump_config(cfg, out)
    built = experiment.build_data(cfg, out / "data")
    sizes = ", ".join(f"{m.role}={len(m)}" for m in [built.labeled, *built.unlabeled, built.auxiliary, *built.targets])
    print(f"built dataset in {out / 'data'}: {sizes}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    _dump_config(cfg, out)
    data = _load_data(cfg, out)
    resume = load_checkpoint(args.resume, cfg.train) if args.resume else None
    if resume is not None:
        print(f"resuming from {args.resume} at step {resume.step}")
    state = experiment.train_experiment(cfg, data, out, resume)
    ckpt = save_checkpoint(state, out / "checkpoints" / FINAL_CKPT)
    (out / "checkpoints" / "LATEST").write_text(ckpt.name + "\n")
    print(f"trained {cfg.method} for {state.step} steps; checkpoint {ckpt}")
    return EXIT_OK


def _checkpoint_path(args, out: Path) -> Path:
    if args.resume:
        return Path(args.resume)
    latest = out / "checkpoints" / "LATEST"
    if not latest.exists():
        raise DataError(f"no checkpoint under {out / 'checkpoints'}; run train first")
    return out / "checkpoints" / latest.read_text().strip()


def _write_table(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_eval(args) -> int:
    cfg, out = _resolve(args)
    data = _load_data(cfg, out)
    state = load_checkpoint(_checkpoint_path(args, out), cfg.train)
    report = experiment.evaluate(cfg, state, data)
    ev = out / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    (ev / "metrics.tsv").write_text(evalkit.format_metrics(report))
    for target, rep in sorted(report.per_target.items()):
        _write_table(ev / f"target_{target}.tsv", ["class", "ap50"],
                     [(c, f"{100 * v:.4f}") for _, c, v in rep.rows()])
    plots.per_target_bars({t: 100 * r.map for t, r in report.per_target.items()},
                          ev / "per_target_map.png", title=f"{cfg.method} ({cfg.eval.protocol})")
    train_log = out / "train_log.csv"
    if train_log.exists():
        plots.loss_curves(train_log, ev / "loss_curves.png")
    print(evalkit.format_metrics(report), end="")
    return EXIT_OK


def _read_grid(path) -> list:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("cells"), list):
        raise ConfigError(f"{path}: grid needs a 'cells' list of {{name, overrides}}")
    cells = []
    for i, cell in enumerate(raw["cells"]):
        if not isinstance(cell, dict) or "name" not in cell:
            raise ConfigError(f"{path}: cells[{i}] needs a name")
        unknown = sorted(set(cell) - {"name", "overrides"})
        if unknown:
            raise ConfigError(f"{path}: cells[{i}] has unknown key(s) {unknown}")
        cells.append((str(cell["name"]), cell.get("overrides") or {}))
    base = raw.get("base") or {}
    return cells, base


def cmd_ablate(args) -> int:
    cfg, out = _resolve(args)
    cells, base_over = _read_grid(args.grid)
    if base_over:
        cfg = with_overrides(cfg, base_over)
    try:
        results = experiment.ablation_sweep(cfg, cells)
    except ValueError as exc:
        if isinstance(exc, (evalkit.EvalMismatch, DataError)):
            raise
        raise ConfigError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    table = evalkit.ablation_table(results)
    (out / "ablation.tsv").write_text(table)
    plots.ablation_bars(results, out / "ablation.png")
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    """Delta-stability per shared target from a DA run and a DG run."""
    da = evalkit.read_metrics(Path(args.da) / "eval" / "metrics.tsv")
    dg = evalkit.read_metrics(Path(args.dg) / "eval" / "metrics.tsv")
    shared = sorted({t for t, c in da if c == "mAP" and t != "mean"} & {t for t, c in dg if c == "mAP"})
    if not shared:
        raise evalkit.EvalMismatch("DA and DG runs share no evaluated target style")
    rows = [(t, da[(t, "mAP")], dg[(t, "mAP")], evalkit.delta_stability(da[(t, "mAP")], dg[(t, "mAP")]))
            for t in shared]
    out = Path(args.out or ".")
    _write_table(out / "delta_stability.tsv", ["target", "da_map", "dg_map", "delta"],
                 [(t, f"{a:.4f}", f"{g:.4f}", f"{d:.4f}") for t, a, g, d in rows])
    plots.delta_bars({t: d for t, _, _, d in rows}, out / "delta_stability.png")
    for t, a, g, d in rows:
        print(f"{t}\tDA {a:.2f}\tDG {g:.2f}\tdelta {d:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cddmsl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment YAML")
            sp.add_argument("--seed", type=int, default=None, help="overrides dataset and train seeds")
        sp.add_argument("--out", default=None, help="run directory (default: config output_dir)")

    common(sub.add_parser("build-data", help="render and write the synthetic dataset"))
    sp = sub.add_parser("train", help="burn-up then joint training")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp = sub.add_parser("eval", help="evaluate a checkpoint, write metrics and plots")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to evaluate (default: LATEST)")
    sp = sub.add_parser("ablate", help="train and evaluate every cell of a grid")
    common(sp)
    sp.add_argument("--grid", required=True, help="grid YAML with a 'cells' list")
    sp = sub.add_parser("report", help="delta-stability table from a DA run and a DG run")
    common(sp, config=False)
    sp.add_argument("--da", required=True, help="run directory evaluated under the DA protocol")
    sp.add_argument("--dg", required=True, help="run directory evaluated under the DG protocol")
    return p


COMMANDS = {"build-data": cmd_build_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except evalkit.EvalMismatch as exc:
        print(f"evaluation mismatch: {exc}", file=sys.stderr)
        return EXIT_EVAL_MISMATCH
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
