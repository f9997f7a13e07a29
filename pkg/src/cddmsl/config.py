"""Experiment configuration: YAML/JSON file -> validated dataclasses.

Schema (every key optional, unknown keys rejected)::

    method: cddmsl | dva | caption_pl | source_only
    output_dir: runs/example
    dataset:
      seed: 0
      styles: {A: {}, B: {channel_perm: [1, 2, 0], ...}, ...}   # default: four built-in styles
      labeled: A
      unlabeled: [B]
      counts: {labeled: 400, unlabeled: 100, target: 100}
      generator: {canvas: [96, 96], num_categories: 4, objects: [1, 4],
                  min_box: 12, max_box: 36, color_bias: 0.8, color_jitter: 0.08}
      min_style_distance: 0.05
    train: <any TrainConfig field>
    eval:
      protocol: dg | da
      targets: [C, D]          # DG only; default = every non-source style
      score_threshold: 0.05
      nms_iou: 0.5
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .synthdomains import DEFAULT_STYLES, DataError, GeneratorConfig, StyleSpec
from .training import METHODS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    seed: int = 0
    styles: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_STYLES))
    labeled: str = "A"
    unlabeled: list = field(default_factory=lambda: ["B"])
    counts: dict = field(default_factory=lambda: {"labeled": 400, "unlabeled": 100, "target": 100})
    generator: dict = field(default_factory=dict)
    min_style_distance: float = 0.05

    def style_specs(self):
        return {k: StyleSpec(k, dict(v or {})) for k, v in self.styles.items()}

    def generator_config(self):
        g = dict(self.generator)
        for k in ("canvas", "objects"):
            if k in g:
                g[k] = tuple(g[k])
        return GeneratorConfig(**g)


@dataclass
class EvalConfig:
    protocol: str = "dg"
    targets: Optional[list] = None
    score_threshold: float = 0.05
    nms_iou: float = 0.5


@dataclass
class ExperimentConfig:
    method: str = "cddmsl"
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def target_styles(self):
        if self.eval.protocol == "da":
            return list(self.dataset.unlabeled)
        if self.eval.targets is not None:
            return list(self.eval.targets)
        sources = {self.dataset.labeled, *self.dataset.unlabeled}
        return [s for s in self.dataset.styles if s not in sources]

    def to_dict(self):
        return dataclasses.asdict(self)

    def dataset_key(self):
        """Hash of everything that determines the rendered data."""
        d = {"dataset": dataclasses.asdict(self.dataset), "protocol": self.eval.protocol,
             "targets": self.target_styles, "reverse": self.train.bidirectional_stylization}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


def _known(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(data, cls, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - _known(cls))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(where + '.' + k for k in unknown)}")


def from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    _check_keys(data, ExperimentConfig, "config")
    ds_raw = data.get("dataset", {}) or {}
    _check_keys(ds_raw, DatasetConfig, "dataset")
    tr_raw = data.get("train", {}) or {}
    _check_keys(tr_raw, TrainConfig, "train")
    ev_raw = data.get("eval", {}) or {}
    _check_keys(ev_raw, EvalConfig, "eval")

    method = data.get("method", tr_raw.get("method", "cddmsl"))
    if "method" in tr_raw and tr_raw["method"] != method:
        raise ConfigError(f"train.method {tr_raw['method']!r} conflicts with method {method!r}")
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {list(METHODS)}, got {method!r}")
    tr_raw["method"] = method

    ds = DatasetConfig(**ds_raw)
    counts = dict(DatasetConfig().counts)
    unknown = sorted(set(ds.counts) - set(counts))
    if unknown:
        raise ConfigError(f"dataset.counts: unknown key(s) {unknown}")
    counts.update(ds.counts)
    ds.counts = counts
    gen_fields = _known(GeneratorConfig)
    unknown = sorted(set(ds.generator) - gen_fields)
    if unknown:
        raise ConfigError(f"dataset.generator: unknown key(s) {unknown}")
    if isinstance(ds.unlabeled, str):
        ds.unlabeled = [ds.unlabeled]
    if not isinstance(ds.styles, dict) or not ds.styles:
        raise ConfigError("dataset.styles: need a non-empty mapping of style definitions")
    if ds.labeled not in ds.styles:
        raise ConfigError(f"dataset.labeled: style {ds.labeled!r} is not defined in dataset.styles")
    for i, s in enumerate(ds.unlabeled):
        if s not in ds.styles:
            raise ConfigError(f"dataset.unlabeled[{i}]: style {s!r} is not defined in dataset.styles")
    try:
        ds.style_specs()
        gen = ds.generator_config()
    except (DataError, TypeError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc

    ev = EvalConfig(**ev_raw)
    if ev.protocol not in ("dg", "da"):
        raise ConfigError(f"eval.protocol: must be 'dg' or 'da', got {ev.protocol!r}")
    for i, s in enumerate(ev.targets or []):
        if s not in ds.styles:
            raise ConfigError(f"eval.targets[{i}]: style {s!r} is not defined in dataset.styles")

    if "num_classes" not in tr_raw:
        tr_raw["num_classes"] = gen.num_categories
    elif tr_raw["num_classes"] != gen.num_categories:
        raise ConfigError("train.num_classes must equal dataset.generator.num_categories")
    try:
        tr = TrainConfig(**tr_raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from exc

    cfg = ExperimentConfig(method, str(data.get("output_dir", "runs/default")), ds, tr, ev)
    if ev.protocol == "dg":
        sources = {ds.labeled, *ds.unlabeled}
        overlap = sorted(set(cfg.target_styles) & sources)
        if overlap:
            raise ConfigError(f"eval.targets: DG targets overlap source styles {overlap}")
        if not cfg.target_styles:
            raise ConfigError("eval.targets: no target styles left for DG evaluation")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data or {})


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """New config with nested overrides applied, e.g. ``{"train": {"use_dist": False}}``."""
    d = cfg.to_dict()
    d["train"].pop("method", None)
    d["train"].pop("num_classes", None)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(d.get(k), dict) and k != "styles":
            d[k].update(v)
        else:
            d[k] = v
    return from_dict(d)
