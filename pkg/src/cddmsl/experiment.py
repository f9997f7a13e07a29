"""Glue between configs, data, training and evaluation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import evalkit
from .config import ExperimentConfig, with_overrides
from .synthdomains import (BuiltDataset, build_auxiliary_domain, build_dataset, load_split,
                           render, sample_scene, scene_seed, split_protocol)
from .training import BURNUP_KEYS, TrainData, TrainState, burn_up, joint_train, train, with_method

log = logging.getLogger(__name__)


@dataclass
class ExperimentData:
    train: TrainData
    targets: dict  # style -> (images tensor, labels)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def build_data(cfg: ExperimentConfig, root) -> BuiltDataset:
    ds = cfg.dataset
    return build_dataset(root, ds.style_specs(), ds.labeled, ds.unlabeled, ds.counts,
                         ds.generator_config(), ds.seed, cfg.eval.protocol,
                         cfg.eval.targets if cfg.eval.protocol == "dg" else None,
                         reverse=cfg.train.bidirectional_stylization,
                         min_style_distance=ds.min_style_distance)


def load_data(cfg: ExperimentConfig, built: BuiltDataset) -> ExperimentData:
    root = built.root
    images, labels = load_split(root, built.labeled)
    by_scene = {r.scene_id: i for i, r in enumerate(built.labeled.records)}
    aux = {}
    fwd = [r for r in built.auxiliary.records if r.labeled]
    for style in sorted({r.style_id for r in fwd}):
        recs = sorted((r for r in fwd if r.style_id == style), key=lambda r: by_scene[r.scene_id])
        m = type(built.auxiliary)("auxiliary", recs)
        aux[style] = load_split(root, m)[0]
    reverse = None
    rev = [r for r in built.auxiliary.records if not r.labeled]
    if rev:
        unl = [r for m in built.unlabeled for r in m.records]
        order = {r.scene_id: i for i, r in enumerate(unl)}
        rev = sorted(rev, key=lambda r: order[r.scene_id])
        reverse = (load_split(root, type(built.auxiliary)("unlabeled_source", unl))[0],
                   load_split(root, type(built.auxiliary)("auxiliary", rev))[0])
    tdata = TrainData.from_arrays(images, labels, aux, reverse)
    targets = {}
    for m in built.targets:
        imgs, labs = load_split(root, m, heldout=True)
        targets[m.style_ids[0]] = (_to_tensor(imgs), labs)
    return ExperimentData(tdata, targets)


def _quantize(img):
    # identical to a PNG round trip
    return (np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).astype(np.float32) / 255.0


def memory_data(cfg: ExperimentConfig) -> ExperimentData:
    """Same samples as build_data + load_data, rendered straight into memory."""
    ds = cfg.dataset
    styles = ds.style_specs()
    gen = ds.generator_config()
    s_l, s_u, tgts = split_protocol(list(styles), ds.labeled, ds.unlabeled, ds.counts, cfg.eval.protocol,
                                    cfg.eval.targets if cfg.eval.protocol == "dg" else None)
    aux_m = build_auxiliary_domain(s_l, [styles[u] for u in ds.unlabeled], s_u, styles[ds.labeled],
                                   cfg.train.bidirectional_stylization)
    cache = {}

    def scene(i):
        if i not in cache:
            cache[i] = sample_scene(scene_seed(ds.seed, i), gen, scene_id=i)
        return cache[i]

    def imgs(records):
        return np.stack([_quantize(render(scene(r.scene_id), styles[r.style_id]).image) for r in records])

    images = imgs(s_l.records)
    labels = [list(scene(r.scene_id).objects) for r in s_l.records]
    aux = {}
    for style in ds.unlabeled:
        aux[style] = imgs([r for r in aux_m.records if r.labeled and r.style_id == style])
    reverse = None
    rev = [r for r in aux_m.records if not r.labeled]
    if rev:
        unl = [r for m in s_u for r in m.records]
        reverse = (imgs(unl), imgs(rev))
    targets = {}
    for m in tgts:
        targets[m.style_ids[0]] = (_to_tensor(imgs(m.records)), [list(scene(r.scene_id).objects) for r in m.records])
    return ExperimentData(TrainData.from_arrays(images, labels, aux, reverse), targets)


def train_experiment(cfg: ExperimentConfig, data: ExperimentData, out_dir=None,
                     resume: Optional[TrainState] = None) -> TrainState:
    log_path = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        log_path = out_dir / "train_log.csv"
        ckpt_dir = out_dir / "checkpoints"
    return train(cfg.train, data.train, log_path, ckpt_dir, resume)


def evaluate(cfg: ExperimentConfig, state: TrainState, data: ExperimentData) -> evalkit.EvalReport:
    sources = [cfg.dataset.labeled, *cfg.dataset.unlabeled]
    missing = sorted(set(cfg.target_styles) - set(data.targets))
    if missing:
        raise evalkit.EvalMismatch(f"no data for target styles {missing}")
    targets = {t: data.targets[t] for t in cfg.target_styles}
    return evalkit.run_protocol(state, cfg.eval.protocol, targets, sources, cfg.method,
                                cfg.train.seed, cfg.eval.score_threshold, cfg.eval.nms_iou)


class BurnupCache:
    """Burn-up states keyed by the settings that determine them."""

    KEYS = BURNUP_KEYS

    def __init__(self):
        self._states = {}

    def key(self, cfg: ExperimentConfig):
        return (cfg.dataset_key(),) + tuple(getattr(cfg.train, k) for k in self.KEYS)

    def get(self, cfg: ExperimentConfig, data: ExperimentData) -> TrainState:
        k = self.key(cfg)
        if k not in self._states:
            self._states[k] = burn_up(cfg.train, data.train)
        return self._states[k]


def run_cell(cfg: ExperimentConfig, data: ExperimentData, cache: Optional[BurnupCache] = None):
    """Train (reusing a cached burn-up when possible) and evaluate one configuration."""
    if cache is None:
        state = burn_up(cfg.train, data.train)
    else:
        state = with_method(cache.get(cfg, data), cfg.train)
    state = joint_train(state, cfg.train, data.train)
    return state, evaluate(cfg, state, data)


def ablation_sweep(base: ExperimentConfig, cells, data: Optional[ExperimentData] = None,
                   cache: Optional[BurnupCache] = None):
    """``cells``: ordered ``[(name, overrides)]``; returns ``[(name, EvalReport)]`` in the same order."""
    cfgs = []
    for i, (name, overrides) in enumerate(cells):
        try:
            cfgs.append((name, with_overrides(base, overrides)))
        except ValueError as exc:
            raise ValueError(f"grid cell {i} ({name!r}) invalid: {exc}") from exc
    data = data if data is not None else memory_data(base)
    cache = cache if cache is not None else BurnupCache()
    out = []
    for name, cfg in cfgs:
        _, report = run_cell(cfg, data, cache)
        out.append((name, report))
    return out


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return copy.deepcopy(cfg)
