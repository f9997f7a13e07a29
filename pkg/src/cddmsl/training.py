"""Two-stage optimisation: supervised burn-up, then joint consistency training."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import baselines, losses
from .detector import (RPN_WEIGHTS, Detector, FeatureMap, PromptBank, build_prompt_bank,
                       classify_regions, detection_loss, encode_boxes, pool_image,
                       propose_regions, roi_pool, sample_roi_targets, sample_rpn_targets)
from .langspace import ProjectionHead, ReferenceEncoder, V2L, freeze_snapshot
from .synthdomains import CATEGORY_NAMES

log = logging.getLogger(__name__)

METHODS = ("cddmsl", "dva", "caption_pl", "source_only")
LOG_COLUMNS = ("step", "stage", "lr", "l_det", "l_inst", "l_img", "l_dist", "l_total", "omega")
CKPT_MAGIC = b"CDDMSLCK1\n"

# settings that determine the burn-up trajectory (lr decays over the full budget)
BURNUP_KEYS = ("burnup_steps", "joint_steps", "lr", "momentum", "weight_decay", "grad_clip",
               "batch_size", "seed", "oracle_proposals", "oracle_jitter", "num_classes", "gamma",
               "background_weight", "cls_temperature", "pool", "feat_dim", "desc_dim", "v2l_seed",
               "bank_seed", "rpn_batch", "roi_batch", "train_post_nms")


class TrainingDivergence(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    burnup_steps: int = 500
    joint_steps: int = 1500
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    batch_size: int = 8
    omega: float = 0.03
    tau: float = 0.07
    method: str = "cddmsl"
    seed: int = 0
    oracle_proposals: bool = False
    oracle_jitter: int = 4
    bidirectional_stylization: bool = False
    use_inst: bool = True
    use_img: bool = True
    use_dist: bool = True
    symmetric_contrastive: bool = False
    split_projection: bool = False
    inst_per_image: int = 8
    num_classes: int = 4
    gamma: float = 0.5
    background_weight: float = 0.2
    cls_temperature: float = 0.07
    pool: int = 4
    feat_dim: int = 64
    desc_dim: int = 64
    proj_dim: int = 256
    v2l_seed: int = 1234
    bank_seed: int = 0
    codebook_size: int = 32
    codebook_seed: int = 7
    rpn_batch: int = 64
    roi_batch: int = 32
    train_post_nms: int = 48
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.burnup_steps < 0 or self.joint_steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.num_classes <= len(CATEGORY_NAMES):
            raise ValueError("num_classes out of range")

    @property
    def total_steps(self):
        return self.burnup_steps + self.joint_steps

    def loss_weights(self):
        """Which consistency terms are active: (inst, img, dist)."""
        if self.method == "source_only":
            return False, False, False
        if self.method == "dva":
            return self.use_inst, self.use_img, False
        if self.method == "caption_pl":
            return self.use_inst, False, False
        return self.use_inst, self.use_img, self.use_dist and self.omega > 0

    def hash(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("checkpoint_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainData:
    """Tensors for training, all (N, 3, H, W) float32 in [0, 1].

    ``aux`` maps each unlabeled style to renders of the labeled scenes,
    row-aligned with ``images``. ``reverse`` optionally holds
    ``(unlabeled_images, same_scenes_in_labeled_style)``.
    """

    images: torch.Tensor
    boxes: list
    classes: list
    aux: dict = field(default_factory=dict)
    reverse: Optional[tuple] = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty labeled dataset")
        for k, v in self.aux.items():
            if v.shape != self.images.shape:
                raise ValueError(f"auxiliary style {k!r} not aligned with labeled images")

    @property
    def canvas(self):
        return tuple(self.images.shape[2:])

    @classmethod
    def from_arrays(cls, images, labels, aux=None, reverse=None):
        """``images``: (N, H, W, 3) array; ``labels``: per-image ObjectInstance lists."""
        def to_t(a):
            return torch.as_tensor(np.asarray(a, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()

        boxes = [torch.tensor([o.box for o in lab], dtype=torch.float32).reshape(-1, 4) for lab in labels]
        classes = [torch.tensor([o.category for o in lab], dtype=torch.long) for lab in labels]
        aux_t = {k: to_t(v) for k, v in (aux or {}).items()}
        rev = None if reverse is None else (to_t(reverse[0]), to_t(reverse[1]))
        return cls(to_t(images), boxes, classes, aux_t, rev)


@dataclass
class TrainState:
    config: TrainConfig
    detector: Detector
    g: ProjectionHead
    v2l: V2L
    bank: PromptBank
    optimizer: torch.optim.Optimizer
    g_img: Optional[ProjectionHead] = None
    reference: Optional[ReferenceEncoder] = None
    codebook: Optional[baselines.TokenCodebook] = None
    step: int = 0

    @property
    def stage(self):
        return "burnup" if self.step < self.config.burnup_steps else "joint"

    @property
    def burnup_done(self):
        return self.step >= self.config.burnup_steps

    def trainable_modules(self):
        mods = {"detector": self.detector, "g": self.g}
        if self.g_img is not None:
            mods["g_img"] = self.g_img
        return mods


def init_state(config: TrainConfig) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        detector = Detector(config.feat_dim, config.pool)
        g = ProjectionHead(config.desc_dim if config.method != "dva" else config.feat_dim, config.proj_dim)
        g_img = (ProjectionHead(g.in_dim, config.proj_dim) if config.split_projection else None)
    v2l = V2L(config.feat_dim, config.desc_dim, config.pool, seed=config.v2l_seed)
    bank = build_prompt_bank(CATEGORY_NAMES[: config.num_classes], seed=config.bank_seed, dim=config.desc_dim)
    params = list(detector.parameters()) + list(g.parameters())
    if g_img is not None:
        params += list(g_img.parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    codebook = (baselines.make_codebook(config.codebook_size, config.desc_dim, config.codebook_seed)
                if config.method == "caption_pl" else None)
    return TrainState(config, detector, g, v2l, bank, opt, g_img, None, codebook, 0)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def lr_at(config: TrainConfig, step: int) -> float:
    total = max(config.total_steps, 1)
    return config.lr * (1.0 - step / total)


# -- one step ----------------------------------------------------------------------

def supervised_forward(state: TrainState, images, boxes, classes, rng):
    """L_det on a labeled batch; also returns the feature map and contrastive proposals."""
    cfg = state.config
    det = state.detector
    canvas = tuple(images.shape[2:])
    fmap = FeatureMap(det.backbone(images), det.backbone.stride)
    if cfg.oracle_proposals:
        proposals = propose_regions(fmap, det, canvas, mode="oracle", gt_boxes=boxes,
                                    jitter=cfg.oracle_jitter, rng=rng)
        rpn_kw = {}
    else:
        logits, deltas = det.rpn(fmap.tensor)
        proposals = propose_regions(fmap, det, canvas, post_nms=cfg.train_post_nms, rpn_outputs=(logits, deltas))
        anchors = det.anchors(fmap.tensor.shape[2:], fmap.tensor.dtype)
        sel_logits, sel_labels, sel_deltas, sel_targets = [], [], [], []
        for i in range(len(images)):
            idx, lab, pos, gt_pos = sample_rpn_targets(anchors, boxes[i], rng, cfg.rpn_batch)
            sel_logits.append(logits[i, idx])
            sel_labels.append(lab)
            sel_deltas.append(deltas[i, pos])
            sel_targets.append(encode_boxes(anchors[pos], gt_pos, RPN_WEIGHTS))
        rpn_kw = dict(rpn_logits=torch.cat(sel_logits), rpn_labels=torch.cat(sel_labels),
                      rpn_deltas=torch.cat(sel_deltas), rpn_targets=torch.cat(sel_targets))

    rois, targets, pos_masks, matched = [], [], [], []
    for i, (p, _) in enumerate(proposals):
        r, c, m, mg = sample_roi_targets(p, boxes[i], classes[i], cfg.num_classes, rng, cfg.roi_batch)
        rois.append(r)
        targets.append(c)
        pos_masks.append(m)
        matched.append(mg)
    regions = roi_pool(fmap, rois, cfg.pool)
    logits_cls = classify_regions(state.v2l(regions), state.bank, cfg.cls_temperature)
    pos = torch.cat(pos_masks)
    box_pred = det.box_head(regions[pos])
    box_tgt = encode_boxes(torch.cat(rois)[pos], torch.cat(matched))
    l_det, comps = detection_loss(logits_cls, torch.cat(targets), box_pred, box_tgt,
                                  gamma=cfg.gamma, background_weight=cfg.background_weight, **rpn_kw)
    contrast_props = [p[: cfg.inst_per_image].detach() for p, _ in proposals]
    return l_det, comps, fmap, contrast_props


def _embed(state: TrainState, regions, image_level=False):
    cfg = state.config
    g = state.g_img if (image_level and state.g_img is not None) else state.g
    if cfg.method == "dva":
        return g(baselines.visual_tokens(regions))
    return g(state.v2l(regions))


def consistency_terms(state: TrainState, fmap, fmap_t, props, images):
    """(l_inst, l_img, l_dist) tensors for one joint step; inactive terms are exact zeros."""
    cfg = state.config
    use_inst, use_img, use_dist = cfg.loss_weights()
    zero = fmap.tensor.sum() * 0.0
    l_inst = l_img = l_dist = zero
    if use_inst and sum(len(p) for p in props) > 0:
        r = roi_pool(fmap, props, cfg.pool)
        r_t = roi_pool(fmap_t, props, cfg.pool)
        if cfg.method == "caption_pl":
            with torch.no_grad():
                z_o = F.normalize(state.v2l(r), dim=1)
            z_s = F.normalize(state.v2l(r_t), dim=1)
            l_inst = baselines.caption_pl_from_features(z_o, z_s, state.codebook, cfg.tau)
        else:
            batch = losses.PairBatch(_embed(state, r), _embed(state, r_t))
            if cfg.method == "dva":
                l_inst = baselines.dva_loss(batch, cfg.tau, cfg.symmetric_contrastive)
            else:
                l_inst = losses.instance_contrastive(batch, cfg.tau, cfg.symmetric_contrastive)
    pooled = None
    if use_img or use_dist:
        pooled = pool_image(fmap, cfg.pool)
    if use_img:
        pooled_t = pool_image(fmap_t, cfg.pool)
        batch = losses.PairBatch(_embed(state, pooled, True), _embed(state, pooled_t, True))
        if cfg.method == "dva":
            l_img = baselines.dva_loss(batch, cfg.tau, cfg.symmetric_contrastive)
        else:
            l_img = losses.image_contrastive(batch, cfg.tau, cfg.symmetric_contrastive)
    if use_dist:
        live = state.v2l(pooled)
        with torch.no_grad():
            ref = state.v2l(pool_image(FeatureMap(state.reference(images), fmap.stride), cfg.pool))
        l_dist = losses.kd_distance(live, ref)
    return l_inst, l_img, l_dist


def _reverse_image_term(state: TrainState, data: TrainData, rng):
    cfg = state.config
    unl, lab_style = data.reverse
    idx = np.sort(rng.choice(len(unl), min(cfg.batch_size, len(unl)), replace=False))
    f_u = pool_image(FeatureMap(state.detector.backbone(unl[idx]), 8), cfg.pool)
    f_l = pool_image(FeatureMap(state.detector.backbone(lab_style[idx]), 8), cfg.pool)
    batch = losses.PairBatch(_embed(state, f_l, True), _embed(state, f_u, True))
    return losses.image_contrastive(batch, cfg.tau, cfg.symmetric_contrastive)


def train_step(state: TrainState, data: TrainData) -> losses.LossReport:
    cfg = state.config
    rng = step_rng(cfg.seed, state.step)
    n = len(data.images)
    idx = np.sort(rng.choice(n, min(cfg.batch_size, n), replace=False))
    images = data.images[idx]
    boxes = [data.boxes[i] for i in idx]
    classes = [data.classes[i] for i in idx]
    joint = state.burnup_done
    state.detector.train()

    l_det, comps, fmap, props = supervised_forward(state, images, boxes, classes, rng)
    zero = l_det * 0.0
    l_inst = l_img = l_dist = zero
    if joint and any(cfg.loss_weights()):
        if not data.aux:
            raise ValueError("joint training needs an auxiliary (stylized) domain")
        styles = sorted(data.aux)
        pick = rng.integers(0, len(styles), len(idx))
        stylized = torch.stack([data.aux[styles[p]][i] for p, i in zip(pick, idx)])
        fmap_t = FeatureMap(state.detector.backbone(stylized), fmap.stride)
        l_inst, l_img, l_dist = consistency_terms(state, fmap, fmap_t, props, images)
        if cfg.bidirectional_stylization and data.reverse is not None and cfg.loss_weights()[1]:
            l_img = 0.5 * (l_img + _reverse_image_term(state, data, rng))
    omega = cfg.omega if cfg.loss_weights()[2] else 0.0
    try:
        total, report = losses.total_loss(l_det, l_inst, l_img, l_dist, omega)
    except losses.NonFiniteLossError as exc:
        detail = {k: float(v.detach()) for k, v in comps.items()}
        raise TrainingDivergence(f"step {state.step} ({'joint' if joint else 'burnup'}): {exc}; "
                                 f"components {detail}") from exc

    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(cfg, state.step)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        params = [p for m in state.trainable_modules().values() for p in m.parameters()]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return report


# -- stages ----------------------------------------------------------------------

class TrainLog:
    """CSV training log; one row per step."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                self.path.write_text(",".join(LOG_COLUMNS) + "\n")

    def truncate_after(self, step):
        """Drop rows with step >= ``step`` (used on resume)."""
        if not self.path or not self.path.exists():
            return
        lines = self.path.read_text().splitlines()
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[0]) < step]
        self.path.write_text("\n".join(kept) + "\n")

    def append(self, step, stage, lr, report: losses.LossReport):
        row = [step, stage, f"{lr:.8g}"] + [f"{v:.8g}" for v in report.row()] + [f"{report.omega:.8g}"]
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)


def _run(state, data, until, log_to: Optional[TrainLog], ckpt_dir=None):
    cfg = state.config
    while state.step < until:
        step, stage, lr = state.step, state.stage, lr_at(cfg, state.step)
        report = train_step(state, data)
        if log_to is not None:
            log_to.append(step, stage, lr, report)
        if ckpt_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(ckpt_dir) / f"step_{state.step:06d}.ckpt")
        if step % 100 == 0:
            log.info("step %d %s l_det=%.4f l_inst=%.4f l_img=%.4f l_dist=%.4f", step, stage,
                     report.l_det, report.l_inst, report.l_img, report.l_dist)
    return state


def burn_up(config: TrainConfig, data: TrainData, log_to: Optional[TrainLog] = None,
            state: Optional[TrainState] = None, ckpt_dir=None) -> TrainState:
    """Supervised warm-up for ``burnup_steps``; ends by snapshotting the KD reference."""
    if len(data.images) == 0:
        raise ValueError("empty labeled dataset")
    state = state if state is not None else init_state(config)
    _run(state, data, config.burnup_steps, log_to, ckpt_dir)
    if state.reference is None:
        state.reference = snapshot_reference(state)
    return state


def snapshot_reference(state: TrainState) -> ReferenceEncoder:
    if not state.burnup_done:
        raise RuntimeError("reference snapshot requested before burn-up finished")
    return freeze_snapshot(state.detector.backbone)


def joint_train(state: TrainState, config: TrainConfig, data: TrainData,
                log_to: Optional[TrainLog] = None, ckpt_dir=None) -> TrainState:
    """Joint supervised + consistency training for ``joint_steps``."""
    if not state.burnup_done or state.reference is None:
        raise RuntimeError("joint training requires a completed burn-up")
    if any(config.loss_weights()) and not data.aux:
        raise ValueError("missing auxiliary domain")
    return _run(state, data, config.total_steps, log_to, ckpt_dir)


def with_method(state: TrainState, config: TrainConfig) -> TrainState:
    """Copy a burn-up state for a joint stage under a different method/toggles.

    Only joint-stage settings may differ; the burn-up itself must match.
    """
    import copy

    base = state.config
    for name in BURNUP_KEYS:
        if getattr(base, name) != getattr(config, name):
            raise ValueError(f"burn-up state incompatible with config: {name} differs")
    if state.step != base.burnup_steps:
        raise ValueError("can only re-target a state at the end of burn-up")
    fresh = init_state(config)
    fresh.detector.load_state_dict(state.detector.state_dict())
    if fresh.g.in_dim == state.g.in_dim:
        fresh.g.load_state_dict(state.g.state_dict())
    fresh.optimizer.load_state_dict(_remap_optimizer(state, fresh))
    fresh.reference = copy.deepcopy(state.reference)
    fresh.step = state.step
    return fresh


def _remap_optimizer(src: TrainState, dst: TrainState):
    # momentum buffers exist only for detector params after burn-up; positions match
    sd = src.optimizer.state_dict()
    n_det = len(list(src.detector.parameters()))
    out = dst.optimizer.state_dict()
    out["state"] = {k: v for k, v in sd["state"].items() if k < n_det}
    return out


def train(config: TrainConfig, data: TrainData, log_path=None, ckpt_dir=None,
          resume: Optional[TrainState] = None) -> TrainState:
    tlog = TrainLog(log_path)
    if resume is not None:
        tlog.truncate_after(resume.step)
        state = resume
    else:
        state = None
    state = burn_up(config, data, tlog, state, ckpt_dir)
    return joint_train(state, config, data, tlog, ckpt_dir)


# -- checkpoints -------------------------------------------------------------------

def state_tensors(state: TrainState) -> dict:
    out = {}
    for ns, mod in (("detector", state.detector), ("g", state.g), ("g_img", state.g_img),
                    ("v2l", state.v2l), ("reference", state.reference)):
        if mod is None:
            continue
        for k, v in mod.state_dict().items():
            out[f"{ns}.{k}"] = v.detach().clone()
    out["bank.weights"] = state.bank.weights.clone()
    if state.codebook is not None:
        out["codebook.codes"] = state.codebook.codes.clone()
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = state.optimizer.state_dict()
    # JSON metadata plus a flat tensor dict keeps the pickle free of shared Python
    # objects, so equal states serialize to equal bytes
    meta = {"format": 1, "config": dataclasses.asdict(state.config), "config_hash": state.config.hash(),
            "step": state.step, "param_groups": opt["param_groups"]}
    payload = {
        "meta": json.dumps(meta, sort_keys=True),
        "tensors": state_tensors(state),
        "optimizer": {f"{i}.{name}": t.detach().clone() for i, buf in sorted(opt["state"].items())
                      for name, t in sorted(buf.items())},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest().encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + digest + b"\n" + body)
    tmp.replace(path)
    return path


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(CKPT_MAGIC):]
    digest, _, body = rest.partition(b"\n")
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    payload = torch.load(io.BytesIO(body), weights_only=True)
    meta = json.loads(payload["meta"])
    stored = TrainConfig(**meta["config"])
    if config is not None and config.hash() != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash {meta['config_hash']} does not match {config.hash()}")
    state = init_state(stored)
    tensors = payload["tensors"]

    def sub(ns):
        p = ns + "."
        return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}

    state.detector.load_state_dict(sub("detector"))
    state.g.load_state_dict(sub("g"))
    if state.g_img is not None:
        state.g_img.load_state_dict(sub("g_img"))
    v2l_sd = sub("v2l")
    for k, v in state.v2l.state_dict().items():
        if not torch.equal(v, v2l_sd[k]):
            raise CheckpointError(f"{path}: stored v2l differs from the seeded mapper ({k})")
    ref = sub("reference")
    if ref:
        state.reference = freeze_snapshot(state.detector.backbone)
        state.reference.load_state_dict(ref)
    opt_state = {}
    for key, t in payload["optimizer"].items():
        i, name = key.split(".", 1)
        opt_state.setdefault(int(i), {})[name] = t
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    state.step = int(meta["step"])
    return state
