"""IoU matching, AP@0.5 / mAP, DG/DA protocols, ablation sweeps and delta-stability.

Matching follows the VOC convention: detections are visited in descending
confidence (ties keep input order); each detection takes the highest-IoU GT
box of its class in the same image and is a true positive only if that IoU
reaches the threshold and the box is still unmatched. AP integrates the
all-points precision envelope over recall.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class EvalMismatch(ValueError):
    """Protocol, manifest or class sets do not line up."""


def _check_box(b):
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ValueError(f"degenerate box {tuple(b)}")


def iou(a, b) -> float:
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class MatchResult:
    tp: list  # per detection (sorted order), bool
    matched_gt: list  # per detection, (image_id, gt index) or None
    gt_counts: dict  # image_id -> number of GT boxes of the class
    order: list  # input indices in visiting order

    @property
    def num_gt(self):
        return sum(self.gt_counts.values())


def match_detections(detections, ground_truth, class_id, iou_threshold=0.5) -> MatchResult:
    """``detections``: iterable of ``(image_id, box, category, score)``;
    ``ground_truth``: ``{image_id: [(box, category), ...]}``."""
    dets = [(i, d) for i, d in enumerate(detections) if d[2] == class_id]
    order = sorted(range(len(dets)), key=lambda k: -dets[k][1][3])  # stable
    gts = {img: [g[0] for g in objs if g[1] == class_id] for img, objs in ground_truth.items()}
    used = {img: [False] * len(b) for img, b in gts.items()}
    tp, matched = [], []
    for k in order:
        img, box, _, _ = dets[k][1]
        best, best_j = -1.0, None
        for j, g in enumerate(gts.get(img, ())):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= iou_threshold and not used[img][best_j]:
            used[img][best_j] = True
            tp.append(True)
            matched.append((img, best_j))
        else:
            tp.append(False)
            matched.append(None)
    return MatchResult(tp, matched, {img: len(b) for img, b in gts.items()}, [dets[k][0] for k in order])


def precision_recall(match: MatchResult):
    npos = match.num_gt
    tps = np.cumsum(np.array(match.tp, dtype=np.int64))
    ranks = np.arange(1, len(match.tp) + 1)
    precision = [float(t) / float(r) for t, r in zip(tps, ranks)]
    recall = [float(t) / float(npos) for t in tps] if npos else [0.0] * len(tps)
    return precision, recall


def ap_from_pr(precision: Sequence[float], recall: Sequence[float]) -> float:
    """All-points interpolated area under the PR curve."""
    if not precision:
        return 0.0
    envelope = list(precision)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    terms, prev = [], 0.0
    for r, p in zip(recall, envelope):
        if r > prev:
            terms.append((r - prev) * p)
            prev = r
    return math.fsum(terms)


def average_precision(detections, ground_truth, class_id, iou_threshold=0.5,
                      classes: Optional[Sequence[int]] = None) -> float:
    if classes is not None and class_id not in classes:
        raise EvalMismatch(f"unknown class id {class_id}")
    m = match_detections(detections, ground_truth, class_id, iou_threshold)
    if m.num_gt == 0:
        return 0.0
    return ap_from_pr(*precision_recall(m))


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    protocol: dict = field(default_factory=dict)
    per_target: dict = field(default_factory=dict)  # target -> EvalReport

    def rows(self):
        """(target, class, value) rows: per class, then the mAP row."""
        target = self.protocol.get("target", "all")
        out = [(target, str(c), ap) for c, ap in sorted(self.per_class_ap.items())]
        out.append((target, "mAP", self.map))
        return out


def map50(detections_by_image: dict, gt_by_image: dict, classes: Sequence[int],
          iou_threshold: float = 0.5, protocol: Optional[dict] = None) -> EvalReport:
    """Unweighted mean of per-class AP over classes present in the GT.

    ``detections_by_image``: ``{image_id: [Detection-like with box/category/confidence]}``;
    ``gt_by_image``: ``{image_id: [ObjectInstance-like with box/category]}``.
    """
    if set(detections_by_image) - set(gt_by_image):
        raise EvalMismatch("detections reference images without ground truth")
    gt = {img: [(tuple(float(v) for v in o.box), o.category) for o in objs] for img, objs in gt_by_image.items()}
    if not any(gt.values()):
        raise EvalMismatch("no ground truth at all")
    flat = [(img, tuple(d.box), d.category, d.confidence)
            for img in sorted(detections_by_image) for d in detections_by_image[img]]
    present = sorted({c for objs in gt.values() for _, c in objs})
    unknown = sorted({c for objs in gt.values() for _, c in objs} - set(classes))
    if unknown:
        raise EvalMismatch(f"ground truth uses unknown classes {unknown}")
    aps = {c: average_precision(flat, gt, c, iou_threshold) for c in present}
    m = math.fsum(aps.values()) / len(aps)
    return EvalReport(aps, m, dict(protocol or {}))


def delta_stability(da_map: float, dg_map: float) -> float:
    return da_map - dg_map


# -- protocols -----------------------------------------------------------------------

def run_protocol(state, protocol: str, targets: dict, sources: Sequence[str] = (),
                 method: str = "", seed: int = 0, score_threshold: float = 0.05,
                 nms_iou: float = 0.5) -> EvalReport:
    """Evaluate a trained state on each target style.

    ``targets`` maps style -> ``(images (N, 3, H, W) tensor, labels)``. DG
    targets must not be source styles; DA targets must be unlabeled sources.
    """
    from .detector import infer

    sources = list(sources)
    if protocol not in ("dg", "da"):
        raise EvalMismatch(f"unknown protocol {protocol!r}")
    for t in targets:
        if protocol == "dg" and t in sources:
            raise EvalMismatch(f"DG target {t!r} overlaps the source styles")
        if protocol == "da" and sources and t not in sources[1:]:
            raise EvalMismatch(f"DA target {t!r} is not an unlabeled source")
    classes = list(range(state.bank.num_classes))
    per_target = {}
    for style in sorted(targets):
        images, labels = targets[style]
        dets = infer(images, state.detector, state.v2l, state.bank, score_threshold, nms_iou,
                     state.config.cls_temperature)
        per_target[style] = map50({i: d for i, d in enumerate(dets)},
                                  {i: lab for i, lab in enumerate(labels)}, classes,
                                  protocol={"protocol": protocol, "target": style, "method": method,
                                            "seed": seed, "sources": sources})
    if not per_target:
        raise EvalMismatch("no targets to evaluate")
    agg_classes = sorted({c for r in per_target.values() for c in r.per_class_ap})
    agg_ap = {c: math.fsum(r.per_class_ap[c] for r in per_target.values() if c in r.per_class_ap)
              / sum(c in r.per_class_ap for r in per_target.values()) for c in agg_classes}
    agg = math.fsum(r.map for r in per_target.values()) / len(per_target)
    return EvalReport(agg_ap, agg, {"protocol": protocol, "target": "mean", "method": method,
                                    "seed": seed, "sources": sources, "targets": sorted(targets)},
                      per_target)


def format_metrics(report: EvalReport) -> str:
    """Tab-separated metrics: header, one row per (target, class), then aggregate rows."""
    lines = ["target\tclass\tap50"]
    for t in sorted(report.per_target):
        for target, cls, v in report.per_target[t].rows():
            lines.append(f"{target}\t{cls}\t{100 * v:.4f}")
    for target, cls, v in report.rows():
        lines.append(f"{target}\t{cls}\t{100 * v:.4f}")
    return "\n".join(lines) + "\n"


def read_metrics(path) -> dict:
    """{(target, class): ap50 in points} from a metrics file."""
    out = {}
    with open(path) as fh:
        next(fh)
        for ln in fh:
            if ln.strip():
                t, c, v = ln.rstrip("\n").split("\t")
                out[(t, c)] = float(v)
    return out


def ablation_table(results: Sequence[tuple]) -> str:
    """Rows = cells (in grid order), columns = targets plus their mean; values in mAP points."""
    if not results:
        return ""
    targets = sorted(results[0][1].per_target)
    lines = ["cell\t" + "\t".join(targets) + "\tmean"]
    for name, rep in results:
        vals = [f"{100 * rep.per_target[t].map:.4f}" for t in targets]
        lines.append(f"{name}\t" + "\t".join(vals) + f"\t{100 * rep.map:.4f}")
    return "\n".join(lines) + "\n"
