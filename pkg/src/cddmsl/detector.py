"""Small two-stage detector with a text-prompt classifier head."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou, nms, roi_align

DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "a drawing of a {}.",
    "a painting of the {}.",
    "a rendering of a small {}.",
)

RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class Detection:
    box: tuple
    category: int
    confidence: float


@dataclass
class FeatureMap:
    tensor: torch.Tensor  # (B, D_v, H', W')
    stride: int


@dataclass
class Proposal:
    box: tuple
    objectness: float


@dataclass
class PromptBank:
    weights: torch.Tensor  # (C + 1, D_l); last row is background (zeros)
    categories: tuple
    templates: tuple
    seed: int

    @property
    def num_classes(self):
        return len(self.categories)


# -- boxes ---------------------------------------------------------------------

def encode_boxes(reference: torch.Tensor, target: torch.Tensor, weights=ROI_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([wx * (tx - rx) / rw, wy * (ty - ry) / rh,
                        ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1)


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor, weights=ROI_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    clamp = math.log(1000.0 / 16)
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=clamp)
    dh = (deltas[:, 3] / wh).clamp(max=clamp)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, canvas) -> torch.Tensor:
    h, w = canvas
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def make_anchors(feat_hw, stride, sizes=(12, 20, 32), ratios=(0.5, 1.0, 2.0), dtype=torch.float32):
    fh, fw = feat_hw
    base = []
    for s in sizes:
        for r in ratios:
            w, h = s / math.sqrt(r), s * math.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = torch.tensor(base, dtype=dtype)
    ys = (torch.arange(fh, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(fw, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (centers + base[None]).reshape(-1, 4)  # (H'*W'*A, 4), cell-major


# -- modules -------------------------------------------------------------------

class Backbone(nn.Module):
    """Four conv blocks, overall stride 8."""

    stride = 8

    def __init__(self, out_channels=64, widths=(16, 32, 48)):
        super().__init__()
        c1, c2, c3 = widths
        self.body = nn.Sequential(
            nn.Conv2d(3, c1, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c3, out_channels, 3, 1, 1),
        )
        self.out_channels = out_channels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        return self.body(images)


class RPNHead(nn.Module):
    def __init__(self, channels=64, num_anchors=9):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, fmap):
        t = F.relu(self.conv(fmap))
        b = fmap.shape[0]
        logits = self.objectness(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.deltas(t).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas


class BoxHead(nn.Module):
    """Class-agnostic box regression from pooled region features."""

    def __init__(self, channels=64, pool=4, hidden=128):
        super().__init__()
        self.fc = nn.Linear(channels * pool * pool, hidden)
        self.out = nn.Linear(hidden, 4)
        nn.init.normal_(self.out.weight, std=0.001)
        nn.init.zeros_(self.out.bias)

    def forward(self, regions):
        return self.out(F.relu(self.fc(regions.flatten(1))))


class Detector(nn.Module):
    def __init__(self, channels=64, pool=4, anchor_sizes=(12, 20, 32), anchor_ratios=(0.5, 1.0, 2.0)):
        super().__init__()
        self.backbone = Backbone(channels)
        self.anchor_sizes = tuple(anchor_sizes)
        self.anchor_ratios = tuple(anchor_ratios)
        self.rpn = RPNHead(channels, len(anchor_sizes) * len(anchor_ratios))
        self.box_head = BoxHead(channels, pool)
        self.pool = pool

    def anchors(self, feat_hw, dtype=torch.float32):
        return make_anchors(feat_hw, self.backbone.stride, self.anchor_sizes, self.anchor_ratios, dtype)


def backbone_forward(images: torch.Tensor, backbone: Backbone) -> FeatureMap:
    return FeatureMap(backbone(images), backbone.stride)


# -- proposals and pooling -----------------------------------------------------

def propose_regions(fmap: FeatureMap, detector: Optional[Detector] = None, canvas=None,
                    mode: str = "learned_rpn", gt_boxes=None, jitter: int = 0,
                    rng: Optional[np.random.Generator] = None, pre_nms: int = 300,
                    post_nms: int = 50, nms_iou: float = 0.7, min_size: float = 2.0,
                    rpn_outputs=None):
    """Per-image proposal lists.

    ``learned_rpn`` decodes the RPN over the anchor grid, clips, runs NMS and
    keeps the top ``post_nms``. ``oracle`` returns each image's GT boxes
    (objectness 1) plus ``jitter`` jittered copies and ``jitter`` random
    negatives per image, drawn from ``rng``.
    Returns a list of ``(boxes[N, 4], scores[N])`` tensors.
    """
    t = fmap.tensor
    if t.numel() == 0:
        raise ValueError("empty feature map")
    b, _, fh, fw = t.shape
    if canvas is None:
        canvas = (fh * fmap.stride, fw * fmap.stride)
    if mode == "oracle":
        if gt_boxes is None:
            raise ValueError("oracle proposals need ground-truth boxes")
        return [_oracle_proposals(torch.as_tensor(g, dtype=t.dtype).reshape(-1, 4), canvas, jitter, rng)
                for g in gt_boxes]
    if mode != "learned_rpn":
        raise ValueError(f"unknown proposal mode {mode!r}")
    logits, deltas = rpn_outputs if rpn_outputs is not None else detector.rpn(t)
    anchors = detector.anchors((fh, fw), t.dtype)
    out = []
    with torch.no_grad():
        for i in range(b):
            boxes = clip_boxes(decode_boxes(anchors, deltas[i], RPN_WEIGHTS), canvas)
            scores = torch.sigmoid(logits[i])
            keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
            boxes, scores = boxes[keep], scores[keep]
            order = torch.argsort(scores, descending=True, stable=True)[:pre_nms]
            boxes, scores = boxes[order], scores[order]
            keep = nms(boxes, scores, nms_iou)[:post_nms]
            out.append((boxes[keep], scores[keep]))
    return out


def _oracle_proposals(gt, canvas, jitter, rng):
    boxes = [gt]
    if jitter:
        if rng is None:
            raise ValueError("oracle jitter needs an rng")
        h, w = canvas
        for _ in range(jitter):
            wh = torch.stack([gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]] * 2, dim=1)
            noise = torch.as_tensor(rng.uniform(-0.15, 0.15, gt.shape), dtype=gt.dtype)
            boxes.append(clip_boxes(gt + noise * wh, canvas))
        for _ in range(jitter):
            side = torch.as_tensor(rng.uniform(8, min(h, w) / 2, (len(gt), 2)), dtype=gt.dtype)
            x0 = torch.as_tensor(rng.uniform(0, 1, len(gt)), dtype=gt.dtype) * (w - side[:, 0])
            y0 = torch.as_tensor(rng.uniform(0, 1, len(gt)), dtype=gt.dtype) * (h - side[:, 1])
            boxes.append(torch.stack([x0, y0, x0 + side[:, 0], y0 + side[:, 1]], dim=1))
    boxes = torch.cat(boxes)
    scores = torch.zeros(len(boxes), dtype=gt.dtype)
    scores[: len(gt)] = 1.0
    return boxes, scores


def roi_pool(fmap: FeatureMap, proposals: Sequence[torch.Tensor], pool: int = 4,
             sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear RoIAlign of per-image proposal boxes (input-pixel coords) to ``pool x pool``.

    Returns ``(R, D_v, pool, pool)``, rows ordered image by image.
    """
    boxes = [p.to(fmap.tensor.dtype) for p in proposals]
    for bx in boxes:
        if len(bx) and bool(((bx[:, 2] <= bx[:, 0]) | (bx[:, 3] <= bx[:, 1])).any()):
            raise ValueError("degenerate (zero-area) proposal")
    return roi_align(fmap.tensor, boxes, output_size=pool, spatial_scale=1.0 / fmap.stride,
                     sampling_ratio=sampling_ratio, aligned=True)


def pool_image(fmap: FeatureMap, pool: int = 4) -> torch.Tensor:
    """Whole-image region feature: adaptive average pool to ``pool x pool``."""
    return F.adaptive_avg_pool2d(fmap.tensor, pool)


# -- text classifier -----------------------------------------------------------

def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(token.encode())])
    return rng.standard_normal(dim)


def _prompt_embedding(prompt: str, dim: int, seed: int, subject: str) -> np.ndarray:
    # content words dominate the bag, as in a trained text encoder
    vec = np.zeros(dim)
    for tok in prompt.lower().replace(".", " ").split():
        vec += (3.0 if tok == subject else 1.0) * _token_vector(tok, dim, seed)
    return vec / np.linalg.norm(vec)


def build_prompt_bank(categories: Sequence[str], templates: Sequence[str] = DEFAULT_TEMPLATES,
                      seed: int = 0, dim: int = 64) -> PromptBank:
    if not categories:
        raise ValueError("empty category list")
    if not templates:
        raise ValueError("need at least one prompt template")
    rows = []
    for cat in categories:
        emb = np.mean([_prompt_embedding(t.format(cat), dim, seed, cat) for t in templates], axis=0)
        rows.append(emb / np.linalg.norm(emb))
    rows.append(np.zeros(dim))
    w = torch.tensor(np.array(rows), dtype=torch.float64)
    return PromptBank(w, tuple(categories), tuple(templates), seed)


def classify_regions(z: torch.Tensor, bank: PromptBank, temperature: float = 0.07) -> torch.Tensor:
    """Cosine logits against every category row; the background column is 0."""
    w = bank.weights.to(z.dtype)
    if z.shape[-1] != w.shape[1]:
        raise ValueError(f"descriptive dim {z.shape[-1]} != bank dim {w.shape[1]}")
    zn = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    fg = zn @ w[:-1].T / temperature
    return torch.cat([fg, torch.zeros_like(fg[:, :1])], dim=1)


def focal_ce(logits: torch.Tensor, target: torch.Tensor, gamma: float = 0.5,
             background_weight: float = 0.2, reduction: str = "mean") -> torch.Tensor:
    """w * (1 - p_t)^gamma * -log p_t, with w = background_weight on the last class."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    logits = logits.reshape(len(target), -1)
    logp = F.log_softmax(logits, dim=1).gather(1, target[:, None])[:, 0]
    if gamma == 0:
        loss = -logp
    else:
        one_minus = (-torch.expm1(logp)).clamp_min(1e-30)
        loss = one_minus ** gamma * -logp
    bg = logits.shape[1] - 1
    w = torch.where(target == bg, torch.full_like(loss, background_weight), torch.ones_like(loss))
    loss = w * loss
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    if beta == 0:
        return ax
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def detection_loss(cls_logits, cls_targets, box_deltas=None, box_targets=None,
                   rpn_logits=None, rpn_labels=None, rpn_deltas=None, rpn_targets=None,
                   gamma=0.5, background_weight=0.2, beta=1.0, rpn_beta=1.0 / 9):
    """Supervised detection loss; returns ``(total, components)``.

    ``box_deltas``/``box_targets`` cover positive regions only; ``rpn_*``
    cover sampled anchors (labels 1/0) and positive anchors respectively.
    Passing no RPN tensors (oracle proposals) makes ``l_rpn`` exactly 0.
    """
    if cls_targets is None or len(cls_targets) == 0:
        raise ValueError("no labels supplied for a labeled batch")
    l_cls = focal_ce(cls_logits, cls_targets, gamma, background_weight)
    zero = cls_logits.sum() * 0.0
    if box_deltas is not None and len(box_deltas):
        l_reg = smooth_l1(box_deltas - box_targets, beta).sum(dim=1).mean()
    else:
        l_reg = zero
    if rpn_logits is not None and len(rpn_logits):
        l_rpn_cls = F.binary_cross_entropy_with_logits(rpn_logits, rpn_labels.to(rpn_logits.dtype))
        if rpn_deltas is not None and len(rpn_deltas):
            l_rpn_reg = smooth_l1(rpn_deltas - rpn_targets, rpn_beta).sum() / len(rpn_logits)
        else:
            l_rpn_reg = zero
        l_rpn = l_rpn_cls + l_rpn_reg
    else:
        l_rpn_cls = l_rpn_reg = l_rpn = zero
    total = l_cls + l_reg + l_rpn
    return total, {"l_cls": l_cls, "l_reg": l_reg, "l_rpn": l_rpn,
                   "l_rpn_cls": l_rpn_cls, "l_rpn_reg": l_rpn_reg}


# -- training-time target assignment ---------------------------------------------

def sample_rpn_targets(anchors, gt, rng, batch=64, pos_fraction=0.5, pos_iou=0.7, neg_iou=0.3):
    """Anchor labels for one image; returns (indices, labels, pos_indices, pos_gt_boxes)."""
    n = len(anchors)
    labels = torch.full((n,), -1, dtype=torch.long)
    if len(gt) == 0:
        labels[:] = 0
        matched = torch.zeros(n, dtype=torch.long)
    else:
        iou = box_iou(anchors, gt)
        best, matched = iou.max(dim=1)
        labels[best < neg_iou] = 0
        labels[best >= pos_iou] = 1
        # every GT keeps its best anchor(s)
        gt_best = iou.max(dim=0).values
        for j in range(len(gt)):
            labels[(iou[:, j] == gt_best[j]) & (gt_best[j] > 0)] = 1
            matched[(iou[:, j] == gt_best[j]) & (gt_best[j] > 0)] = j
    pos = torch.nonzero(labels == 1)[:, 0].numpy()
    neg = torch.nonzero(labels == 0)[:, 0].numpy()
    n_pos = min(len(pos), int(batch * pos_fraction))
    pos = rng.choice(pos, n_pos, replace=False) if len(pos) else pos
    neg = rng.choice(neg, min(len(neg), batch - n_pos), replace=False) if len(neg) else neg
    pos = torch.as_tensor(np.sort(pos), dtype=torch.long)
    neg = torch.as_tensor(np.sort(neg), dtype=torch.long)
    idx = torch.cat([pos, neg])
    lab = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))])
    gt_boxes = gt[matched[pos]] if len(gt) else gt.new_zeros((0, 4))
    return idx, lab, pos, gt_boxes


def sample_roi_targets(proposals, gt, gt_classes, num_classes, rng, batch=32, pos_fraction=0.25,
                       fg_iou=0.5, bg_iou=0.3):
    """Label proposals (plus GT) for the box head; returns (boxes, classes, pos_mask, matched_gt)."""
    boxes = torch.cat([proposals, gt]) if len(gt) else proposals
    if len(gt):
        iou = box_iou(boxes, gt)
        best, matched = iou.max(dim=1)
    else:
        best = torch.zeros(len(boxes), dtype=boxes.dtype)
        matched = torch.zeros(len(boxes), dtype=torch.long)
    fg = torch.nonzero(best >= fg_iou)[:, 0].numpy()
    bg = torch.nonzero(best < bg_iou)[:, 0].numpy()
    n_fg = min(len(fg), int(round(batch * pos_fraction)))
    fg = rng.choice(fg, n_fg, replace=False) if len(fg) else fg
    bg = rng.choice(bg, min(len(bg), batch - n_fg), replace=False) if len(bg) else bg
    fg = torch.as_tensor(np.sort(fg), dtype=torch.long)
    bg = torch.as_tensor(np.sort(bg), dtype=torch.long)
    idx = torch.cat([fg, bg])
    classes = torch.full((len(idx),), num_classes, dtype=torch.long)
    if len(fg):
        classes[: len(fg)] = gt_classes[matched[fg]]
    pos_mask = torch.zeros(len(idx), dtype=torch.bool)
    pos_mask[: len(fg)] = True
    matched_gt = gt[matched[fg]] if len(gt) else boxes.new_zeros((0, 4))
    return boxes[idx], classes, pos_mask, matched_gt


# -- inference -------------------------------------------------------------------

def nms_detections(detections: Sequence[Detection], nms_iou: float) -> list:
    """Per-class NMS over already-built detections (stable for equal scores)."""
    if not detections:
        return []
    boxes = torch.tensor([d.box for d in detections], dtype=torch.float64)
    scores = torch.tensor([d.confidence for d in detections], dtype=torch.float64)
    cats = torch.tensor([d.category for d in detections])
    keep = batched_nms(boxes, scores, cats, nms_iou)
    return [detections[i] for i in keep.tolist()]


@torch.no_grad()
def infer(images: torch.Tensor, detector: Detector, v2l, bank: PromptBank,
          score_threshold: float = 0.05, nms_iou: float = 0.5, temperature: float = 0.07,
          post_nms: int = 50, max_detections: int = 30) -> list:
    """Detections for each image in ``images`` ((B, 3, H, W) in [0, 1]).

    Images are processed one at a time so results do not depend on batch
    composition.
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    canvas = tuple(images.shape[2:])
    out = []
    for i in range(len(images)):
        fmap = backbone_forward(images[i: i + 1], detector.backbone)
        (boxes, _), = propose_regions(fmap, detector, canvas, post_nms=post_nms)
        if len(boxes) == 0:
            out.append([])
            continue
        regions = roi_pool(fmap, [boxes], detector.pool)
        probs = F.softmax(classify_regions(v2l(regions), bank, temperature), dim=1)
        refined = clip_boxes(decode_boxes(boxes, detector.box_head(regions)), canvas)
        valid = ((refined[:, 2] - refined[:, 0]) > 0) & ((refined[:, 3] - refined[:, 1]) > 0)
        c = bank.num_classes
        scores = probs[:, :c]
        r_idx, c_idx = torch.nonzero((scores > score_threshold) & valid[:, None], as_tuple=True)
        if len(r_idx) == 0:
            out.append([])
            continue
        cand_boxes = refined[r_idx]
        cand_scores = scores[r_idx, c_idx]
        keep = batched_nms(cand_boxes, cand_scores, c_idx, nms_iou)[:max_detections]
        out.append([Detection(tuple(float(v) for v in cand_boxes[k]), int(c_idx[k]), float(cand_scores[k]))
                    for k in keep.tolist()])
    return out
