"""Descriptive consistency objectives and total-loss assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-12


class DegenerateInputError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


def cosine_sim(a, b, eps: float = EPS):
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    na, nb = a.norm(), b.norm()
    if na <= eps or nb <= eps:
        raise DegenerateInputError("cosine similarity of a near-zero vector")
    return (a @ b) / (na * nb)


def cosine_matrix(anchors: torch.Tensor, counterparts: torch.Tensor) -> torch.Tensor:
    """s[i, k] = cos(anchors[i], counterparts[k])."""
    a = anchors / anchors.norm(dim=1, keepdim=True)
    b = counterparts / counterparts.norm(dim=1, keepdim=True)
    return a @ b.T


@dataclass
class PairBatch:
    anchors: torch.Tensor  # (N, D), original domain
    counterparts: torch.Tensor  # (N, D), stylized domain, row-aligned

    def __post_init__(self):
        a, b = self.anchors, self.counterparts
        if a.dim() != 2 or b.dim() != 2 or a.shape != b.shape:
            raise DegenerateInputError(f"pair batch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        if len(a) < 1:
            raise DegenerateInputError("empty pair batch")
        if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
            raise DegenerateInputError("non-finite embeddings")
        if (a.detach().norm(dim=1) <= EPS).any() or (b.detach().norm(dim=1) <= EPS).any():
            raise DegenerateInputError("zero-norm embedding in pair batch")

    def __len__(self):
        return len(self.anchors)


def instance_contrastive(batch: PairBatch, tau: float = 0.07, symmetric: bool = False) -> torch.Tensor:
    """Mean over anchors of -log softmax of the positive among cross-domain pairs.

    Row i scores anchor i against every counterpart; the positive is the
    diagonal, negatives are counterparts k != i. With ``symmetric`` the same
    loss is also taken from the counterparts' side and the two are averaged.
    """
    return contrastive_from_similarity(cosine_matrix(batch.anchors, batch.counterparts), tau, symmetric)


def contrastive_from_similarity(sim: torch.Tensor, tau: float = 0.07, symmetric: bool = False) -> torch.Tensor:
    """The contrastive objective on a precomputed (N, N) similarity matrix."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = sim / tau
    diag = torch.arange(len(s))
    loss = (torch.logsumexp(s, dim=1) - s[diag, diag]).mean()
    if symmetric:
        loss_t = (torch.logsumexp(s, dim=0) - s[diag, diag]).mean()
        loss = 0.5 * (loss + loss_t)
    return loss


def image_contrastive(batch: PairBatch, tau: float = 0.07, symmetric: bool = False) -> torch.Tensor:
    """Same objective with whole-image descriptive embeddings as rows."""
    return instance_contrastive(batch, tau, symmetric)


def kd_distance(live: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the Manhattan distance between descriptive features."""
    if live.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(live.shape)} vs {tuple(reference.shape)}")
    return (live - reference.detach()).abs().sum(dim=1).mean()


def kd_regularizer(labeled_images: torch.Tensor, backbone, ref, v2l, pool: int = 4,
                   labeled_mask=None) -> torch.Tensor:
    """L1 tie between v2l(live pooled features) and v2l(frozen reference pooled features).

    ``labeled_mask`` (optional bool per image) guards the labeled-source-only
    contract.
    """
    if labeled_mask is not None and not bool(torch.as_tensor(labeled_mask).all()):
        raise ValueError("kd_regularizer only accepts labeled-source images")
    live = v2l(F.adaptive_avg_pool2d(backbone(labeled_images), pool))
    with torch.no_grad():
        target = v2l(F.adaptive_avg_pool2d(ref(labeled_images), pool))
    return kd_distance(live, target)


@dataclass
class LossReport:
    l_det: float
    l_inst: float
    l_img: float
    l_dist: float
    l_total: float
    omega: float

    FIELDS = ("l_det", "l_inst", "l_img", "l_dist", "l_total")

    def row(self):
        return [self.l_det, self.l_inst, self.l_img, self.l_dist, self.l_total]


def total_loss(l_det, l_inst, l_img, l_dist, omega: float = 1.0):
    """Return ``(total_tensor, LossReport)``; raises on any non-finite component."""
    parts = {"l_det": l_det, "l_inst": l_inst, "l_img": l_img, "l_dist": l_dist}
    values = {}
    for name, v in parts.items():
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLossError(f"{name} is not finite ({fv})")
        values[name] = fv
    total = l_det + l_inst + l_img + omega * l_dist
    report = LossReport(values["l_det"], values["l_inst"], values["l_img"], values["l_dist"],
                        values["l_det"] + values["l_inst"] + values["l_img"] + omega * values["l_dist"],
                        float(omega))
    return total, report
