"""scikit-learn style wrapper around the two-stage trainer.

>>> est = CDDMSLDetector(burnup_steps=200, joint_steps=300)
>>> est.fit(images, labels, X_stylized={"B": images_in_b})   # doctest: +SKIP
>>> est.predict(test_images)[0][:2]                              # doctest: +SKIP
[Detection(box=(...), category=2, confidence=0.93), ...]
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import evalkit
from .detector import infer
from .synthdomains import ObjectInstance
from .training import TrainConfig, TrainData, burn_up, joint_train

_DEFAULTS = TrainConfig()


def check_images(X, name="X") -> np.ndarray:
    """(N, H, W, 3) float array in [0, 1]; uint8 input is rescaled."""
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = check_array(arr, allow_nd=True, dtype=np.float32, ensure_all_finite=True, input_name=name)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape (N, H, W, 3), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: pixel values must lie in [0, 1]")
    return arr


def _as_instance(obj, canvas) -> ObjectInstance:
    if isinstance(obj, ObjectInstance):
        inst = obj
    else:
        box, cat = obj
        inst = ObjectInstance(tuple(int(v) for v in box), int(cat))
    h, w = canvas
    x0, y0, x1, y1 = inst.box
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {inst.box} outside the {w}x{h} canvas")
    return inst


def check_labels(y, n_images: int, canvas, num_classes: int) -> list:
    """Per-image lists of ObjectInstance (or ``(box, category)`` pairs), validated."""
    if y is None or len(y) != n_images:
        raise ValueError(f"need one label list per image ({n_images}), got {None if y is None else len(y)}")
    out = []
    for i, objs in enumerate(y):
        insts = [_as_instance(o, canvas) for o in objs]
        if not insts:
            raise ValueError(f"image {i} has no objects")
        bad = [o.category for o in insts if o.category >= num_classes]
        if bad:
            raise ValueError(f"image {i}: categories {bad} exceed num_classes={num_classes}")
        out.append(insts)
    return out


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(arr).permute(0, 3, 1, 2).contiguous()


class CDDMSLDetector(BaseEstimator):
    """Detector trained with a supervised burn-up then cross-style consistency.

    ``fit`` takes labeled images plus, for every method except
    ``source_only``, the same scenes rendered in one or more unlabeled styles
    (``X_stylized``: array or ``{style: array}``, row-aligned with ``X``).
    """

    def __init__(self, method="cddmsl", burnup_steps=_DEFAULTS.burnup_steps,
                 joint_steps=_DEFAULTS.joint_steps, lr=_DEFAULTS.lr, batch_size=_DEFAULTS.batch_size,
                 omega=_DEFAULTS.omega, tau=_DEFAULTS.tau, use_inst=True, use_img=True, use_dist=True,
                 num_classes=_DEFAULTS.num_classes, seed=0, score_threshold=0.05, nms_iou=0.5):
        self.method = method
        self.burnup_steps = burnup_steps
        self.joint_steps = joint_steps
        self.lr = lr
        self.batch_size = batch_size
        self.omega = omega
        self.tau = tau
        self.use_inst = use_inst
        self.use_img = use_img
        self.use_dist = use_dist
        self.num_classes = num_classes
        self.seed = seed
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou

    def _train_config(self) -> TrainConfig:
        return TrainConfig(burnup_steps=self.burnup_steps, joint_steps=self.joint_steps, lr=self.lr,
                           batch_size=self.batch_size, omega=self.omega, tau=self.tau, method=self.method,
                           seed=self.seed, use_inst=self.use_inst, use_img=self.use_img,
                           use_dist=self.use_dist, num_classes=self.num_classes)

    def fit(self, X, y, X_stylized=None):
        cfg = self._train_config()
        X = check_images(X)
        labels = check_labels(y, len(X), X.shape[1:3], cfg.num_classes)
        if X_stylized is None:
            aux = {}
        elif isinstance(X_stylized, dict):
            aux = {k: check_images(v, f"X_stylized[{k!r}]") for k, v in X_stylized.items()}
        else:
            aux = {"aux": check_images(X_stylized, "X_stylized")}
        for k, v in aux.items():
            if v.shape != X.shape:
                raise ValueError(f"stylized images {k!r} must be row-aligned with X: {v.shape} vs {X.shape}")
        if any(cfg.loss_weights()) and cfg.joint_steps and not aux:
            raise ValueError(f"method {cfg.method!r} needs X_stylized")
        data = TrainData.from_arrays(X, labels, aux)
        state = burn_up(cfg, data)
        self.state_ = joint_train(state, cfg, data)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.canvas_ = tuple(X.shape[1:3])
        return self

    def _images(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X)
        if tuple(X.shape[1:3]) != self.canvas_:
            raise ValueError(f"images are {X.shape[1:3]}, model was fit on {self.canvas_}")
        return _to_tensor(X)

    def predict(self, X) -> list:
        """Per-image lists of ``Detection`` (box, category, confidence)."""
        images = self._images(X)
        st = self.state_
        return infer(images, st.detector, st.v2l, st.bank, self.score_threshold, self.nms_iou,
                     st.config.cls_temperature)

    def score(self, X, y) -> float:
        """mAP at IoU 0.5 over the classes present in ``y``."""
        dets = self.predict(X)
        labels = check_labels(y, len(dets), self.canvas_, self.num_classes)
        report = evalkit.map50(dict(enumerate(dets)), dict(enumerate(labels)), list(range(self.num_classes)))
        return report.map

    def transform(self, X) -> np.ndarray:
        """Image-level descriptive features, shape (N, D_l)."""
        images = self._images(X)
        st = self.state_
        st.detector.eval()
        with torch.no_grad():
            pooled = F.adaptive_avg_pool2d(st.detector.backbone(images), st.config.pool)
            return st.v2l(pooled).numpy()
