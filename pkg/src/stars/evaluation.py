"""Confusion-matrix metrics and the missing-modality evaluation protocol.

A model trained on both modalities is scored either with both inputs
present or with exactly one; in single-modality mode the other
modality's rasters are never opened, so evaluation succeeds even when
those files are gone.
"""

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from .data import IGNORE, DatasetManifest, read_raster
from .errors import ConfigurationError, DatasetError
from .model import BaselineModel, Stars

MODES = ("both", "m1_only", "m2_only")


class ConfusionMatrix:
    """K x K count matrix, rows ground truth, columns prediction."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        target = np.asarray(target).reshape(-1)
        keep = target != IGNORE
        pred = pred[keep]
        target = target[keep]
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ConfigurationError("prediction outside the class range")
        if target.size:
            flat = target.astype(np.int64) * self.num_classes + pred.astype(np.int64)
            binc = np.bincount(flat, minlength=self.num_classes**2)
            self.counts += binc.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigurationError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def pixel_count(self) -> int:
        return int(self.counts.sum())


def _class_stats(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0).astype(np.float64) - tp
    fn = cm.counts.sum(axis=1).astype(np.float64) - tp
    return tp, fp, fn


def miou(cm: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    """Per-class intersection over union and its mean.

    Classes that never occur in either ground truth or prediction have
    an undefined IoU and are excluded from the mean; a class that
    occurs but is never hit scores 0.
    """

    tp, fp, fn = _class_stats(cm)
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise DatasetError("confusion matrix is empty; no class has any support")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = tp[defined] / denom[defined]
    return per_class, float(np.nanmean(per_class))


def mf1(cm: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    """Per-class F1 (harmonic mean of precision and recall) and its mean."""

    tp, fp, fn = _class_stats(cm)
    denom = 2 * tp + fp + fn
    defined = (tp + fp + fn) > 0
    if not defined.any():
        raise DatasetError("confusion matrix is empty; no class has any support")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = 2 * tp[defined] / denom[defined]
    return per_class, float(np.nanmean(per_class))


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    per_class_f1: np.ndarray
    miou: float
    mf1: float
    pixel_count: int
    branch: str
    mode: str
    confusion: Optional[np.ndarray] = None

    def to_text(self) -> str:
        lines = [f"{'class':>5} {'iou':>8} {'f1':>8}"]
        for c, (i, f) in enumerate(zip(self.per_class_iou, self.per_class_f1)):
            iou_s = "  n/a" if np.isnan(i) else f"{i:8.4f}"
            f1_s = "  n/a" if np.isnan(f) else f"{f:8.4f}"
            lines.append(f"{c:>5} {iou_s:>8} {f1_s:>8}")
        lines.append("")
        lines.append(f"miou={self.miou:.6f}")
        lines.append(f"mf1={self.mf1:.6f}")
        lines.append(f"pixels={self.pixel_count}")
        lines.append(f"branch={self.branch}")
        lines.append(f"mode={self.mode}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _crop_to_multiple(arr: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = arr.shape[:2]
    nh, nw = (h // multiple) * multiple, (w // multiple) * multiple
    if nh == 0 or nw == 0:
        raise DatasetError(f"record too small to evaluate: {h}x{w}")
    return arr[:nh, :nw]


def _to_chw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))[None]).float()


def evaluate(
    model,
    manifest: DatasetManifest,
    mode: str = "both",
    branch: str = "fused",
    max_records: Optional[int] = None,
) -> EvalReport:
    """Scores a model over a manifest under the chosen modality regime.

    In ``m1_only``/``m2_only`` modes the absent modality's files are
    never opened. A Stars model decodes through ``branch`` (the fused
    decoder by default); a baseline model ignores ``branch`` and must be
    evaluated in the single-modality mode matching its own modality.
    """

    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    baseline = isinstance(model, BaselineModel)
    if baseline:
        wanted = f"{model.modality}_only"
        if mode not in (wanted,):
            raise ConfigurationError(
                f"baseline model for {model.modality} must be evaluated with mode={wanted}"
            )
    else:
        if mode == "m1_only" and branch == "m2":
            raise ConfigurationError("branch m2 is unavailable without modality 2")
        if mode == "m2_only" and branch == "m1":
            raise ConfigurationError("branch m1 is unavailable without modality 1")
        if branch not in ("m1", "m2", "fused"):
            raise ConfigurationError(f"unknown branch {branch!r}")

    cm = ConfusionMatrix(manifest.num_classes)
    model.eval()
    ids = manifest.ids[:max_records] if max_records else manifest.ids
    with torch.no_grad():
        for rec_id in ids:
            label = _crop_to_multiple(read_raster(manifest.label_path(rec_id)))[:, :, 0]
            label = label.astype(np.int64)
            if mode in ("both", "m1_only"):
                x1 = _to_chw(_crop_to_multiple(read_raster(manifest.m1_path(rec_id))))
            if mode in ("both", "m2_only"):
                x2 = _to_chw(_crop_to_multiple(read_raster(manifest.m2_path(rec_id))))
            if baseline:
                logits = model(x1 if model.modality == "m1" else x2)
            elif mode == "both":
                s_m1, s_m2, s_fuse = model(x1, x2)
                logits = {"m1": s_m1, "m2": s_m2, "fused": s_fuse}[branch]
            elif mode == "m1_only":
                logits = model.forward_single(x1, "m1", branch)
            else:
                logits = model.forward_single(x2, "m2", branch)
            pred = logits.argmax(dim=1)[0].numpy()
            cm.update(pred, label)
    per_iou, mean_iou = miou(cm)
    per_f1, mean_f1 = mf1(cm)
    return EvalReport(
        per_class_iou=per_iou,
        per_class_f1=per_f1,
        miou=mean_iou,
        mf1=mean_f1,
        pixel_count=cm.pixel_count,
        branch="single" if baseline else branch,
        mode=mode,
        confusion=cm.counts.copy(),
    )
