"""Variant evaluation over a dataset split.

Four predictors are compared, mirroring the training chain: the trunk
classifier baseline, coding-only decoding, the low-resolution hybrid model,
and the high-resolution head.  Low-resolution label maps are lifted to
ground-truth resolution by nearest-neighbor replication for pixel accuracy
and IoU; superpixel accuracy follows the resize protocol (bilinear
interpolation of the class probabilities, then argmax, then max-voting).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .data import Dataset
from .metrics import (
    bilinear_resize,
    grid_superpixels,
    iou,
    pixel_accuracy,
    superpixel_average_precision,
)
from .model import CVAEModel, downsample_labels, predict, predict_fcn, predict_global_only, predict_hr
from .tensor import Tensor

VARIANT_CHECKPOINTS = {
    "fcn": "fcn.ckpt",
    "imgenc": "imgenc.ckpt",
    "lr_cvae": "joint.ckpt",
    "hr_cvae": "hr.ckpt",
}

SUPERPIXEL_GRID = 8


def worker_count() -> int:
    """Worker threads for per-image metric evaluation; capped by
    CVAESEG_THREADS (default: machine parallelism)."""
    env = os.environ.get("CVAESEG_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def _predict_variant(variant: str, model: CVAEModel, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if variant == "fcn":
        return predict_fcn(model, x)
    if variant == "imgenc":
        return predict_global_only(model, x)
    if variant == "lr_cvae":
        return predict(model, x)
    if variant == "hr_cvae":
        return predict_hr(model, x)
    raise ValueError(f"unknown variant {variant!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


@dataclass
class VariantResult:
    variant: str
    split: str
    pixel_accuracy: float
    mean_iou: float
    sap: float
    iou_per_class: dict[str, float]
    fg_iou_native: float  # against ground truth downsampled to the output grid
    lifted_labels: np.ndarray  # (N, H, W) at ground-truth resolution

    def report_row(self) -> dict:
        return {
            "variant": self.variant,
            "split": self.split,
            "pixel_accuracy": self.pixel_accuracy,
            "mean_iou": self.mean_iou,
            "sap": self.sap,
            "iou_per_class": self.iou_per_class,
            "fg_iou_native": self.fg_iou_native,
        }


def nearest_lift(labels: np.ndarray, size: int) -> np.ndarray:
    """Replicate an (N, h, w) label map up to (N, size, size)."""
    factor = size // labels.shape[1]
    if factor <= 1:
        return labels
    return labels.repeat(factor, axis=1).repeat(factor, axis=2)


def evaluate_variant(variant: str, model: CVAEModel, dataset: Dataset, split: str,
                     threads: int | None = None) -> VariantResult:
    x, gt = dataset.arrays(split)
    h = gt.shape[1]
    labels, logits = _predict_variant(variant, model, Tensor(x))
    lifted = nearest_lift(labels, h)
    gt_native = gt if labels.shape[1] == h else downsample_labels(gt, labels.shape[1])
    fg_native = float(np.mean([iou(labels[i], gt_native[i], 1) for i in range(len(gt))]))
    sp = grid_superpixels(h, h, SUPERPIXEL_GRID)
    classes = sorted(int(c) for c in np.unique(gt))
    logits_np = logits.data

    def per_image(i: int) -> tuple[float, float, list[float]]:
        acc = pixel_accuracy(lifted[i], gt[i])
        ious = [iou(lifted[i], gt[i], c) for c in classes]
        if logits_np.shape[2] != h:
            probs = bilinear_resize(_softmax(logits_np[i]), h, h)
            sap_labels = probs.argmax(axis=0)
        else:
            sap_labels = lifted[i]
        sap = superpixel_average_precision(sap_labels, gt[i], sp)
        return acc, sap, ious

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        rows = list(pool.map(per_image, range(len(gt))))

    accs = np.array([r[0] for r in rows])
    saps = np.array([r[1] for r in rows])
    ious = np.array([r[2] for r in rows])  # (N, C)
    present = np.array([[c in np.unique(gt[i]) for c in classes] for i in range(len(gt))])
    mean_iou_val = float(np.mean([ious[i, present[i]].mean() for i in range(len(gt))]))
    per_class = {str(c): float(ious[:, k].mean()) for k, c in enumerate(classes)}
    return VariantResult(variant=variant, split=split,
                         pixel_accuracy=float(accs.mean()), mean_iou=mean_iou_val,
                         sap=float(saps.mean()), iou_per_class=per_class,
                         fg_iou_native=fg_native, lifted_labels=lifted)


def available_variants(ckpt_dir: str | Path) -> dict[str, Path]:
    ckpt_dir = Path(ckpt_dir)
    return {v: ckpt_dir / f for v, f in VARIANT_CHECKPOINTS.items()
            if (ckpt_dir / f).exists()}


def evaluate_all(ckpt_dir: str | Path, dataset: Dataset, split: str,
                 threads: int | None = None) -> list[VariantResult]:
    results = []
    for variant, path in available_variants(ckpt_dir).items():
        model = restore_model(load_checkpoint(path))
        results.append(evaluate_variant(variant, model, dataset, split, threads))
    return results
