"""Evaluation metrics: pixel accuracy, per-class and mean IoU, bilinear
probability-map resizing, and superpixel accuracy via max-voting over a
balanced grid."""

from __future__ import annotations

import numpy as np

from .errors import InvalidGrid, ShapeMismatch


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_same_shape(pred, gt)
    return float((pred == gt).mean())


def iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Intersection over union for one class; 1.0 when both sets are empty."""
    pred, gt = _check_same_shape(pred, gt)
    p = pred == cls
    g = gt == cls
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def mean_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over the classes present in the ground truth."""
    pred, gt = _check_same_shape(pred, gt)
    classes = np.unique(gt)
    return float(np.mean([iou(pred, gt, int(c)) for c in classes]))


def bilinear_resize(probmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-channel corner-aligned bilinear interpolation of a (C, h, w) map."""
    probmap = np.asarray(probmap, dtype=np.float64)
    if probmap.ndim != 3:
        raise ShapeMismatch(f"expected (C, h, w) map, got {probmap.shape}")
    c, h, w = probmap.shape
    if h < 2 or w < 2:
        raise ShapeMismatch(f"source must be at least 2x2, got {h}x{w}")
    ys = np.linspace(0.0, h - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, width) if width > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), h - 2)
    x0 = np.minimum(xs.astype(np.int64), w - 2)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    tl = probmap[:, y0][:, :, x0]
    tr = probmap[:, y0][:, :, x0 + 1]
    bl = probmap[:, y0 + 1][:, :, x0]
    br = probmap[:, y0 + 1][:, :, x0 + 1]
    top = tl * (1.0 - wx) + tr * wx
    bot = bl * (1.0 - wx) + br * wx
    return top * (1.0 - wy) + bot * wy


def nearest_resize_labels(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of an integer mask (pixel centers, floor)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def grid_superpixels(height: int, width: int, n: int) -> np.ndarray:
    """n x n balanced rectangular superpixels, ids assigned row-major."""
    if n < 1 or n > min(height, width):
        raise InvalidGrid(f"grid size {n} invalid for {height}x{width}")
    row_edges = (np.arange(n + 1) * height) // n
    col_edges = (np.arange(n + 1) * width) // n
    ids = np.empty((height, width), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            ids[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]] = i * n + j
    return ids


def _majority(labels: np.ndarray) -> int:
    """Majority label; ties break to the lowest label id."""
    counts = np.bincount(labels.reshape(-1))
    return int(counts.argmax())


def superpixel_average_precision(pred: np.ndarray, gt: np.ndarray, sp: np.ndarray) -> float:
    """Fraction of superpixels whose majority-vote predicted label matches
    the majority-vote ground-truth label."""
    pred, gt = _check_same_shape(pred, gt)
    sp = np.asarray(sp)
    if sp.shape != pred.shape:
        raise ShapeMismatch(f"superpixel map shape {sp.shape} != {pred.shape}")
    matches = 0
    ids = np.unique(sp)
    for sid in ids:
        inside = sp == sid
        if _majority(pred[inside]) == _majority(gt[inside]):
            matches += 1
    return matches / len(ids)
