"""Differentiable CNN building blocks: convolution, pooling, upsampling,
affine maps, ReLU, and the pixelwise softmax cross-entropy.

Convolution uses the cross-correlation convention (no kernel flip).  All
kernels are vectorized over patches; the k*k scatter loops in the backward
passes keep accumulation order fixed, so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidFactor, InvalidStride, LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, _make, binary_op, matmul

_active_probe = None


class DegeneracyProbe:
    """Records how close a forward pass comes to gradient-check blind spots:
    the smallest |pre-activation| seen by any ReLU and the smallest gap
    between the top two entries of any pooling window with a positive
    maximum.  Finite-difference checks are only meaningful when both margins
    exceed the perturbation scale."""

    def __init__(self):
        self.relu_margin = float("inf")
        self.pool_gap = float("inf")

    def __enter__(self):
        global _active_probe
        self._prev = _active_probe
        _active_probe = self
        return self

    def __exit__(self, *exc):
        global _active_probe
        _active_probe = self._prev
        return False


def _gather_patches(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (N, oh, ow, C, kh, kw) patches from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            view = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            cols[:, :, :, :, ki, kj] = view.transpose(0, 2, 3, 1)
    return cols


def _conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution as a channel matmul."""
    n, cin, h, wid = x.shape
    cout = w.shape[0]
    wmat = w.data.reshape(cout, cin)
    out = np.einsum("oc,nchw->nohw", wmat, x.data, optimize=True) \
        + b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True).reshape(w.shape)
        gx = np.einsum("oc,nohw->nchw", wmat, g, optimize=True)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), bwd, "conv2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution over NCHW input with per-output-channel bias."""
    if stride < 1:
        raise InvalidStride(f"conv2d: stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected rank-4 input/kernel, got {x.shape}, {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({cout},)")
    if h + 2 * pad < kh or wid + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input")
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, w, b)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _gather_patches(xp, kh, kw, stride, oh, ow)
    cols_mat = cols.reshape(n * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols_mat @ wmat.T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)) \
        + b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (gmat.T @ cols_mat).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                target = gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
                target += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wid] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _make(out, (x, w, b), bwd, "conv2d")


def maxpool2d(x: Tensor, k: int, s: int) -> Tensor:
    """Max pooling; ties route the gradient to the first maximum in
    row-major scan order within the window."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k or (h - k) % s or (w - k) % s:
        raise ShapeMismatch(f"maxpool2d: windows k={k}, s={s} do not tile {h}x{w}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    flat = np.empty((n, c, oh, ow, k * k), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            flat[..., ki * k + kj] = x.data[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s]
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if _active_probe is not None and k * k >= 2:
        top2 = np.partition(flat, k * k - 2, axis=-1)[..., -2:]
        gaps = top2[..., 1] - top2[..., 0]
        live = top2[..., 1] > 1e-12
        if np.any(live):
            _active_probe.pool_gap = min(_active_probe.pool_gap, float(gaps[live].min()))

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        for ki in range(k):
            for kj in range(k):
                gx[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += gflat[..., ki * k + kj]
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each element into a factor x factor block."""
    if factor < 1:
        raise InvalidFactor(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample_nearest: expected rank-4 input, got {x.shape}")
    if factor == 1:
        data = x.data.copy()

        def bwd_id(g):
            return (g,)

        return _make(data, (x,), bwd_id, "upsample_nearest")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(data), (x,), bwd, "upsample_nearest")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for batched row vectors."""
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"affine: bias shape {b.shape} incompatible with {w.shape}")
    return binary_op("add", matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    if _active_probe is not None and x.size:
        _active_probe.relu_margin = min(_active_probe.relu_margin,
                                        float(np.abs(x.data).min()))
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _make(data, (x,), bwd, "relu")


def softmax_ce_pixelwise(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Pixelwise categorical cross-entropy.

    Per-pixel log-likelihoods are summed within a sample and averaged over
    the batch, so a batch of one yields exactly the negative log-likelihood
    of its mask.  Returns (loss, logprobs); logprobs are detached and
    normalized over the channel axis.
    """
    if logits.data.ndim != 4:
        raise ShapeMismatch(f"softmax_ce: expected N,C,H,W logits, got {logits.shape}")
    n, c, h, w = logits.shape
    if c < 2:
        raise ShapeMismatch(f"softmax_ce: need at least 2 classes, got {c}")
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeMismatch(f"softmax_ce: labels shape {labels.shape} != {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(
            f"softmax_ce: labels must lie in [0, {c}), found [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - lse
    picked = np.take_along_axis(logprobs, labels[:, None], axis=1)[:, 0]
    loss_val = -picked.sum() / n

    def bwd(g):
        soft = np.exp(logprobs)
        soft[np.arange(n)[:, None, None], labels, np.arange(h)[:, None], np.arange(w)] -= 1.0
        return (soft * (float(g) / n),)

    loss = _make(np.asarray(loss_val, dtype=np.float64), (logits,), bwd, "softmax_ce")
    return loss, Tensor(logprobs)
