"""The segmentation model: shared trunk, image encoder, segmentation encoder,
hybrid decoder, and the optional high-resolution head.

The trunk parameters are referenced by both the image-encoder path and the
decoder's local path; gradient accumulation in the tape makes the shared
weights receive contributions from both consumers.

Resolution bookkeeping for input size H: the trunk output sits at H/4, the
image-encoder block at H/8, decoder logits at H/4, and the HR head restores
H.  Low-resolution reconstruction targets come from nearest-neighbor label
downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import LabelOutOfRange, MissingHRHead, ShapeMismatch
from .gaussian import DiagGaussian, kl_diag, kl_to_standard, reparam_sample
from .layers import affine, conv2d, maxpool2d, relu, softmax_ce_pixelwise, upsample_nearest
from .prng import SplitMix64
from .tensor import ParamRegistry, Tensor, concat, no_grad, reduce_sum, reshape

PARAM_GROUPS = ("trunk", "img_enc", "seg_enc", "decoder", "fcn_head", "hr_head")

# Decoder parameters trained as the generative half of the mask autoencoder
# (everything except the local branch, which only exists in the hybrid path).
VAE_DECODER_PARAMS = (
    "decoder/global_fc", "decoder/global_conv",
    "decoder/fuse_conv", "decoder/fuse_mid", "decoder/logits",
)


@dataclass
class ArchConfig:
    """Toy-scale architecture; every size is explicit so desk-scale tests can
    shrink the model to a few hundred parameters."""

    input_size: int = 32
    classes: int = 2
    latent_dim: int = 16
    seg_size: int = 16
    trunk_channels: tuple[int, int] = (16, 32)
    img_channels: int = 64
    seg_channels: tuple[int, int] = (16, 32)
    dec_seed_channels: int = 64
    dec_channels: int = 32
    fcn_channels: int = 32
    hr_mid_channels: int = 16
    hr_input_channels: int = 8

    def __post_init__(self):
        self.trunk_channels = tuple(self.trunk_channels)
        self.seg_channels = tuple(self.seg_channels)
        if self.input_size % 8 or self.input_size < 8:
            raise ShapeMismatch(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.seg_size % 4 or not 4 <= self.seg_size <= self.input_size:
            raise ShapeMismatch(f"seg_size must be a multiple of 4 within [4, input], got {self.seg_size}")
        if self.classes < 2:
            raise ShapeMismatch(f"need at least 2 classes, got {self.classes}")
        if self.latent_dim < 1:
            raise ShapeMismatch("latent_dim must be >= 1")

    def to_dict(self) -> dict:
        return {
            f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
            for f in fields(self)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ShapeMismatch(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def img_flat(self) -> int:
        return self.img_channels * (self.input_size // 8) ** 2

    @property
    def seg_flat(self) -> int:
        return self.seg_channels[1] * (self.seg_size // 4) ** 2

    @property
    def dec_seed_flat(self) -> int:
        return self.dec_seed_channels * (self.input_size // 8) ** 2


def _uniform_init(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    vals = [rng.uniform(-bound, bound) for _ in range(int(np.prod(shape)))]
    return np.array(vals, dtype=np.float64).reshape(shape)


class CVAEModel:
    """Parameter registry plus architecture; forward passes are the
    module-level functions below."""

    def __init__(self, arch: ArchConfig, registry: ParamRegistry, seed: int):
        self.arch = arch
        self.registry = registry
        self.seed = seed

    @classmethod
    def build(cls, arch: ArchConfig, seed: int, with_hr: bool = False) -> "CVAEModel":
        model = cls(arch, ParamRegistry(), seed)
        a = arch
        tc1, tc2 = a.trunk_channels
        sc1, sc2 = a.seg_channels
        model._add_conv("trunk/conv1", tc1, 1, 3)
        model._add_conv("trunk/conv2", tc2, tc1, 3)
        model._add_conv("img_enc/conv", a.img_channels, tc2, 3)
        model._add_affine("img_enc/mu", a.img_flat, a.latent_dim)
        model._add_affine("img_enc/log_var", a.img_flat, a.latent_dim, bias_value=-2.0)
        model._add_conv("seg_enc/conv1", sc1, a.classes, 3)
        model._add_conv("seg_enc/conv2", sc2, sc1, 3)
        model._add_affine("seg_enc/mu", a.seg_flat, a.latent_dim)
        model._add_affine("seg_enc/log_var", a.seg_flat, a.latent_dim, bias_value=-2.0)
        model._add_affine("decoder/global_fc", a.latent_dim, a.dec_seed_flat)
        model._add_conv("decoder/global_conv", a.dec_channels, a.dec_seed_channels, 3)
        model._add_conv("decoder/local_conv", a.dec_channels, tc2, 3)
        model._add_conv("decoder/fuse_conv", a.dec_channels, 2 * a.dec_channels, 3)
        model._add_conv("decoder/fuse_mid", a.dec_channels, a.dec_channels, 1)
        model._add_conv("decoder/logits", a.classes, a.dec_channels, 1)
        model._add_conv("fcn_head/conv", a.fcn_channels, tc2, 3)
        model._add_conv("fcn_head/logits", a.classes, a.fcn_channels, 1)
        if with_hr:
            model.add_hr_head()
        return model

    def _stream(self, name: str) -> SplitMix64:
        return SplitMix64.derive(self.seed, "init", name)

    def _add_conv(self, name: str, cout: int, cin: int, k: int,
                  zero_weights: bool = False) -> None:
        shape = (cout, cin, k, k)
        if zero_weights:
            w = np.zeros(shape, dtype=np.float64)
        else:
            w = _uniform_init(self._stream(name + "/w"), shape, cin * k * k, cout * k * k)
        self.registry.add(name + "/w", Tensor(w, requires_grad=True))
        self.registry.add(name + "/b", Tensor(np.zeros(cout), requires_grad=True))

    def _add_affine(self, name: str, d_in: int, d_out: int, bias_value: float = 0.0) -> None:
        w = _uniform_init(self._stream(name + "/w"), (d_in, d_out), d_in, d_out)
        self.registry.add(name + "/w", Tensor(w, requires_grad=True))
        b = np.full(d_out, bias_value, dtype=np.float64)
        self.registry.add(name + "/b", Tensor(b, requires_grad=True))

    @property
    def has_hr(self) -> bool:
        return "hr_head/skip1_conv/w" in self.registry

    def add_hr_head(self) -> None:
        """Append the high-resolution head.

        The residual output convolutions start at zero, so a fresh head
        reproduces nearest-upsampled low-resolution predictions exactly.
        """
        if self.has_hr:
            return
        a = self.arch
        tc1 = a.trunk_channels[0]
        self._add_conv("hr_head/skip1_conv", a.hr_mid_channels, a.classes + tc1, 3)
        self._add_conv("hr_head/skip1_out", a.classes, a.hr_mid_channels, 1, zero_weights=True)
        self._add_conv("hr_head/input_conv", a.hr_input_channels, 1, 3)
        self._add_conv("hr_head/skip2_conv", a.hr_mid_channels, a.classes + a.hr_input_channels, 3)
        self._add_conv("hr_head/skip2_out", a.classes, a.hr_mid_channels, 1, zero_weights=True)


@dataclass
class LossBreakdown:
    """Scalar loss tensors; objective is literally kl + recon_nll."""

    kl: Tensor
    recon_nll: Tensor
    objective: Tensor

    @property
    def values(self) -> tuple[float, float, float]:
        return self.kl.item(), self.recon_nll.item(), self.objective.item()


# -- forward passes --------------------------------------------------------------

def trunk_features(model: CVAEModel, x: Tensor) -> tuple[Tensor, Tensor]:
    """Shared convolution stack; returns (H/4 features, H/2 features)."""
    r = model.registry
    h1 = relu(conv2d(x, r["trunk/conv1/w"], r["trunk/conv1/b"], stride=1, pad=1))
    f1 = maxpool2d(h1, 2, 2)
    h2 = relu(conv2d(f1, r["trunk/conv2/w"], r["trunk/conv2/b"], stride=1, pad=1))
    f2 = maxpool2d(h2, 2, 2)
    return f2, f1


def _check_image(model: CVAEModel, x: Tensor) -> None:
    h = model.arch.input_size
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2] != h or x.shape[3] != h:
        raise ShapeMismatch(f"expected images of shape (N, 1, {h}, {h}), got {x.shape}")


def encode_image(model: CVAEModel, x: Tensor, trunk_out: Tensor | None = None) -> DiagGaussian:
    """p(z|x): trunk -> extra block -> parallel mean / log-variance heads."""
    _check_image(model, x)
    r = model.registry
    f2 = trunk_out if trunk_out is not None else trunk_features(model, x)[0]
    h = relu(conv2d(f2, r["img_enc/conv/w"], r["img_enc/conv/b"], stride=1, pad=1))
    p = maxpool2d(h, 2, 2)
    flat = reshape(p, (p.shape[0], model.arch.img_flat))
    mu = affine(flat, r["img_enc/mu/w"], r["img_enc/mu/b"])
    log_var = affine(flat, r["img_enc/log_var/w"], r["img_enc/log_var/b"])
    return DiagGaussian(mu, log_var)


def downsample_labels(s: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor label downsampling (pixel centers, floor rounding)."""
    s = np.asarray(s)
    n, h, w = s.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return s[:, rows[:, None], cols[None, :]]


def one_hot_downsample(s: np.ndarray, size: int, classes: int) -> Tensor:
    """Downsample an integer mask and expand to one-hot channels."""
    s = np.asarray(s)
    if s.ndim != 3:
        raise ShapeMismatch(f"expected masks of shape (N, H, W), got {s.shape}")
    if size > s.shape[1]:
        raise ShapeMismatch(f"target size {size} exceeds mask size {s.shape[1]}")
    if s.min() < 0 or s.max() >= classes:
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    small = downsample_labels(s, size)
    onehot = (small[:, None] == np.arange(classes)[None, :, None, None]).astype(np.float64)
    return Tensor(onehot)


def encode_segmentation(model: CVAEModel, s: np.ndarray) -> DiagGaussian:
    """q(z|s): one-hot downsampled mask -> conv stack -> parallel heads."""
    a = model.arch
    r = model.registry
    onehot = one_hot_downsample(s, a.seg_size, a.classes)
    h1 = relu(conv2d(onehot, r["seg_enc/conv1/w"], r["seg_enc/conv1/b"], stride=1, pad=1))
    p1 = maxpool2d(h1, 2, 2)
    h2 = relu(conv2d(p1, r["seg_enc/conv2/w"], r["seg_enc/conv2/b"], stride=1, pad=1))
    p2 = maxpool2d(h2, 2, 2)
    flat = reshape(p2, (p2.shape[0], a.seg_flat))
    mu = affine(flat, r["seg_enc/mu/w"], r["seg_enc/mu/b"])
    log_var = affine(flat, r["seg_enc/log_var/w"], r["seg_enc/log_var/b"])
    return DiagGaussian(mu, log_var)


def _global_branch(model: CVAEModel, z: Tensor) -> Tensor:
    a = model.arch
    r = model.registry
    n = z.shape[0]
    g = relu(affine(z, r["decoder/global_fc/w"], r["decoder/global_fc/b"]))
    g = reshape(g, (n, a.dec_seed_channels, a.input_size // 8, a.input_size // 8))
    g = upsample_nearest(g, 2)
    return relu(conv2d(g, r["decoder/global_conv/w"], r["decoder/global_conv/b"], stride=1, pad=1))


def _fuse(model: CVAEModel, global_feat: Tensor, local_feat: Tensor) -> Tensor:
    r = model.registry
    fused = concat([global_feat, local_feat], axis=1)
    h = relu(conv2d(fused, r["decoder/fuse_conv/w"], r["decoder/fuse_conv/b"], stride=1, pad=1))
    h = relu(conv2d(h, r["decoder/fuse_mid/w"], r["decoder/fuse_mid/b"]))
    return conv2d(h, r["decoder/logits/w"], r["decoder/logits/b"])


def decode(model: CVAEModel, z: Tensor, x: Tensor, trunk_out: Tensor | None = None) -> Tensor:
    """Hybrid decoder p(s|z,x): global branch from z fused with the local
    branch computed from the shared trunk.  Logits at input_size/4."""
    if z.data.ndim != 2 or z.shape[1] != model.arch.latent_dim:
        raise ShapeMismatch(f"decode: z must be (N, {model.arch.latent_dim}), got {z.shape}")
    r = model.registry
    f2 = trunk_out if trunk_out is not None else trunk_features(model, x)[0]
    local = relu(conv2d(f2, r["decoder/local_conv/w"], r["decoder/local_conv/b"], stride=1, pad=1))
    return _fuse(model, _global_branch(model, z), local)


def decode_global_only(model: CVAEModel, z: Tensor) -> Tensor:
    """Decode from the latent code alone; the local branch is replaced by
    zeros.  Used by mask-autoencoder pretraining and the coding-only
    prediction variant."""
    a = model.arch
    g = _global_branch(model, z)
    zeros = Tensor(np.zeros((z.shape[0], a.dec_channels, a.input_size // 4, a.input_size // 4)))
    return _fuse(model, g, zeros)


def fcn_logits(model: CVAEModel, x: Tensor, trunk_out: Tensor | None = None) -> Tensor:
    """Dense classifier head on the trunk; the no-latent baseline."""
    r = model.registry
    f2 = trunk_out if trunk_out is not None else trunk_features(model, x)[0]
    h = relu(conv2d(f2, r["fcn_head/conv/w"], r["fcn_head/conv/b"], stride=1, pad=1))
    return conv2d(h, r["fcn_head/logits/w"], r["fcn_head/logits/b"])


def hr_logits_from(model: CVAEModel, lr_logits: Tensor, f1: Tensor, x: Tensor) -> Tensor:
    """High-resolution head: upsample, concatenate skip features, and apply
    residual refinements.  With the residual output convolutions at zero the
    result is exactly the nearest-upsampled low-resolution logits."""
    if not model.has_hr:
        raise MissingHRHead("model has no high-resolution head")
    r = model.registry
    u1 = upsample_nearest(lr_logits, 2)
    h1 = relu(conv2d(concat([u1, f1], axis=1), r["hr_head/skip1_conv/w"],
                     r["hr_head/skip1_conv/b"], stride=1, pad=1))
    l1 = u1 + conv2d(h1, r["hr_head/skip1_out/w"], r["hr_head/skip1_out/b"])
    u2 = upsample_nearest(l1, 2)
    xf = relu(conv2d(x, r["hr_head/input_conv/w"], r["hr_head/input_conv/b"], stride=1, pad=1))
    h2 = relu(conv2d(concat([u2, xf], axis=1), r["hr_head/skip2_conv/w"],
                     r["hr_head/skip2_conv/b"], stride=1, pad=1))
    return u2 + conv2d(h2, r["hr_head/skip2_out/w"], r["hr_head/skip2_out/b"])


# -- losses ------------------------------------------------------------------------

def _batch_mean(per_sample: Tensor) -> Tensor:
    return reduce_sum(per_sample) * (1.0 / per_sample.shape[0])


def _as_eps_stack(eps: np.ndarray | Tensor, n: int, d: int) -> np.ndarray:
    arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (n, d):
        raise ShapeMismatch(f"eps must be (L, {n}, {d}), got {arr.shape}")
    return arr


def loss_cvae(model: CVAEModel, x: Tensor, s: np.ndarray, eps, L: int | None = None) -> LossBreakdown:
    """Training objective: KL(q(z|s) || p(z|x)) plus expected reconstruction
    negative log-likelihood, estimated with the L supplied noise blocks."""
    _check_image(model, x)
    n = x.shape[0]
    eps = _as_eps_stack(eps, n, model.arch.latent_dim)
    if L is not None and eps.shape[0] != L:
        raise ShapeMismatch(f"eps provides {eps.shape[0]} blocks, expected L={L}")
    f2, _ = trunk_features(model, x)
    q = encode_segmentation(model, s)
    p = encode_image(model, x, trunk_out=f2)
    kl = _batch_mean(kl_diag(q, p))
    targets = downsample_labels(s, model.arch.input_size // 4)
    recon = None
    for block in eps:
        z = reparam_sample(q, Tensor(block))
        ce, _ = softmax_ce_pixelwise(decode(model, z, x, trunk_out=f2), targets)
        recon = ce if recon is None else recon + ce
    recon = recon * (1.0 / eps.shape[0])
    return LossBreakdown(kl=kl, recon_nll=recon, objective=kl + recon)


def loss_seg_vae(model: CVAEModel, s: np.ndarray, eps, L: int | None = None) -> LossBreakdown:
    """Mask-autoencoder objective: KL to the standard prior plus
    reconstruction through the latent-only decoder."""
    q = encode_segmentation(model, s)
    n = q.shape[0]
    eps = _as_eps_stack(eps, n, model.arch.latent_dim)
    if L is not None and eps.shape[0] != L:
        raise ShapeMismatch(f"eps provides {eps.shape[0]} blocks, expected L={L}")
    kl = _batch_mean(kl_to_standard(q))
    targets = downsample_labels(np.asarray(s), model.arch.input_size // 4)
    recon = None
    for block in eps:
        z = reparam_sample(q, Tensor(block))
        ce, _ = softmax_ce_pixelwise(decode_global_only(model, z), targets)
        recon = ce if recon is None else recon + ce
    recon = recon * (1.0 / eps.shape[0])
    return LossBreakdown(kl=kl, recon_nll=recon, objective=kl + recon)


def loss_image_encoder(model: CVAEModel, x: Tensor, s: np.ndarray, eps, L: int | None = None) -> LossBreakdown:
    """Alignment objective: KL from the (frozen) segmentation coding to the
    image coding, plus reconstruction through the frozen latent-only
    decoder.  Only the KL term carries gradient to the image encoder."""
    _check_image(model, x)
    q = encode_segmentation(model, s)
    p = encode_image(model, x)
    n = x.shape[0]
    eps = _as_eps_stack(eps, n, model.arch.latent_dim)
    if L is not None and eps.shape[0] != L:
        raise ShapeMismatch(f"eps provides {eps.shape[0]} blocks, expected L={L}")
    kl = _batch_mean(kl_diag(q, p))
    targets = downsample_labels(np.asarray(s), model.arch.input_size // 4)
    recon = None
    for block in eps:
        z = reparam_sample(q, Tensor(block))
        ce, _ = softmax_ce_pixelwise(decode_global_only(model, z), targets)
        recon = ce if recon is None else recon + ce
    recon = recon * (1.0 / eps.shape[0])
    return LossBreakdown(kl=kl, recon_nll=recon, objective=kl + recon)


def loss_fcn(model: CVAEModel, x: Tensor, s: np.ndarray) -> LossBreakdown:
    """Baseline dense-classifier loss for trunk pretraining."""
    _check_image(model, x)
    targets = downsample_labels(np.asarray(s), model.arch.input_size // 4)
    ce, _ = softmax_ce_pixelwise(fcn_logits(model, x), targets)
    return LossBreakdown(kl=Tensor(0.0), recon_nll=ce, objective=ce)


def loss_hr(model: CVAEModel, x: Tensor, s: np.ndarray) -> LossBreakdown:
    """Full-resolution cross-entropy for the HR head; base features are
    computed without gradient (the base model is frozen here)."""
    _check_image(model, x)
    with no_grad():
        f2, f1 = trunk_features(model, x)
        p = encode_image(model, x, trunk_out=f2)
        lr = decode(model, p.mu, x, trunk_out=f2)
    logits = hr_logits_from(model, lr.detach(), f1.detach(), x)
    ce, _ = softmax_ce_pixelwise(logits, np.asarray(s))
    return LossBreakdown(kl=Tensor(0.0), recon_nll=ce, objective=ce)


# -- prediction ----------------------------------------------------------------------

def predict(model: CVAEModel, x: Tensor, mode: str = "mean", seed: int | None = None
            ) -> tuple[np.ndarray, Tensor]:
    """Segment images: code from the image encoder (its mean by default, or
    one reparameterized draw for mode="sample"), decoded with the hybrid
    decoder.  Returns (labels at input/4, logits)."""
    _check_image(model, x)
    with no_grad():
        f2, _ = trunk_features(model, x)
        p = encode_image(model, x, trunk_out=f2)
        if mode == "mean":
            z = p.mu
        elif mode == "sample":
            rng = SplitMix64.derive(0 if seed is None else seed, "predict")
            eps = np.array(rng.gaussians(p.mu.size), dtype=np.float64).reshape(p.shape)
            z = reparam_sample(p, Tensor(eps))
        else:
            raise ValueError(f"unknown predict mode {mode!r}")
        logits = decode(model, z, x, trunk_out=f2)
    return logits.data.argmax(axis=1), logits


def predict_global_only(model: CVAEModel, x: Tensor) -> tuple[np.ndarray, Tensor]:
    """Coding-only prediction: decode the image-encoder mean without the
    local branch.  Shows what the high-level code alone reconstructs."""
    _check_image(model, x)
    with no_grad():
        p = encode_image(model, x)
        logits = decode_global_only(model, p.mu)
    return logits.data.argmax(axis=1), logits


def predict_fcn(model: CVAEModel, x: Tensor) -> tuple[np.ndarray, Tensor]:
    """Baseline prediction from the trunk classifier head."""
    _check_image(model, x)
    with no_grad():
        logits = fcn_logits(model, x)
    return logits.data.argmax(axis=1), logits


def predict_hr(model: CVAEModel, x: Tensor) -> tuple[np.ndarray, Tensor]:
    """Full-resolution prediction through the HR head (mean code path)."""
    _check_image(model, x)
    if not model.has_hr:
        raise MissingHRHead("predict_hr requires a trained high-resolution head")
    with no_grad():
        f2, f1 = trunk_features(model, x)
        p = encode_image(model, x, trunk_out=f2)
        lr = decode(model, p.mu, x, trunk_out=f2)
        logits = hr_logits_from(model, lr, f1, x)
    return logits.data.argmax(axis=1), logits
