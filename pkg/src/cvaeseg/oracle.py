"""Independent verification machinery.

Nothing here reuses the library's numerical kernels: log-densities,
log-sum-exp reductions, the closed-form KL reference, and vote counting are
re-implemented with plain numpy so a bug in the main code paths cannot hide
in its own oracle.  The model under test is only ever evaluated through its
public forward functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, DimTooLarge
from .gaussian import DiagGaussian
from .model import (
    ArchConfig,
    CVAEModel,
    decode,
    downsample_labels,
    encode_image,
    encode_segmentation,
    loss_cvae,
    trunk_features,
)
from .layers import DegeneracyProbe, conv2d, relu, softmax_ce_pixelwise
from .tensor import ParamRegistry, Tensor, backward, no_grad, zero_grad


# -- finite differences ------------------------------------------------------------

def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Worst relative disagreement; tiny magnitudes compare against `floor`
    so finite-difference noise on near-zero coordinates cannot dominate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def get_param_vector(registry: ParamRegistry, names: list[str]) -> np.ndarray:
    return np.concatenate([registry[n].data.reshape(-1) for n in names])


def set_param_vector(registry: ParamRegistry, names: list[str], vec: np.ndarray) -> None:
    at = 0
    for n in names:
        p = registry[n]
        p.data[...] = vec[at:at + p.size].reshape(p.shape)
        at += p.size
    if at != vec.size:
        raise DimMismatch(f"vector length {vec.size} does not match parameters ({at})")


def check_gradients(loss_builder, registry: ParamRegistry, names: list[str] | None = None,
                    h: float = 1e-5) -> float:
    """Compare tape gradients with central differences over the named
    parameters; returns the worst relative error.

    `loss_builder` must rebuild the loss tensor from the registry's current
    values on every call.
    """
    if names is None:
        names = registry.names()
    zero_grad(registry)
    backward(loss_builder())
    analytic = np.concatenate([registry[n].grad.reshape(-1) for n in names])

    theta0 = get_param_vector(registry, names)

    def f(theta: np.ndarray) -> float:
        set_param_vector(registry, names, theta)
        with no_grad():
            value = loss_builder().item()
        return value

    try:
        numeric = finite_diff_grad(f, theta0, h)
    finally:
        set_param_vector(registry, names, theta0)
    return max_rel_err(analytic, numeric)


# -- Gaussian references -------------------------------------------------------------

def gauss_log_pdf(mu: np.ndarray, log_var: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Independent diagonal-Gaussian log density, summed over the last axis."""
    var = np.exp(log_var)
    return (-0.5 * (math.log(2.0 * math.pi) + log_var) - (z - mu) ** 2 / (2.0 * var)).sum(axis=-1)


def kl_closed_reference(mu_q, log_var_q, mu_p, log_var_p) -> float:
    """Closed-form KL(q || p) recomputed outside the tensor library."""
    vq = np.exp(np.asarray(log_var_q, dtype=np.float64))
    vp = np.exp(np.asarray(log_var_p, dtype=np.float64))
    dm = np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64)
    terms = 0.5 * (np.asarray(log_var_p) - np.asarray(log_var_q)) + (vq + dm ** 2) / (2.0 * vp) - 0.5
    return float(terms.sum())


def mc_kl(q: DiagGaussian, p: DiagGaussian, n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo KL(q || p): mean and standard error of log q(z) - log p(z)
    over n reparameterized draws z ~ q."""
    if q.shape != p.shape:
        raise DimMismatch(f"mc_kl: shapes differ, {q.shape} vs {p.shape}")
    if n < 2:
        raise ValueError("mc_kl needs at least two draws")
    mu_q = q.mu.data.reshape(-1)
    lv_q = q.log_var.data.reshape(-1)
    mu_p = p.mu.data.reshape(-1)
    lv_p = p.log_var.data.reshape(-1)
    gen = np.random.Generator(np.random.PCG64(seed))
    eps = gen.standard_normal((n, mu_q.size))
    z = mu_q + np.exp(0.5 * lv_q) * eps
    vals = gauss_log_pdf(mu_q, lv_q, z) - gauss_log_pdf(mu_p, lv_p, z)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


# -- Gauss-Hermite quadrature ----------------------------------------------------------

def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Physicists' Gauss-Hermite nodes and weights (integral against e^{-t^2})."""
    return np.polynomial.hermite.hermgauss(n)


def _logsumexp(values: np.ndarray) -> float:
    m = float(values.max())
    return m + math.log(float(np.exp(values - m).sum()))


def _log_likelihoods(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample log p(labels | logits): stable log-softmax gathered at the
    labels and summed over pixels.  Re-implemented here on purpose."""
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    n = logits.shape[0]
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)[:, 0]
    return picked.reshape(n, -1).sum(axis=1)


def _latent_grid(mu: np.ndarray, log_var: np.ndarray, nodes_per_dim: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes z = mu + sqrt(2)*sigma*t per dimension and the
    normalized log-weights of the product rule."""
    d = mu.size
    t, w = gauss_hermite(nodes_per_dim)
    sigma = np.exp(0.5 * log_var)
    axes_z = [mu[k] + math.sqrt(2.0) * sigma[k] * t for k in range(d)]
    axes_logw = [np.log(w) - 0.5 * math.log(math.pi)] * d
    if d == 1:
        return axes_z[0][:, None], axes_logw[0]
    za, zb = np.meshgrid(axes_z[0], axes_z[1], indexing="ij")
    lw = axes_logw[0][:, None] + axes_logw[1][None, :]
    return np.stack([za.reshape(-1), zb.reshape(-1)], axis=1), lw.reshape(-1)


def _decode_log_likelihoods(model: CVAEModel, x: Tensor, targets: np.ndarray,
                            z_nodes: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """log p(s | z, x) at each latent node, decoding in batches."""
    with no_grad():
        f2, _ = trunk_features(model, x)
    out = np.empty(z_nodes.shape[0], dtype=np.float64)
    for lo in range(0, z_nodes.shape[0], chunk):
        zc = z_nodes[lo:lo + chunk]
        m = zc.shape[0]
        f2_tiled = Tensor(np.broadcast_to(f2.data, (m,) + f2.shape[1:]).copy())
        with no_grad():
            logits = decode(model, Tensor(zc), x, trunk_out=f2_tiled)
        tiled_targets = np.broadcast_to(targets, (m,) + targets.shape[1:])
        out[lo:lo + m] = _log_likelihoods(logits.data, tiled_targets)
    return out


def quadrature_log_marginal(model: CVAEModel, x: Tensor, s: np.ndarray,
                            nodes_per_dim: int = 64) -> float:
    """log p(s|x) by Gauss-Hermite integration of the decoder likelihood
    against the image-encoder Gaussian.  Latent dimension must be at most 2."""
    d = model.arch.latent_dim
    if d > 2:
        raise DimTooLarge(f"quadrature supports latent dim <= 2, got {d}")
    if x.shape[0] != 1:
        raise DimMismatch("quadrature expects a single sample")
    with no_grad():
        p = encode_image(model, x)
    targets = downsample_labels(np.asarray(s), model.arch.input_size // 4)
    z_nodes, logw = _latent_grid(p.mu.data[0], p.log_var.data[0], nodes_per_dim)
    ll = _decode_log_likelihoods(model, x, targets, z_nodes)
    return _logsumexp(logw + ll)


def quadrature_expected_nll(model: CVAEModel, x: Tensor, s: np.ndarray,
                            nodes_per_dim: int = 64) -> float:
    """E_{q(z|s)}[-log p(s|z,x)] by quadrature over the segmentation encoder."""
    d = model.arch.latent_dim
    if d > 2:
        raise DimTooLarge(f"quadrature supports latent dim <= 2, got {d}")
    with no_grad():
        q = encode_segmentation(model, s)
    targets = downsample_labels(np.asarray(s), model.arch.input_size // 4)
    z_nodes, logw = _latent_grid(q.mu.data[0], q.log_var.data[0], nodes_per_dim)
    ll = _decode_log_likelihoods(model, x, targets, z_nodes)
    return float((np.exp(logw) * -ll).sum())


def elbo_quadrature(model: CVAEModel, x: Tensor, s: np.ndarray,
                    nodes_per_dim: int = 64) -> float:
    """Exact-expectation evidence lower bound: -KL(q||p) + E_q[log p(s|z,x)],
    with the expectation evaluated by quadrature and the KL by the closed
    form recomputed here."""
    with no_grad():
        q = encode_segmentation(model, s)
        p = encode_image(model, x)
    kl = kl_closed_reference(q.mu.data[0], q.log_var.data[0],
                             p.mu.data[0], p.log_var.data[0])
    return -kl - quadrature_expected_nll(model, x, s, nodes_per_dim)


# -- SGVB estimator check ----------------------------------------------------------------

SEG_HEAD_PARAMS = ["seg_enc/mu/w", "seg_enc/mu/b", "seg_enc/log_var/w", "seg_enc/log_var/b"]


@dataclass
class SgvbReport:
    estimate: np.ndarray
    stderr: np.ndarray
    oracle: np.ndarray
    fd_noise: float  # absolute noise floor of the finite-difference oracle
    max_sigma: float
    passed: bool


def sgvb_gradient_check(model: CVAEModel, x: Tensor, s: np.ndarray, n_samples: int = 100_000,
                        seed: int = 0, chunk: int = 2000, nodes_per_dim: int = 64,
                        fd_h: float = 1e-5) -> SgvbReport:
    """Compare the reparameterized gradient estimator of the reconstruction
    term with finite differences of its quadrature-evaluated expectation.

    The estimator runs through the library's tape in chunks of identical
    inputs; chunk means are i.i.d., so their spread gives the empirical
    standard error of the overall mean.  Agreement is required within three
    standard errors per encoder-head coordinate.
    """
    if model.arch.latent_dim > 2:
        raise DimTooLarge("sgvb check requires latent dim <= 2")
    n_chunks = max(2, n_samples // chunk)
    d = model.arch.latent_dim
    registry = model.registry

    s_one = np.asarray(s)
    targets = downsample_labels(s_one, model.arch.input_size // 4)
    s_tiled = np.broadcast_to(s_one, (chunk,) + s_one.shape[1:])
    x_tiled = Tensor(np.broadcast_to(x.data, (chunk,) + x.shape[1:]).copy())
    targets_tiled = np.broadcast_to(targets, (chunk,) + targets.shape[1:])

    gen = np.random.Generator(np.random.PCG64(seed))
    chunk_means = np.empty((n_chunks, sum(registry[n].size for n in SEG_HEAD_PARAMS)))
    from .gaussian import reparam_sample  # local to keep module imports acyclic-clear

    for k in range(n_chunks):
        eps = gen.standard_normal((chunk, d))
        zero_grad(registry)
        q = encode_segmentation(model, s_tiled)
        z = reparam_sample(q, Tensor(eps))
        ce, _ = softmax_ce_pixelwise(decode(model, z, x_tiled), targets_tiled)
        backward(ce)
        chunk_means[k] = np.concatenate(
            [registry[n].grad.reshape(-1) for n in SEG_HEAD_PARAMS])

    estimate = chunk_means.mean(axis=0)
    stderr = chunk_means.std(axis=0, ddof=1) / math.sqrt(n_chunks)

    theta0 = get_param_vector(registry, SEG_HEAD_PARAMS)

    def expected_nll(theta: np.ndarray) -> float:
        set_param_vector(registry, SEG_HEAD_PARAMS, theta)
        return quadrature_expected_nll(model, x, s_one, nodes_per_dim)

    try:
        base_value = expected_nll(theta0)
        oracle = finite_diff_grad(expected_nll, theta0, fd_h)
    finally:
        set_param_vector(registry, SEG_HEAD_PARAMS, theta0)

    # the central difference of a value of magnitude |f| carries rounding
    # noise of order eps*|f|/(2h); coordinates below that floor are
    # indistinguishable from zero for the oracle
    fd_noise = 4.0 * np.finfo(np.float64).eps * max(1.0, abs(base_value)) / (2.0 * fd_h)
    diff = np.abs(estimate - oracle)
    band = 3.0 * stderr + fd_noise
    sigmas = diff / (stderr + fd_noise / 3.0)
    return SgvbReport(estimate=estimate, stderr=stderr, oracle=oracle, fd_noise=fd_noise,
                      max_sigma=float(sigmas.max()), passed=bool(np.all(diff <= band)))


# -- verification suite ----------------------------------------------------------------------

def tiny_arch(latent_dim: int = 2) -> ArchConfig:
    return ArchConfig(input_size=8, classes=2, latent_dim=latent_dim, seg_size=4,
                      trunk_channels=(2, 3), img_channels=4, seg_channels=(2, 3),
                      dec_seed_channels=4, dec_channels=3, fcn_channels=3,
                      hr_mid_channels=2, hr_input_channels=2)


def tiny_model(seed: int, latent_dim: int = 2, with_hr: bool = False) -> CVAEModel:
    return CVAEModel.build(tiny_arch(latent_dim), seed, with_hr=with_hr)


def random_instance(seed: int, arch: ArchConfig) -> tuple[Tensor, np.ndarray]:
    """A random image/mask pair shaped for the given architecture."""
    gen = np.random.Generator(np.random.PCG64(seed))
    h = arch.input_size
    x = Tensor(gen.uniform(0.0, 1.0, size=(1, 1, h, h)))
    s = (gen.uniform(size=(1, h, h)) < 0.4).astype(np.int64)
    return x, s


def nondegenerate_instances(count: int, margin: float = 1e-3, base_seed: int = 0,
                            latent_dim: int = 2) -> list[tuple[CVAEModel, Tensor, np.ndarray, np.ndarray]]:
    """Deterministically select random tiny instances whose forward pass stays
    clear of ReLU kinks and pooling ties by `margin`, so finite differences
    measure the same function the tape differentiates."""
    picked = []
    attempt = 0
    while len(picked) < count:
        model = tiny_model(base_seed + 90_000 + attempt, latent_dim=latent_dim)
        x, s = random_instance(base_seed + 91_000 + attempt, model.arch)
        eps = np.random.Generator(np.random.PCG64(base_seed + 92_000 + attempt)) \
            .standard_normal((1, 1, model.arch.latent_dim))
        with DegeneracyProbe() as probe, no_grad():
            loss_cvae(model, x, s, eps)
        if min(probe.relu_margin, probe.pool_gap) > margin:
            picked.append((model, x, s, eps))
        attempt += 1
    return picked


# Weight scales keeping the bias-lifted decoder's dynamic range moderate.
_SMOOTH_SCALES = {
    "decoder/global_fc/w": 0.5,
    "decoder/global_conv/w": 0.1,
    "decoder/fuse_conv/w": 0.1,
    "decoder/fuse_mid/w": 0.3,
}


def smooth_verification_model(seed: int, x: Tensor, s: np.ndarray, latent_dim: int = 2,
                              t_radius: float = 13.0, margin: float = 0.1) -> CVAEModel:
    """Random tiny model whose decoder ReLUs are provably linear over the
    latent box spanned by both encoders out to `t_radius` scaled units.

    Gauss-Hermite quadrature converges spectrally only for smooth
    integrands; interval-propagated bias lifts guarantee every z-dependent
    pre-activation stays positive across all quadrature nodes, while the
    z-sensitive linear terms are untouched.
    """
    model = tiny_model(seed, latent_dim=latent_dim)
    r = model.registry
    for name, scale in _SMOOTH_SCALES.items():
        r[name].data *= scale

    a = model.arch
    with no_grad():
        q = encode_segmentation(model, s)
        p = encode_image(model, x)
        f2, _ = trunk_features(model, x)
        local = relu(conv2d(f2, r["decoder/local_conv/w"], r["decoder/local_conv/b"],
                            stride=1, pad=1))

    span = math.sqrt(2.0) * t_radius
    lows, highs = [], []
    for g in (p, q):
        mu = g.mu.data.reshape(-1, a.latent_dim)
        sd = np.exp(0.5 * g.log_var.data).reshape(-1, a.latent_dim)
        lows.append((mu - span * sd).min(axis=0))
        highs.append((mu + span * sd).max(axis=0))
    lo_z = np.minimum.reduce(lows) - 0.5
    hi_z = np.maximum.reduce(highs) + 0.5
    center = 0.5 * (lo_z + hi_z)
    radius = 0.5 * (hi_z - lo_z)

    w = r["decoder/global_fc/w"].data
    b = r["decoder/global_fc/b"]
    base = center @ w
    dev = radius @ np.abs(w)
    lo_u = base - dev + b.data
    lift = np.maximum(0.0, margin - lo_u)
    b.data += lift
    lo_u += lift
    hi_u = base + dev + b.data
    per = (a.input_size // 8) ** 2
    lo_c = lo_u.reshape(a.dec_seed_channels, per).min(axis=1)
    hi_c = hi_u.reshape(a.dec_seed_channels, per).max(axis=1)

    def lift_conv(stem: str, lo_in: np.ndarray, hi_in: np.ndarray, padded: bool
                  ) -> tuple[np.ndarray, np.ndarray]:
        kw = r[stem + "/w"].data
        kb = r[stem + "/b"]
        lo_e = np.minimum(lo_in, 0.0) if padded else lo_in
        hi_e = np.maximum(hi_in, 0.0) if padded else hi_in
        wpos = np.maximum(kw, 0.0).sum(axis=(2, 3))
        wneg = np.minimum(kw, 0.0).sum(axis=(2, 3))
        lo_o = wpos @ lo_e + wneg @ hi_e + kb.data
        hi_o = wpos @ hi_e + wneg @ lo_e + kb.data
        shift = np.maximum(0.0, margin - lo_o)
        kb.data += shift
        return lo_o + shift, hi_o + shift

    lo_c, hi_c = lift_conv("decoder/global_conv", lo_c, hi_c, padded=True)
    lo_local = local.data.min(axis=(0, 2, 3))
    hi_local = local.data.max(axis=(0, 2, 3))
    lo_cat = np.concatenate([lo_c, lo_local])
    hi_cat = np.concatenate([hi_c, hi_local])
    lo_c, hi_c = lift_conv("decoder/fuse_conv", lo_cat, hi_cat, padded=True)
    lift_conv("decoder/fuse_mid", lo_c, hi_c, padded=False)
    return model


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return f"{status} {self.name} measured={self.measured:.3e} threshold={self.threshold:.3e}{extra}"


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> CheckResult | None:
        for c in self.checks:
            if not c.passed:
                return c
        return None

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} overall "
                     f"({sum(c.passed for c in self.checks)}/{len(self.checks)} checks)")
        return "\n".join(lines) + "\n"


def _zero_global_fusion(model: CVAEModel) -> None:
    """Cut the latent path in the fusion convolution so the decoder output
    no longer depends on z (constant-integrand fixtures)."""
    dc = model.arch.dec_channels
    model.registry["decoder/fuse_conv/w"].data[:, :dc] = 0.0


def run_verification(seed: int = 0, deep: bool = False) -> VerificationReport:
    """The oracle suite behind `cvaeseg verify`.

    `deep` raises sample counts to the acceptance-level settings; the
    default keeps the run interactive.
    """
    from .gaussian import kl_diag  # imported here: the subject under test

    report = VerificationReport()
    n_seeds = 20 if deep else 5

    # gradient checks, primitive composite path exercised through the full loss
    worst = 0.0
    for model, x, s, eps in nondegenerate_instances(n_seeds, base_seed=seed):
        err = check_gradients(lambda: loss_cvae(model, x, s, eps).objective, model.registry)
        worst = max(worst, err)
    report.checks.append(CheckResult("grad_composite_cvae_loss", worst <= 1e-4, worst, 1e-4))

    # closed-form KL hand case and Monte-Carlo agreement
    q = DiagGaussian(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    p = DiagGaussian(Tensor(np.array([0.0])), Tensor(np.array([0.0])))
    hand = abs(kl_diag(q, p).item() - 0.5)
    report.checks.append(CheckResult("kl_hand_case", hand <= 1e-12, hand, 1e-12))

    gen = np.random.Generator(np.random.PCG64(seed + 11))
    n_mc = 1_000_000 if deep else 200_000
    worst_sigma = 0.0
    pairs = 20 if deep else 6
    for k in range(pairs):
        d = int(gen.integers(1, 9))
        q = DiagGaussian(Tensor(gen.normal(size=d)), Tensor(gen.normal(scale=0.7, size=d)))
        p = DiagGaussian(Tensor(gen.normal(size=d)), Tensor(gen.normal(scale=0.7, size=d)))
        est, se = mc_kl(q, p, n_mc, seed + 100 + k)
        closed = kl_diag(q, p).item()
        worst_sigma = max(worst_sigma, abs(est - closed) / se)
    report.checks.append(CheckResult("kl_closed_vs_mc", worst_sigma <= 3.0, worst_sigma, 3.0))

    # quadrature nodes reproduce standard-normal moments
    t, w = gauss_hermite(64)
    norm = 1.0 / math.sqrt(math.pi)
    moments = np.array([
        norm * w.sum() - 1.0,
        norm * (w * 2.0 * t ** 2).sum() - 1.0,
        norm * (w * 4.0 * t ** 4).sum() - 3.0,
    ])
    m_err = float(np.abs(moments).max())
    report.checks.append(CheckResult("gh_moments", m_err <= 1e-10, m_err, 1e-10))

    # constant integrand: marginal equals the likelihood at any z
    model = tiny_model(seed + 21)
    _zero_global_fusion(model)
    x, s = random_instance(seed + 22, model.arch)
    targets = downsample_labels(s, model.arch.input_size // 4)
    with no_grad():
        logits = decode(model, Tensor(np.zeros((1, 2))), x)
    const_ll = float(_log_likelihoods(logits.data, targets)[0])
    quad = quadrature_log_marginal(model, x, s, 64)
    c_err = abs(quad - const_ll)
    report.checks.append(CheckResult("quadrature_constant_integrand", c_err <= 1e-9, c_err, 1e-9))

    # refinement stability and the bound itself
    n_models = 20 if deep else 6
    worst_delta = 0.0
    worst_gap = np.inf
    for k in range(n_models):
        d = 1 + k % 2
        x, s = random_instance(seed + 500 + k, tiny_arch(d))
        model = smooth_verification_model(seed + 400 + k, x, s, latent_dim=d)
        lo = quadrature_log_marginal(model, x, s, 64)
        hi = quadrature_log_marginal(model, x, s, 128)
        worst_delta = max(worst_delta, abs(hi - lo))
        elbo = elbo_quadrature(model, x, s, 64)
        worst_gap = min(worst_gap, lo - elbo)
    report.checks.append(CheckResult("quadrature_refinement", worst_delta <= 1e-6, worst_delta, 1e-6))
    report.checks.append(CheckResult("elbo_bound", worst_gap >= -1e-6, worst_gap, -1e-6,
                                     note="min(log p(s|x) - ELBO)"))

    # SGVB estimator against the quadrature gradient
    x, s = random_instance(seed + 601, tiny_arch(2))
    model = smooth_verification_model(seed + 600, x, s, latent_dim=2)
    n_draws = 100_000 if deep else 30_000
    rep = sgvb_gradient_check(model, x, s, n_samples=n_draws, seed=seed + 602)
    report.checks.append(CheckResult("sgvb_unbiased", rep.passed, rep.max_sigma, 3.0))

    model = tiny_model(seed + 700)
    _zero_global_fusion(model)
    x, s = random_instance(seed + 701, model.arch)
    rep0 = sgvb_gradient_check(model, x, s, n_samples=max(4000, n_draws // 10), seed=seed + 702)
    zero_err = float(np.abs(rep0.estimate).max())
    zero_band = float(3.0 * rep0.stderr.max() + 1e-12)
    report.checks.append(CheckResult("sgvb_constant_integrand",
                                     bool(np.all(np.abs(rep0.estimate) <= 3.0 * rep0.stderr + 1e-12)),
                                     zero_err, zero_band))
    return report
