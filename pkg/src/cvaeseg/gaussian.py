"""Diagonal-Gaussian algebra: closed-form KL divergences, reparameterized
sampling, and log-density evaluation.

Distributions are parameterized by mean and log-variance, so the variance
stays positive without constraints.  All operations are built from tensor
primitives and are therefore differentiable end to end.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimMismatch
from .tensor import Tensor, exp, reduce_sum, square

LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Mean/log-variance pair; trailing axis indexes the latent dimensions.

    Vectors of shape (d,) describe one distribution; (N, d) describes a
    batch of N independent distributions.
    """

    def __init__(self, mu: Tensor, log_var: Tensor):
        mu = mu if isinstance(mu, Tensor) else Tensor(mu)
        log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
        if mu.shape != log_var.shape:
            raise DimMismatch(f"DiagGaussian: mu {mu.shape} != log_var {log_var.shape}")
        if mu.data.ndim == 0 or mu.shape[-1] < 1:
            raise DimMismatch("DiagGaussian: latent dimension must be >= 1")
        self.mu = mu
        self.log_var = log_var

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @classmethod
    def standard(cls, shape: int | tuple[int, ...]) -> "DiagGaussian":
        if isinstance(shape, int):
            shape = (shape,)
        zeros = np.zeros(shape, dtype=np.float64)
        return cls(Tensor(zeros), Tensor(zeros.copy()))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the trailing axis.

    Returns a scalar for (d,)-shaped inputs and a length-N tensor for
    (N, d) batches.  Nonnegative up to rounding; zero iff q == p.
    """
    if q.shape != p.shape:
        raise DimMismatch(f"kl_diag: shapes differ, {q.shape} vs {p.shape}")
    var_q = exp(q.log_var)
    var_p = exp(p.log_var)
    elem = (p.log_var - q.log_var) * 0.5 \
        + (var_q + square(q.mu - p.mu)) / (var_p * 2.0) \
        - 0.5
    return reduce_sum(elem, axes=-1)


def kl_to_standard(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)); by construction bit-identical to kl_diag against
    an explicit standard Gaussian."""
    return kl_diag(q, DiagGaussian.standard(q.shape))


def reparam_sample(q: DiagGaussian, eps: Tensor | np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * eps, differentiable in mu and log_var.

    eps carries the randomness and is treated as a constant.
    """
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != q.shape:
        raise DimMismatch(f"reparam_sample: eps shape {eps.shape} != {q.shape}")
    return q.mu + exp(q.log_var * 0.5) * eps


def log_pdf(q: DiagGaussian, z: Tensor | np.ndarray) -> Tensor:
    """Log density of z under q, summed over the trailing axis."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape != q.shape:
        raise DimMismatch(f"log_pdf: z shape {z.shape} != {q.shape}")
    elem = (q.log_var + LOG_2PI) * -0.5 - square(z - q.mu) / (exp(q.log_var) * 2.0)
    return reduce_sum(elem, axes=-1)
