"""Factorized Gaussian posteriors over weights and local reparameterization.

Each weight w ~ N(mu, sigma^2) with sigma = softplus(rho).  Instead of
sampling weights, a layer that is linear in its parameters samples its
pre-activations directly: the output has mean ``op(x, mu)`` and variance
``op(x**2, sigma**2)``, and one standard normal draw per output element
turns that into a sample.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .tensor import (
    Tensor,
    channel_affine,
    gaussian_sample,
    linear,
    log,
    softplus,
    softplus_np,
    square,
    tsum,
)

DEFAULT_RHO = -6.0


class LayerMode(enum.Enum):
    DETERMINISTIC = "deterministic"
    VARIATIONAL = "variational"


@dataclass
class PriorConfig:
    sigma0_sq: float = 1e-6

    def __post_init__(self):
        if not (self.sigma0_sq > 0 and np.isfinite(self.sigma0_sq)):
            raise ConfigError(f"prior variance must be positive, got {self.sigma0_sq}")


class VariationalParam:
    """Posterior mean ``mu`` and softplus-parameterized scale ``rho``."""

    def __init__(self, mu: Tensor, rho: Tensor | None = None):
        if rho is not None and rho.shape != mu.shape:
            raise ShapeError(f"rho shape {rho.shape} != mu shape {mu.shape}")
        self.mu = mu
        self.rho = rho

    @property
    def shape(self):
        return self.mu.shape

    @property
    def size(self) -> int:
        return self.mu.size

    def init_rho(self, value: float = DEFAULT_RHO) -> None:
        self.rho = Tensor(np.full(self.mu.shape, value), requires_grad=True)

    @property
    def sigma(self) -> Tensor:
        if self.rho is None:
            raise ConfigError("variational parameter has no rho; call init_rho first")
        return sigma_from_rho(self.rho)

    def sigma_np(self) -> np.ndarray:
        if self.rho is None:
            return np.zeros(self.mu.shape)
        return softplus_np(self.rho.data)


def sigma_from_rho(rho: Tensor) -> Tensor:
    return softplus(rho)


def kl_to_prior(vp: VariationalParam, prior: PriorConfig) -> Tensor:
    """rho-dependent part of KL[N(mu, sigma^2) || N(0, sigma0^2)], summed:
    -1/2 * sum(log sigma^2 - sigma^2 / sigma0^2)."""
    if not prior.sigma0_sq > 0:
        raise ConfigError("prior variance must be positive")
    s2 = square(vp.sigma)
    return tsum(log(s2) - s2 / prior.sigma0_sq) * -0.5


def kl_full(vp: VariationalParam, prior: PriorConfig) -> float:
    """Closed-form KL including the terms that do not depend on rho."""
    s2 = vp.sigma_np() ** 2
    mu2 = vp.mu.data ** 2
    s02 = prior.sigma0_sq
    return float(np.sum(0.5 * np.log(s02 / s2) + (s2 + mu2) / (2.0 * s02) - 0.5))


def draw_noise(rng, shape) -> np.ndarray:
    """Standard normal draws; ``rng`` may also be a pre-drawn array."""
    if isinstance(rng, np.ndarray):
        if rng.shape != tuple(shape):
            raise ShapeError(f"noise shape {rng.shape} != output shape {tuple(shape)}")
        return rng
    if rng is None:
        raise UsageError("variational forward needs an RNG")
    return rng.standard_normal(shape)


def sample_output(mean: Tensor, var: Tensor, rng) -> Tensor:
    """mean + sqrt(var) * eps, eps ~ N(0, 1) per element."""
    return gaussian_sample(mean, var, draw_noise(rng, mean.shape))


def linear_moments(x: Tensor, w: VariationalParam, b: VariationalParam | None) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input features {x.shape[-1]} != weight rows {w.shape[0]}")
    gamma = linear(x, w.mu, None if b is None else b.mu)
    delta2 = linear(square(x), square(w.sigma), None if b is None else square(b.sigma))
    return gamma, delta2


def linear_local_reparam(x: Tensor, w: VariationalParam, b: VariationalParam | None, rng) -> Tensor:
    gamma, delta2 = linear_moments(x, w, b)
    return sample_output(gamma, delta2, rng)


def conv_moments(
    x: Tensor, kernel: VariationalParam, bias: VariationalParam | None, op: Callable, **kwargs
) -> tuple[Tensor, Tensor]:
    """Mean and variance of a channel-first conv op ``op(x, kernel, bias)``."""
    mean = op(x, kernel.mu, None if bias is None else bias.mu, **kwargs)
    var = op(square(x), square(kernel.sigma), None if bias is None else square(bias.sigma), **kwargs)
    return mean, var


def conv_local_reparam(x: Tensor, kernel: VariationalParam, bias: VariationalParam | None, rng, op: Callable, **kwargs) -> Tensor:
    mean, var = conv_moments(x, kernel, bias, op, **kwargs)
    return sample_output(mean, var, rng)


def affine_local_reparam(xhat: Tensor, gain: VariationalParam, bias: VariationalParam, rng) -> Tensor:
    """Per-channel affine with Gaussian gain and bias (group-norm tail)."""
    mean = channel_affine(xhat, gain.mu, bias.mu, axis=1)
    var = channel_affine(square(xhat), square(gain.sigma), square(bias.sigma), axis=1)
    return sample_output(mean, var, rng)


def gru_local_reparam(x: Tensor, layer, rng) -> Tensor:
    """Frozen-mean GRU output plus noise from a linear surrogate.

    The recurrence itself uses the posterior means only; its output is
    perturbed by ``sqrt(x**2 @ sigma_W**2 + sigma_b**2) * eps`` where the
    surrogate (W, b) acts on the same features the GRU consumes.
    """
    if layer.w_tilde is None or layer.w_tilde.rho is None:
        raise ConfigError("GRU surrogate variational parameters are not initialized")
    f = layer.forward_mean(x)
    delta2 = linear(square(x), square(layer.w_tilde.sigma), square(layer.b_tilde.sigma))
    return sample_output(f, delta2, rng)
