"""Layers usable in deterministic (posterior-mean) or variational mode."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import (
    Tensor,
    channel_affine,
    conv1d,
    conv2d,
    conv_transpose1d,
    gru,
    linear,
    normalize_groups,
)
from .variational import (
    DEFAULT_RHO,
    LayerMode,
    VariationalParam,
    affine_local_reparam,
    conv_local_reparam,
    gru_local_reparam,
    linear_local_reparam,
)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameter container. Subclasses fill ``vparams`` (Gaussian weights),
    ``plain`` (point-estimate weights) and ``modules`` (children), in
    declaration order."""

    def __init__(self):
        self.vparams: dict[str, VariationalParam] = {}
        self.plain: dict[str, Tensor] = {}
        self.modules: dict[str, Module] = {}
        self.mode = LayerMode.DETERMINISTIC

    def named_vparams(self, prefix: str = "") -> Iterator[tuple[str, VariationalParam]]:
        for name, vp in self.vparams.items():
            yield prefix + name, vp
        for cname, child in self.modules.items():
            yield from child.named_vparams(f"{prefix}{cname}.")

    def named_plain(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.plain.items():
            yield prefix + name, t
        for cname, child in self.modules.items():
            yield from child.named_plain(f"{prefix}{cname}.")

    def mean_parameters(self) -> list[Tensor]:
        """Every tensor optimized during pre-training."""
        out = list(self.plain.values()) + [vp.mu for vp in self.vparams.values()]
        for child in self.modules.values():
            out.extend(child.mean_parameters())
        return out

    def rho_parameters(self) -> list[Tensor]:
        return [vp.rho for _, vp in self.named_vparams() if vp.rho is not None]

    def set_mode(self, mode: LayerMode, rho_init: float = DEFAULT_RHO) -> None:
        """Switch mode.  Variational mode freezes the means and makes rho
        trainable, initializing any rho that does not exist yet."""
        self.mode = mode
        for child in self.modules.values():
            child.set_mode(mode, rho_init)
        variational = mode is LayerMode.VARIATIONAL
        for vp in self.vparams.values():
            vp.mu.requires_grad = not variational
            if variational and vp.rho is None:
                vp.init_rho(rho_init)
            if vp.rho is not None:
                vp.rho.requires_grad = variational
        for t in self.plain.values():
            t.requires_grad = not variational

    @property
    def variational(self) -> bool:
        return self.mode is LayerMode.VARIATIONAL

    def _need_rng(self, rng):
        if rng is None:
            raise UsageError(f"{type(self).__name__} in variational mode needs an RNG")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.vparams["weight"] = VariationalParam(_uniform(rng, (in_features, out_features), in_features))
        self.vparams["bias"] = VariationalParam(_uniform(rng, (out_features,), in_features))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        w, b = self.vparams["weight"], self.vparams["bias"]
        if self.variational:
            self._need_rng(rng)
            return linear_local_reparam(x, w, b, rng)
        return linear(x, w.mu, b.mu)


class _ConvBase(Module):
    op = None
    channel_axis = 1

    def _kwargs(self) -> dict:
        raise NotImplementedError

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        k, b = self.vparams["weight"], self.vparams["bias"]
        kw = self._kwargs()
        if self.variational:
            self._need_rng(rng)
            return conv_local_reparam(x, k, b, rng, type(self).op, **kw)
        return type(self).op(x, k.mu, b.mu, **kw)


class Conv1d(_ConvBase):
    op = staticmethod(conv1d)

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, dilation: int = 1, stride: int = 1):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {kernel}")
        self.dilation, self.stride = dilation, stride
        fan = cin * kernel
        self.vparams["weight"] = VariationalParam(_uniform(rng, (cout, cin, kernel), fan))
        self.vparams["bias"] = VariationalParam(_uniform(rng, (cout,), fan))

    def _kwargs(self):
        return {"dilation": self.dilation, "stride": self.stride}


class Conv2d(_ConvBase):
    op = staticmethod(conv2d)

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, dilation=(1, 1)):
        super().__init__()
        kt, kw = kernel
        if kt % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"conv kernel sizes must be odd, got {kernel}")
        self.dilation = tuple(dilation)
        fan = cin * kt * kw
        self.vparams["weight"] = VariationalParam(_uniform(rng, (cout, cin, kt, kw), fan))
        self.vparams["bias"] = VariationalParam(_uniform(rng, (cout,), fan))

    def _kwargs(self):
        return {"dilation": self.dilation}


class ConvTranspose1d(_ConvBase):
    op = staticmethod(conv_transpose1d)

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 2):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {kernel}")
        self.stride = stride
        fan = cin * kernel
        self.vparams["weight"] = VariationalParam(_uniform(rng, (cin, cout, kernel), fan))
        self.vparams["bias"] = VariationalParam(_uniform(rng, (cout,), fan))

    def _kwargs(self):
        return {"stride": self.stride}


class GroupNorm(Module):
    """Group normalization; in variational mode only the affine part is
    random and the statistics come from the layer input as usual."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible by {groups} groups")
        self.groups, self.eps = groups, eps
        self.vparams["gain"] = VariationalParam(Tensor(np.ones(channels), requires_grad=True))
        self.vparams["bias"] = VariationalParam(Tensor(np.zeros(channels), requires_grad=True))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        xhat = normalize_groups(x, self.groups, self.eps)
        g, b = self.vparams["gain"], self.vparams["bias"]
        if self.variational:
            self._need_rng(rng)
            return affine_local_reparam(xhat, g, b, rng)
        return channel_affine(xhat, g.mu, b.mu, axis=1)


class GRU(Module):
    """One GRU layer over (B, T, F).  Gate weights are point estimates; the
    variational mode adds surrogate noise through ``w_tilde``/``b_tilde``."""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.in_features, self.hidden = in_features, hidden
        self.plain["w_ih"] = _uniform(rng, (in_features, 3 * hidden), hidden)
        self.plain["w_hh"] = _uniform(rng, (hidden, 3 * hidden), hidden)
        self.plain["b_ih"] = _uniform(rng, (3 * hidden,), hidden)
        self.plain["b_hh"] = _uniform(rng, (3 * hidden,), hidden)
        self.vparams["w_tilde"] = VariationalParam(Tensor(np.zeros((in_features, hidden)), requires_grad=True))
        self.vparams["b_tilde"] = VariationalParam(Tensor(np.zeros(hidden), requires_grad=True))

    @property
    def w_tilde(self) -> VariationalParam:
        return self.vparams["w_tilde"]

    @property
    def b_tilde(self) -> VariationalParam:
        return self.vparams["b_tilde"]

    def mean_parameters(self) -> list[Tensor]:
        # the surrogate means never enter a forward pass
        return list(self.plain.values())

    def forward_mean(self, x: Tensor, h0: Tensor | None = None) -> Tensor:
        p = self.plain
        return gru(x, p["w_ih"], p["w_hh"], p["b_ih"], p["b_hh"], h0)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        if self.variational:
            self._need_rng(rng)
            return gru_local_reparam(x, self, rng)
        return self.forward_mean(x)
