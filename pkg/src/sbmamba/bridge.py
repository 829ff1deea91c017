"""Schrödinger Bridge schedule algebra, marginal sampling and reverse samplers.

Only the variance-exploding schedule is provided: drift ``f = 0`` and
``g(t)^2 = c * k**(2t)``, so ``sigma^2(t) = c (k^(2t) - 1) / (2 ln k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .spectral import SpectroBatch
from .tensor import Tensor


@dataclass(frozen=True)
class BridgeSchedule:
    kind: str = "ve"
    c: float = 0.3
    k: float = 2.6
    T: float = 1.0
    t_eps: float = 1e-2

    def __post_init__(self):
        if self.kind != "ve":
            raise ConfigError(f"unsupported schedule kind {self.kind!r}")
        if not self.c > 0:
            raise ConfigError("schedule c must be positive")
        if not self.k > 1:
            raise ConfigError("schedule k must exceed 1")
        if not 0 < self.t_eps < self.T:
            raise ConfigError("t_eps must lie in (0, T)")

    def g2(self, t):
        """Squared diffusion coefficient ``c * k**(2t)``."""
        return self.c * np.power(self.k, 2.0 * np.asarray(t, dtype=np.float64))

    def sigma2(self, t) -> float:
        return ve_sigma2(self, t)

    def sigma2_bar(self, t) -> float:
        return ve_sigma2(self, self.T) - ve_sigma2(self, t)


@dataclass(frozen=True)
class MarginalCoeffs:
    w_x: float
    w_y: float
    sigma_x: float
    t: float


def _check_time(sched: BridgeSchedule, t) -> float:
    t = float(t)
    if not 0.0 <= t <= sched.T:
        raise ValueError(f"time {t} outside [0, {sched.T}]")
    return t


def ve_sigma2(sched: BridgeSchedule, t) -> float:
    """Accumulated variance ``int_0^t g^2``."""
    t = _check_time(sched, t)
    log_k = math.log(sched.k)
    return sched.c * math.expm1(2.0 * t * log_k) / (2.0 * log_k)


def marginal_coeffs(sched: BridgeSchedule, t) -> MarginalCoeffs:
    """Weights of ``x_t = w_x x + w_y y + sigma_x z`` for the VE bridge."""
    t = _check_time(sched, t)
    s2_end = ve_sigma2(sched, sched.T)
    if s2_end == 0:
        raise ConfigError("degenerate schedule: sigma^2(T) == 0")
    s2 = ve_sigma2(sched, t)
    s2_bar = s2_end - s2
    var = s2 * s2_bar / s2_end
    return MarginalCoeffs(s2_bar / s2_end, s2 / s2_end, math.sqrt(max(var, 0.0)), t)


def noise_scale(convention: str) -> float:
    """Per-component std for complex standard normal noise.

    ``split`` gives real and imaginary parts variance 1/2 each (circular);
    ``full`` gives each component unit variance.
    """
    if convention == "split":
        return math.sqrt(0.5)
    if convention == "full":
        return 1.0
    raise ConfigError(f"unknown complex variance convention {convention!r}")


def draw_noise(rng: np.random.Generator, shape, convention: str = "split", dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * noise_scale(convention)).astype(dtype)


def _values(x):
    if isinstance(x, SpectroBatch):
        return x.planes.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _wrap(like, values):
    if isinstance(like, SpectroBatch):
        return like.with_planes(Tensor(values))
    if isinstance(like, Tensor):
        return Tensor(values)
    return values


def sample_state(x, y, t, z, sched: BridgeSchedule):
    """Draw the bridge state ``x_t = w_x x + w_y y + sigma_x z``."""
    xv, yv, zv = _values(x), _values(y), _values(z)
    if not xv.shape == yv.shape == zv.shape:
        raise DimensionError(f"x, y, z shapes differ: {xv.shape}, {yv.shape}, {zv.shape}")
    m = marginal_coeffs(sched, t)
    dtype = xv.dtype
    out = dtype.type(m.w_x) * xv + dtype.type(m.w_y) * yv + dtype.type(m.sigma_x) * zv
    return _wrap(x, out.astype(dtype, copy=False))


def posterior_step(x_t, x_hat, t, s, z, sched: BridgeSchedule, mode: str = "sde"):
    """Move from time ``t`` to ``s < t`` along the bridge pinned at ``x_hat`` (time 0) and ``x_t``.

    mean = r x_t + (1 - r) x_hat with r = sigma^2(s) / sigma^2(t); the sde mode
    adds noise of variance sigma^2(s) (1 - r), the ode mode adds none.
    """
    t = _check_time(sched, t)
    s = _check_time(sched, s)
    if not s < t:
        raise ContractError(f"posterior_step needs s < t, got s={s}, t={t}")
    if mode not in ("sde", "ode"):
        raise ConfigError(f"unknown sampler mode {mode!r}")
    xt, xh = _values(x_t), _values(x_hat)
    if xt.shape != xh.shape:
        raise DimensionError(f"x_t and x_hat shapes differ: {xt.shape}, {xh.shape}")
    if s == 0:
        return _wrap(x_t, xh.copy())
    s2t = ve_sigma2(sched, t)
    s2s = ve_sigma2(sched, s)
    r = s2s / s2t
    dtype = xt.dtype
    out = dtype.type(r) * xt + dtype.type(1.0 - r) * xh
    if mode == "sde":
        std = math.sqrt(s2s * (1.0 - r))
        out = out + dtype.type(std) * _values(z)
    return _wrap(x_t, out.astype(dtype, copy=False))


def time_grid(sched: BridgeSchedule, n_steps: int, grid: str = "uniform") -> np.ndarray:
    """Decreasing times ``T = t_0 > ... > t_n = 0``."""
    if n_steps < 1:
        raise ContractError("n_steps must be at least 1")
    if grid != "uniform":
        raise ConfigError(f"unknown time grid {grid!r}")
    ts = np.linspace(sched.T, 0.0, n_steps + 1)
    ts[0], ts[-1] = sched.T, 0.0
    return ts


Model = Callable[[object, float], object]


def iterative_sample(y, model: Model, n_steps: int, sched: BridgeSchedule, mode: str = "sde",
                     seed: int = 0, grid: str = "uniform", convention: str = "split"):
    """Reverse-time sampling from ``x_T = y``; returns ``(x_0, nfe)``.

    One model evaluation per grid interval, so ``nfe == n_steps``.
    """
    rng = np.random.default_rng(seed)
    ts = time_grid(sched, n_steps, grid)
    state = y
    nfe = 0
    for t, s in zip(ts[:-1], ts[1:]):
        x_hat = model(state, float(t))
        nfe += 1
        z = None
        if mode == "sde" and s > 0:
            vals = _values(state)
            z = draw_noise(rng, vals.shape, convention, vals.dtype)
        state = posterior_step(state, x_hat, float(t), float(s), z, sched, mode)
    return state, nfe


def one_step_enhance(y, model: Model, sched: BridgeSchedule | None = None):
    """Evaluate the model once at ``t = T``, where the bridge state is exactly ``y``."""
    T = sched.T if sched is not None else 1.0
    return model(y, T)
