"""Mamba enhancement backbone on STFT planes.

Pipeline: time-frequency compression -> narrow-band Mamba blocks (time axis,
one sequence per frequency bin, timestep embedding added to each block's
Mamba input) -> one bidirectional full-band Mamba block (frequency axis) ->
decompression -> output projection, added to the input spectrum.

Internally activations are channel-last ``[batch, F', L', d_model]``; the
public block helpers accept the channel-first layout ``[batch, d_model, F', L']``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import Linear, Module, count_parameters, parameter
from .spectral import SpectroBatch
from .ssm import selective_scan
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    n_blocks: int = 4
    d_model: int = 64
    d_state: int = 16
    tf_compress: tuple[int, int] = (4, 2)
    time_causal: bool = True
    fourier_dim: int = 64
    fourier_scale: float = 16.0
    expand: int = 2
    conv_width: int = 4
    train_fourier_freqs: bool = False
    scan_impl: str = "sequential"
    residual_output: bool = True
    zero_init_output: bool = False

    def __post_init__(self):
        if self.fourier_dim % 2:
            raise ConfigError("fourier_dim must be even")
        if min(self.tf_compress) < 1:
            raise ConfigError("compression factors must be positive")
        if self.n_blocks < 0 or self.d_model < 1 or self.d_state < 1:
            raise ConfigError("invalid backbone sizes")
        if self.scan_impl not in ("sequential", "parallel"):
            raise ConfigError(f"unknown scan implementation {self.scan_impl!r}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.d_model / 16))


# ---------------------------------------------------------------------------
# timestep embedding


class TimestepEmbedding(Module):
    """Gaussian Fourier features of ``t`` followed by a trainable affine map."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        freqs = rng.normal(0.0, cfg.fourier_scale, size=cfg.fourier_dim // 2)
        self.freqs = Tensor(np.asarray(freqs, T.get_default_dtype()), requires_grad=cfg.train_fourier_freqs)
        self.proj = Linear(cfg.fourier_dim, cfg.d_model, rng)

    def features(self, t) -> Tensor:
        """``[sin(2 pi f t), cos(2 pi f t)]`` for each t in a batch, ``[batch, fourier_dim]``."""
        t = np.atleast_1d(np.asarray(t, dtype=self.freqs.dtype))
        arg = T.Tensor(2 * np.pi * t[:, None]) * T.reshape(self.freqs, (1, -1))
        return T.concat([_sin(arg), _cos(arg)], axis=-1)

    def __call__(self, t) -> Tensor:
        return self.proj(self.features(t))


def _sin(x: Tensor) -> Tensor:
    c = np.cos(x.data)
    return T.make_result(np.sin(x.data), (x,), lambda g: (g * c,))


def _cos(x: Tensor) -> Tensor:
    s = np.sin(x.data)
    return T.make_result(np.cos(x.data), (x,), lambda g: (-g * s,))


def fourier_embed(t, emb: TimestepEmbedding) -> Tensor:
    """Embedding of a scalar time, ``[d_model]``."""
    return T.reshape(emb(t), (-1,))


# ---------------------------------------------------------------------------
# Mamba cell


class _Direction(Module):
    """Conv + selective-scan parameters for one scan direction."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
        bound = 1 / math.sqrt(cfg.conv_width)
        self.conv_w = parameter(rng.uniform(-bound, bound, size=(cfg.conv_width, di)))
        self.conv_b = parameter(np.zeros(di))
        self.x_proj = Linear(di, r + 2 * n, rng, bias=False)
        self.dt_proj = Linear(r, di, rng, init_scale=r ** -0.5 * math.sqrt(r))
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
        self.dt_proj.bias.data = np.log(np.expm1(dt)).astype(self.dt_proj.bias.dtype)
        # -softplus(a_raw) = -(1..d_state)
        self.a_raw = parameter(np.log(np.expm1(np.arange(1, n + 1, dtype=np.float64))))
        self.d_skip = parameter(np.ones(di))


class MambaCell(Module):
    """Gated selective-SSM cell over ``[seqs, L, d_model]``.

    expand x2 -> depthwise causal conv -> silu -> selective scan -> gate with
    silu(z) -> contract. ``bidirectional`` adds a reversed scan with its own
    conv/SSM parameters and sums both directions.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, bidirectional: bool = False):
        self.cfg = cfg
        self.in_proj = Linear(cfg.d_model, 2 * cfg.d_inner, rng, bias=False)
        self.dirs = [_Direction(cfg, rng) for _ in range(2 if bidirectional else 1)]
        scale = 0.0 if cfg.zero_init_output else 1.0
        self.out_proj = Linear(cfg.d_inner, cfg.d_model, rng, bias=False, init_scale=scale)

    def _scan_branch(self, x: Tensor, p: _Direction, reverse: bool) -> Tensor:
        cfg = self.cfg
        width = cfg.conv_width
        if reverse:
            x = T.flip(x, 1)
        L = x.shape[1]
        xp = T.pad(x, [(0, 0), (width - 1, 0), (0, 0)])
        conv = p.conv_b
        for k in range(width):
            conv = conv + xp[:, k:k + L, :] * p.conv_w[k]
        u = T.silu(conv)
        proj = p.x_proj(u)
        r, n = cfg.dt_rank, cfg.d_state
        delta = T.softplus(p.dt_proj(proj[..., :r]))
        b = proj[..., r:r + n]
        c = proj[..., r + n:]
        a = -T.softplus(p.a_raw)
        y = selective_scan(u, delta, a, b, c, p.d_skip, impl=cfg.scan_impl)
        return T.flip(y, 1) if reverse else y

    def __call__(self, x: Tensor) -> Tensor:
        di = self.cfg.d_inner
        xz = self.in_proj(x)
        xs = xz[..., :di]
        z = xz[..., di:]
        y = self._scan_branch(xs, self.dirs[0], reverse=False)
        if len(self.dirs) > 1:
            y = y + self._scan_branch(xs, self.dirs[1], reverse=True)
        return self.out_proj(y * T.silu(z))


# ---------------------------------------------------------------------------
# blocks


class NarrowBandBlock(Module):
    """Per-frequency Mamba along time with shared weights across bins."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, with_time: bool):
        self.norm_w = parameter(np.ones(cfg.d_model))
        self.norm_b = parameter(np.zeros(cfg.d_model))
        self.t_affine = Linear(cfg.d_model, cfg.d_model, rng) if with_time else None
        self.cell = MambaCell(cfg, rng, bidirectional=not cfg.time_causal)

    def forward_cl(self, h: Tensor, t_emb: Tensor | None) -> Tensor:
        B, F, L, C = h.shape
        x = T.layer_norm(h, -1, 1e-5, self.norm_w, self.norm_b)
        if t_emb is not None and self.t_affine is not None:
            x = x + T.reshape(self.t_affine(t_emb), (B, 1, 1, C))
        y = self.cell(T.reshape(x, (B * F, L, C)))
        return h + T.reshape(y, (B, F, L, C))

    def __call__(self, h: Tensor, t_emb: Tensor | None = None) -> Tensor:
        return _cf(self.forward_cl(_cl(h), t_emb))


class FullBandBlock(Module):
    """Bidirectional Mamba along frequency, one sequence per time frame."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.norm_w = parameter(np.ones(cfg.d_model))
        self.norm_b = parameter(np.zeros(cfg.d_model))
        self.cell = MambaCell(cfg, rng, bidirectional=True)

    def forward_cl(self, h: Tensor) -> Tensor:
        B, F, L, C = h.shape
        x = T.layer_norm(h, -1, 1e-5, self.norm_w, self.norm_b)
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * L, F, C))
        y = T.transpose(T.reshape(self.cell(x), (B, L, F, C)), (0, 2, 1, 3))
        return h + y

    def __call__(self, h: Tensor) -> Tensor:
        return _cf(self.forward_cl(_cl(h)))


def _cl(h: Tensor) -> Tensor:
    return T.transpose(h, (0, 2, 3, 1))


def _cf(h: Tensor) -> Tensor:
    return T.transpose(h, (0, 3, 1, 2))


def narrowband_block(h: Tensor, t_emb: Tensor | None, block: NarrowBandBlock) -> Tensor:
    return block(h, t_emb)


def fullband_block(h: Tensor, block: FullBandBlock) -> Tensor:
    return block(h)


# ---------------------------------------------------------------------------
# compression


def _padded(n: int, factor: int) -> int:
    return -(-n // factor) * factor


class TFCompress(Module):
    """Fold (freq_factor x time_factor) patches of the 2 planes into channels."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        ff, tf = cfg.tf_compress
        self.factors = (ff, tf)
        self.proj = Linear(2 * ff * tf, cfg.d_model, rng)

    def forward_cl(self, planes: Tensor) -> Tensor:
        ff, tf = self.factors
        B, two, F, L = planes.shape
        if ff > F or tf > L:
            raise ConfigError(f"compression factors {self.factors} exceed spectrum size ({F}, {L})")
        Fp, Lp = _padded(F, ff), _padded(L, tf)
        x = T.pad(planes, [(0, 0), (0, 0), (0, Fp - F), (0, Lp - L)], mode="reflect")
        x = T.reshape(x, (B, two, Fp // ff, ff, Lp // tf, tf))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (B, Fp // ff, Lp // tf, two * ff * tf))
        return self.proj(x)

    def __call__(self, planes: Tensor) -> Tensor:
        return _cf(self.forward_cl(planes))


class TFDecompress(Module):
    """Unfold channels back to (freq_factor x time_factor) patches of ``d_model``
    channels, crop to the target size, then project to the 2 planes."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        ff, tf = cfg.tf_compress
        self.factors = (ff, tf)
        self.d_model = cfg.d_model
        self.proj = Linear(cfg.d_model, cfg.d_model * ff * tf, rng)
        scale = 0.0 if cfg.zero_init_output else 1e-2
        self.out = Linear(cfg.d_model, 2, rng, init_scale=scale)

    def unfold(self, h: Tensor, target: tuple[int, int]) -> Tensor:
        """``[B, F', L', C] -> [B, F, L, C]`` at full resolution."""
        ff, tf = self.factors
        B, Fc, Lc, C = h.shape
        x = T.reshape(self.proj(h), (B, Fc, Lc, ff, tf, C))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (B, Fc * ff, Lc * tf, C))
        F, L = target
        return x[:, :F, :L, :]

    def forward_cl(self, h: Tensor, target: tuple[int, int]) -> Tensor:
        y = self.out(self.unfold(h, target))
        return T.transpose(y, (0, 3, 1, 2))

    def __call__(self, h: Tensor, target: tuple[int, int]) -> Tensor:
        return self.forward_cl(_cl(h), target)


def tf_compress(s: SpectroBatch | Tensor, module: TFCompress) -> Tensor:
    planes = s.planes if isinstance(s, SpectroBatch) else s
    return module(planes)


def tf_decompress(h: Tensor, module: TFDecompress, target_shape: tuple[int, int]) -> Tensor:
    return module(h, target_shape)


# ---------------------------------------------------------------------------
# full network


class Backbone(Module):
    """``D(x_t, t) -> S_hat``; ``with_time=False`` gives the predictive-mapping variant."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, with_time: bool = True):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.with_time = with_time
        self.compress = TFCompress(cfg, rng)
        self.embed = TimestepEmbedding(cfg, rng) if with_time else None
        self.blocks = [NarrowBandBlock(cfg, rng, with_time) for _ in range(cfg.n_blocks)]
        self.fullband = FullBandBlock(cfg, rng)
        self.decompress = TFDecompress(cfg, rng)

    def __call__(self, x_t: SpectroBatch, t=None) -> SpectroBatch:
        return self.forward(x_t, t)

    def forward(self, x_t: SpectroBatch, t=None) -> SpectroBatch:
        if not x_t.is_finite():
            raise InputError("non-finite input spectrum")
        planes = x_t.planes
        B, _, F, L = planes.shape
        t_emb = None
        if self.with_time:
            if t is None:
                raise ConfigError("this model is timestep-conditioned; pass t")
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
            t_emb = self.embed(tt)
        h = self.compress.forward_cl(planes)
        for blk in self.blocks:
            h = blk.forward_cl(h, t_emb)
        h = self.fullband.forward_cl(h)
        out = self.decompress.forward_cl(h, (F, L))
        if self.cfg.residual_output:
            out = planes + out
        return x_t.with_planes(out)

    def n_parameters(self) -> int:
        return count_parameters(self)

    def timestep_parameter_names(self) -> list[str]:
        return [k for k, _ in self.named_tensors() if k.startswith("embed.") or ".t_affine." in k]
