"""Differentiable STFT / inverse STFT, magnitudes, feature compression, WAV I/O."""

from __future__ import annotations

import functools
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .tensor import Tensor

SAMPLE_RATE = 16000
EPS_MAG = 1e-9


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def check_geometry(n_fft: int, hop: int) -> None:
    if hop <= 0 or n_fft <= 0 or n_fft % 2:
        raise ConfigError(f"invalid STFT geometry n_fft={n_fft}, hop={hop}")
    if hop > n_fft:
        raise ConfigError(f"hop {hop} exceeds n_fft {n_fft}")
    if n_fft % hop:
        raise ConfigError(f"hop {hop} must divide n_fft {n_fft}")


def is_cola(n_fft: int, hop: int, window: str = "hann") -> bool:
    """True when shifted copies of the window sum to a constant."""
    if window != "hann":
        raise ConfigError(f"unsupported window {window!r}")
    if n_fft % hop:
        return False
    w = hann(n_fft)
    acc = w.reshape(n_fft // hop, hop).sum(axis=0)
    return n_fft // hop >= 2 and bool(np.allclose(acc, acc[0], rtol=0, atol=1e-10))


def check_cola(n_fft: int, hop: int, window: str = "hann") -> None:
    check_geometry(n_fft, hop)
    if not is_cola(n_fft, hop, window):
        raise ConfigError(f"({window}, n_fft={n_fft}, hop={hop}) does not satisfy COLA")


@dataclass(frozen=True)
class SpectroBatch:
    """Batched one-sided STFT as real/imag planes ``[batch, 2, F, L]``."""

    planes: Tensor
    n_fft: int = 512
    hop: int = 128
    sample_rate: int = SAMPLE_RATE
    window: str = "hann"
    normalized: bool = False

    def __post_init__(self):
        shape = self.planes.shape
        if len(shape) != 4 or shape[1] != 2:
            raise DimensionError(f"planes must be [batch, 2, F, L], got {shape}")
        if shape[2] != self.n_fft // 2 + 1:
            raise DimensionError(f"F={shape[2]} does not match n_fft={self.n_fft}")

    @property
    def n_bins(self) -> int:
        return self.planes.shape[2]

    @property
    def n_frames(self) -> int:
        return self.planes.shape[3]

    @property
    def real(self) -> Tensor:
        return self.planes[:, 0]

    @property
    def imag(self) -> Tensor:
        return self.planes[:, 1]

    def with_planes(self, planes: Tensor) -> "SpectroBatch":
        return SpectroBatch(planes, self.n_fft, self.hop, self.sample_rate, self.window, self.normalized)

    def same_geometry(self, other: "SpectroBatch") -> bool:
        return (self.planes.shape == other.planes.shape and self.n_fft == other.n_fft
                and self.hop == other.hop and self.window == other.window
                and self.normalized == other.normalized)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.planes.data)))


@functools.lru_cache(maxsize=32)
def _bases(n_fft: int, dtype: str, normalized: bool):
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)
    ang = 2 * np.pi * np.outer(n, k) / n_fft
    w = hann(n_fft)[:, None]
    scale = 1 / np.sqrt(n_fft) if normalized else 1.0
    fwd_re = (w * np.cos(ang) * scale).astype(dtype)
    fwd_im = (-w * np.sin(ang) * scale).astype(dtype)
    # one-sided inverse DFT: interior bins count twice; imag of DC/Nyquist ignored
    c = np.full(len(k), 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    iscale = np.sqrt(n_fft) if normalized else 1.0
    inv_re = (c[:, None] * np.cos(ang.T) / n_fft * iscale * w.T).astype(dtype)
    inv_im = (-c[:, None] * np.sin(ang.T) / n_fft * iscale * w.T).astype(dtype)
    return fwd_re, fwd_im, inv_re, inv_im


def n_frames(n_samples: int, hop: int) -> int:
    return max(1, -(-n_samples // hop))


def stft(wave: Tensor, n_fft: int = 512, hop: int = 128, window: str = "hann",
         sample_rate: int = SAMPLE_RATE, normalized: bool = False) -> SpectroBatch:
    """Centered STFT of ``wave [batch, N]`` with ``ceil(N / hop)`` frames.

    The signal is reflect-padded by ``n_fft // 2`` on both sides (zero-padded
    when too short to reflect). ``normalized`` scales by ``n_fft ** -0.5``.
    """
    check_geometry(n_fft, hop)
    if window != "hann":
        raise ConfigError(f"unsupported window {window!r}")
    wave = T.as_tensor(wave)
    if wave.ndim == 1:
        wave = T.reshape(wave, (1, -1))
    N = wave.shape[-1]
    half = n_fft // 2
    L = n_frames(N, hop)
    total = (L - 1) * hop + n_fft
    mode = "reflect" if N > half else "constant"
    x = T.pad(wave, [(0, 0), (half, half)], mode)
    if x.shape[-1] < total:
        x = T.pad(x, [(0, 0), (0, total - x.shape[-1])])
    elif x.shape[-1] > total:
        x = x[:, :total]
    frames = T.frame(x, n_fft, hop)
    fre, fim, _, _ = _bases(n_fft, wave.dtype.name, normalized)
    re = T.matmul(frames, Tensor(fre))
    im = T.matmul(frames, Tensor(fim))
    planes = T.transpose(T.stack([re, im], axis=1), (0, 1, 3, 2))
    return SpectroBatch(planes, n_fft, hop, sample_rate, window, normalized)


@functools.lru_cache(maxsize=32)
def _envelope(n_fft: int, hop: int, L: int, dtype: str) -> np.ndarray:
    w2 = hann(n_fft) ** 2
    frames = np.broadcast_to(w2, (L, n_fft))
    return T._ola(np.ascontiguousarray(frames), hop, (L - 1) * hop + n_fft).astype(dtype)


def istft(s: SpectroBatch, target_len: int) -> Tensor:
    """Weighted overlap-add inverse of :func:`stft`, cropped to ``target_len``."""
    check_cola(s.n_fft, s.hop, s.window)
    n_fft, hop = s.n_fft, s.hop
    L = s.n_frames
    dtype = s.planes.dtype.name
    _, _, ire, iim = _bases(n_fft, dtype, s.normalized)
    re = T.transpose(s.real, (0, 2, 1))
    im = T.transpose(s.imag, (0, 2, 1))
    frames = T.matmul(re, Tensor(ire)) + T.matmul(im, Tensor(iim))
    total = (L - 1) * hop + n_fft
    y = T.overlap_add(frames, hop, total)
    env = _envelope(n_fft, hop, L, dtype)
    half = n_fft // 2
    if half + target_len > total:
        raise DimensionError(f"target_len {target_len} longer than the spectrum covers")
    sl = slice(half, half + target_len)
    env = env[sl]
    if np.any(env < 1e-8):
        raise ConfigError("window envelope vanishes inside the signal")
    return y[:, sl] / Tensor(env)


def magnitude(s: SpectroBatch | Tensor) -> Tensor:
    """``sqrt(re^2 + im^2 + 1e-9)`` per bin, ``[batch, F, L]``."""
    planes = s.planes if isinstance(s, SpectroBatch) else s
    re = planes[:, 0]
    im = planes[:, 1]
    return T.sqrt(re * re + im * im + EPS_MAG)


def spec_transform(s: SpectroBatch, mode: str = "none", alpha: float = 0.5, beta: float = 0.15,
                   inverse: bool = False) -> SpectroBatch:
    """Map magnitudes ``|S| -> beta * |S|**alpha`` keeping the phase.

    ``inverse=True`` applies the reverse map. Mode ``none`` is the identity.
    """
    if mode == "none":
        return s
    if mode != "compress":
        raise ConfigError(f"unknown spec_transform mode {mode!r}")
    if not 0 < alpha <= 1 or beta <= 0:
        raise ConfigError("spec_transform needs 0 < alpha <= 1 and beta > 0")
    mag = magnitude(s)
    if inverse:
        target = (mag / beta) ** (1.0 / alpha)
    else:
        target = beta * mag ** alpha
    gain = T.reshape(target / mag, (mag.shape[0], 1) + mag.shape[1:])
    return s.with_planes(s.planes * gain)


# ---------------------------------------------------------------------------
# WAV files


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 or float32 WAV as float in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 1:
        raise InputError(f"{path}: only mono audio is supported")
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        audio = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return audio, rate


def write_wav(path, audio, rate: int = SAMPLE_RATE, fmt: str = "float32") -> None:
    """Write mono audio atomically (temp file in the same directory, then rename)."""
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if fmt == "pcm16":
        data = np.clip(np.round(audio * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = audio.astype(np.float32)
    else:
        raise ConfigError(f"unknown wav format {fmt!r}")
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".wav.part")
    os.close(fd)
    try:
        wavfile.write(tmp, rate, data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
