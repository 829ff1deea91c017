"""Synthetic paired corpus (noise + reverberation) and signal metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import tensor as T
from .errors import ConfigError, InputError, MetricError
from .spectral import SAMPLE_RATE, read_wav, stft, write_wav

CLEAN_KINDS = ("harmonic-voice-surrogate", "chirp", "noise-burst-sentence")
NOISE_KINDS = ("white", "pink", "babble")
SI_SDR_CAP = 100.0
PEAK = 0.5


@dataclass(frozen=True)
class DegradationSpec:
    snr_db: tuple[float, float] = (-10.0, 20.0)
    rir: str = "synthetic"
    t60_range: tuple[float, float] = (0.1, 0.6)
    rir_length: int = 4096
    drr_db: float = 0.0
    noise: tuple[str, ...] = NOISE_KINDS
    babble_sources: int = 5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.snr_db
        if lo > hi:
            raise ConfigError("snr_db range is reversed")
        if self.rir not in ("none", "synthetic"):
            raise ConfigError(f"unknown rir setting {self.rir!r}")
        if self.rir == "synthetic" and not 0 < self.t60_range[0] <= self.t60_range[1]:
            raise ConfigError("t60 range must be positive and ordered")
        bad = set(self.noise) - set(NOISE_KINDS)
        if bad or not self.noise:
            raise ConfigError(f"unknown noise kinds {sorted(bad)}")


# ---------------------------------------------------------------------------
# clean surrogates


def _syllable_envelope(n: int, rng: np.random.Generator, rate: int) -> np.ndarray:
    """Random on/off segments (~80-300 ms) with raised-cosine edges."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * rate)
    while pos < n:
        seg = int(rng.uniform(0.08, 0.3) * rate)
        gap = int(rng.uniform(0.02, 0.15) * rate)
        end = min(n, pos + seg)
        env[pos:end] = np.hanning(seg)[: end - pos] ** 0.5 * rng.uniform(0.5, 1.0)
        pos = end + gap
    return env


def synth_clean(kind: str = "harmonic-voice-surrogate", dur_s: float = 2.0, seed: int = 0,
                rate: int = SAMPLE_RATE) -> np.ndarray:
    """Deterministic speech-like test signal, peak-normalized to 0.5."""
    if not 0.5 <= dur_s <= 10:
        raise ConfigError(f"dur_s={dur_s} outside [0.5, 10]")
    rng = np.random.default_rng(seed)
    n = int(round(dur_s * rate))
    t = np.arange(n) / rate
    if kind == "harmonic-voice-surrogate":
        f0_base = rng.uniform(100.0, 220.0)
        drift = 1 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t + rng.uniform(0, 2 * np.pi))
        vib = 1 + 0.01 * np.sin(2 * np.pi * 5.5 * t)
        f0 = f0_base * drift * vib
        phase = 2 * np.pi * np.cumsum(f0) / rate
        n_harm = int(4000 // (f0_base * 1.2))
        x = np.zeros(n)
        for h in range(1, n_harm + 1):
            # 1/h amplitude: -6 dB per octave
            x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
        x *= _syllable_envelope(n, rng, rate)
    elif kind == "chirp":
        f_lo, f_hi = rng.uniform(150, 400), rng.uniform(2000, 4000)
        x = sps.chirp(t, f_lo, t[-1], f_hi, method="logarithmic", phi=rng.uniform(0, 360))
        x *= _syllable_envelope(n, rng, rate)
    elif kind == "noise-burst-sentence":
        lo = rng.uniform(200, 800)
        hi = rng.uniform(2000, 5000)
        sos = sps.butter(4, [lo, hi], btype="bandpass", fs=rate, output="sos")
        x = sps.sosfilt(sos, rng.standard_normal(n)) * _syllable_envelope(n, rng, rate)
    else:
        raise ConfigError(f"unknown clean kind {kind!r}")
    peak = np.max(np.abs(x))
    if peak == 0:
        x = np.zeros(n)
        x[n // 2] = 1.0
        peak = 1.0
    return x * (PEAK / peak)


def spectral_centroid(x: np.ndarray, rate: int = SAMPLE_RATE) -> float:
    p = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / rate)
    return float(np.sum(f * p) / np.sum(p))


# ---------------------------------------------------------------------------
# room response


def synth_rir(t60_s: float, length: int = 4096, seed: int = 0, rate: int = SAMPLE_RATE,
              drr_db: float | None = 0.0) -> np.ndarray:
    """Exponentially decaying white noise with a unit direct path at index 0.

    Amplitude decays as ``exp(-t * 3 ln 10 / t60)``, so energy falls 60 dB at t60.
    The tail is scaled to the direct-to-reverberant ratio ``drr_db``
    (``None`` leaves the raw unit-variance noise).
    """
    if not t60_s > 0:
        raise ConfigError("t60 must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / rate
    rir = rng.standard_normal(length) * np.exp(-t * 3 * np.log(10) / t60_s)
    rir[0] = 0.0
    tail = np.sum(rir ** 2)
    if drr_db is not None and tail > 0:
        rir *= np.sqrt(10 ** (-drr_db / 10) / tail)
    rir[0] = 1.0
    return rir


def schroeder_curve(rir: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB, normalized to 0 dB at t = 0."""
    e = np.cumsum(rir[::-1] ** 2)[::-1]
    return 10 * np.log10(np.maximum(e / e[0], 1e-300))


def schroeder_t60(rir: np.ndarray, rate: int = SAMPLE_RATE, fit=(-5.0, -35.0)) -> float:
    """t60 from a line fit to the decay curve between ``fit`` levels, extrapolated to -60 dB."""
    edc = schroeder_curve(rir)
    idx = np.nonzero((edc <= fit[0]) & (edc >= fit[1]))[0]
    if len(idx) < 2:
        raise MetricError("decay curve does not span the fit range")
    slope, _ = np.polyfit(idx / rate, edc[idx], 1)
    return float(-60.0 / slope)


# ---------------------------------------------------------------------------
# noise and mixing


def make_noise(kind: str, n: int, rng: np.random.Generator, rate: int = SAMPLE_RATE,
               babble_sources: int = 5) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n)
    if kind == "babble":
        dur = max(0.5, n / rate)
        out = np.zeros(n)
        for _ in range(babble_sources):
            src = synth_clean("harmonic-voice-surrogate", min(dur, 10.0), int(rng.integers(2**31)), rate)
            src = np.resize(src, n)
            out += np.roll(src, int(rng.integers(n)))
        return out + 0.05 * np.std(out) * rng.standard_normal(n)
    raise ConfigError(f"unknown noise kind {kind!r}")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(sig: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Scale ``noise`` so that ``10 log10(P_sig / P_noise) == snr_db``."""
    ps, pn = power(sig), power(noise)
    if pn == 0:
        raise InputError("noise has zero power")
    return noise * np.sqrt(ps / (pn * 10 ** (snr_db / 10)))


def degrade(clean: np.ndarray, spec: DegradationSpec, seed: int | None = None,
            rate: int = SAMPLE_RATE) -> tuple[np.ndarray, dict]:
    """Reverberate and add noise at a drawn SNR.

    Returns ``(degraded, meta)``. When the mix would clip, both the mix and
    the reference are scaled by ``meta['gain']``; callers apply the same gain
    to ``clean`` (see :func:`make_pair`).
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    clean = np.asarray(clean, dtype=np.float64)
    n = len(clean)
    snr = float(rng.uniform(*spec.snr_db))
    kind = spec.noise[int(rng.integers(len(spec.noise)))]
    if spec.rir == "synthetic":
        t60 = float(rng.uniform(*spec.t60_range))
        rir = synth_rir(t60, spec.rir_length, int(rng.integers(2**31)), rate, spec.drr_db)
        wet = sps.fftconvolve(clean, rir)[:n]
    else:
        t60 = 0.0
        wet = clean.copy()
    noise = mix_at_snr(wet, make_noise(kind, n, rng, rate, spec.babble_sources), snr)
    degraded = wet + noise
    peak = np.max(np.abs(degraded))
    gain = 1.0 if peak <= 1.0 else 0.99 / peak
    meta = {"snr_db": snr, "t60": t60, "noise": kind, "gain": gain,
            "measured_snr_db": 10 * np.log10(power(wet) / power(noise))}
    return degraded * gain, meta


def make_pair(kind: str, dur_s: float, spec: DegradationSpec, seed: int,
              rate: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray, dict]:
    """(clean, degraded, meta) from one integer seed."""
    clean = synth_clean(kind, dur_s, seed, rate)
    degraded, meta = degrade(clean, spec, seed + 1, rate)
    return clean * meta["gain"], degraded, meta


# ---------------------------------------------------------------------------
# manifests


MANIFEST_HEADER = "# clean_path\tdegraded_path\tseed\tsnr_db\tt60"


@dataclass(frozen=True)
class ManifestEntry:
    clean_path: str
    degraded_path: str
    seed: int
    snr_db: float
    t60: float


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    sample_rate: int = SAMPLE_RATE

    def write(self, path) -> None:
        lines = [MANIFEST_HEADER, f"# split={self.split}\tsample_rate={self.sample_rate}"]
        for e in self.entries:
            lines.append(f"{e.clean_path}\t{e.degraded_path}\t{e.seed}\t{e.snr_db!r}\t{e.t60!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, check_paths: bool = True) -> "CorpusManifest":
        path = Path(path)
        if not path.exists():
            raise InputError(f"manifest {path} not found")
        split, rate = "train", SAMPLE_RATE
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split("\t"):
                    k, _, v = tok.strip().partition("=")
                    if k == "split":
                        split = v
                    elif k == "sample_rate":
                        rate = int(v)
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise InputError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                e = ManifestEntry(parts[0], parts[1], int(parts[2]), float(parts[3]), float(parts[4]))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            entries.append(e)
        m = cls(entries, split, rate)
        if check_paths:
            base = path.parent
            for e in entries:
                for p in (e.clean_path, e.degraded_path):
                    if not (base / p).exists():
                        raise InputError(f"{path}: missing file {p}")
        return m

    def resolve(self, manifest_path, rel: str) -> Path:
        return Path(manifest_path).parent / rel


def check_disjoint(manifests: list[CorpusManifest]) -> None:
    seen: dict[str, str] = {}
    for m in manifests:
        for e in m.entries:
            for p in (e.clean_path, e.degraded_path):
                if p in seen and seen[p] != m.split:
                    raise InputError(f"{p} appears in splits {seen[p]} and {m.split}")
                seen[p] = m.split


def build_corpus(out_dir, counts: dict[str, int], dur_s: float = 2.0,
                 spec: DegradationSpec = DegradationSpec(), seed: int = 0,
                 kinds: tuple[str, ...] = CLEAN_KINDS) -> dict[str, Path]:
    """Write WAV pairs and one manifest per split; returns manifest paths.

    Entry ``i`` of split ``k`` uses seed ``seed + 1_000_003 * k + 2 * i``, so
    splits never share a seed and reruns are byte-identical.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise InputError(f"{out} is not writable")
    paths = {}
    for k, (split, count) in enumerate(counts.items()):
        (out / split).mkdir(exist_ok=True)
        entries = []
        for i in range(count):
            s = seed + 1_000_003 * k + 2 * i
            kind = kinds[i % len(kinds)]
            clean, degraded, meta = make_pair(kind, dur_s, spec, s)
            cp, dp = f"{split}/{i:05d}_clean.wav", f"{split}/{i:05d}_degraded.wav"
            write_wav(out / cp, clean)
            write_wav(out / dp, degraded)
            entries.append(ManifestEntry(cp, dp, s, meta["snr_db"], meta["t60"]))
        m = CorpusManifest(entries, split)
        paths[split] = out / f"manifest_{split}.tsv"
        m.write(paths[split])
    return paths


def load_pairs(manifest_path) -> tuple[list[np.ndarray], list[np.ndarray], CorpusManifest]:
    m = CorpusManifest.read(manifest_path)
    clean, degraded = [], []
    for e in m.entries:
        clean.append(read_wav(m.resolve(manifest_path, e.clean_path), m.sample_rate)[0])
        degraded.append(read_wav(m.resolve(manifest_path, e.degraded_path), m.sample_rate)[0])
    return clean, degraded, m


# ---------------------------------------------------------------------------
# metrics


def si_sdr(ref, est, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB (zero-mean signals), capped at ``cap``."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise MetricError(f"length mismatch {ref.shape} vs {est.shape}")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise MetricError("reference signal is zero")
    target = np.dot(est, ref) / ref_energy * ref
    resid = est - target
    num, den = np.dot(target, target), np.dot(resid, resid)
    if num == 0:
        return -cap
    if den <= num * 10 ** (-cap / 10):
        return cap
    return float(min(cap, max(-cap, 10 * np.log10(num / den))))


def log_spectral_distance(ref, est, n_fft: int = 512, hop: int = 128, eps: float = 1e-8) -> float:
    """RMS over frames and bins of ``20 |log10(|S_ref| + eps) - log10(|S_est| + eps)|``."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise MetricError(f"length mismatch {ref.shape} vs {est.shape}")
    with T.precision("float64"), T.no_grad():
        sr = stft(T.Tensor(ref[None]), n_fft, hop, normalized=False).planes.data[0]
        se = stft(T.Tensor(est[None]), n_fft, hop, normalized=False).planes.data[0]
    mr = np.hypot(sr[0], sr[1])
    me = np.hypot(se[0], se[1])
    d = 20 * (np.log10(mr + eps) - np.log10(me + eps))
    return float(np.sqrt(np.mean(d ** 2)))
