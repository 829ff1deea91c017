"""Waveform-level enhancement: stft -> one-step or iterative bridge sampling -> istft."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .bridge import BridgeSchedule, iterative_sample, one_step_enhance
from .errors import ConfigError, ContractError, InputError
from .spectral import istft, stft
from .tensor import Tensor

ENHANCE_MODES = ("one-step", "sde", "ode")


def enhance_waveform(model: Backbone, wave: np.ndarray, mode: str = "one-step", steps: int = 1,
                     sched: BridgeSchedule = BridgeSchedule(), seed: int = 0,
                     convention: str = "split", n_fft: int = 512, hop: int = 128) -> tuple[np.ndarray, int]:
    """Enhance one mono waveform; returns ``(audio, nfe)``.

    The input is scaled by its peak before analysis and the output scaled back,
    matching the training normalization. ``steps=1`` in any mode is the same
    computation as ``one-step``: a single model call at ``t = T``.
    """
    if mode not in ENHANCE_MODES:
        raise ConfigError(f"unknown enhancement mode {mode!r}")
    if steps < 1:
        raise ContractError("steps must be at least 1")
    if mode == "one-step" and steps != 1:
        raise ContractError("one-step mode takes exactly one step")
    if not model.with_time and steps > 1:
        raise ContractError("mamba-base has no timestep conditioning; only single-step enhancement is defined")
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(wave)):
        raise InputError("input audio contains non-finite samples")
    if len(wave) == 0:
        raise InputError("input audio is empty")
    peak = float(np.max(np.abs(wave)))
    scale = 1.0 / peak if peak > 0 else 1.0
    dt = T.get_default_dtype()
    with T.no_grad():
        y = stft(Tensor((wave * scale)[None].astype(dt)), n_fft, hop)

        def call(state, t):
            return model(state, t) if model.with_time else model(state)

        if steps == 1:
            out = one_step_enhance(y, call, sched)
            nfe = 1
        else:
            out, nfe = iterative_sample(y, call, steps, sched, mode, seed, convention=convention)
        audio = istft(out, len(wave)).data[0].astype(np.float64)
    return audio / scale, nfe
