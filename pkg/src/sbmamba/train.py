"""Data-prediction loss, AdamW with warmup + cosine decay, and the training loop.

Two modes share one loop:
  sbm         the model sees a bridge state x_t at a random t and predicts the clean spectrum
  mamba-base  the model sees the degraded spectrum and predicts the clean spectrum directly
"""

from __future__ import annotations

import json
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .bridge import BridgeSchedule, draw_noise, marginal_coeffs
from .errors import ConfigError, ContractError, DimensionError, InputError, NumericalError
from .spectral import SpectroBatch, check_cola, istft, magnitude, stft
from .tensor import Tensor

MODES = ("sbm", "mamba-base")


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    mr_resolutions: tuple[tuple[int, int], ...] = ((128, 32), (256, 64), (512, 128))

    def __post_init__(self):
        if len(self.lambdas) != 4 or any(l < 0 for l in self.lambdas) or not any(l > 0 for l in self.lambdas):
            raise ConfigError("need four nonnegative loss weights, at least one positive")
        for n_fft, hop in self.mr_resolutions:
            check_cola(n_fft, hop)


def _mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()


def data_prediction_loss(S: SpectroBatch, S_hat: SpectroBatch, w: LossWeights = LossWeights(),
                         length: int | None = None, return_terms: bool = False):
    """``l1 mse(S) + l2 mse(|S|) + l3 mr_mse(S) + l4 mr_mse(|S|)``.

    The multi-resolution terms resynthesize both spectra with :func:`istft`
    (``length`` samples, default ``frames * hop``) and re-analyze them at every
    resolution in ``w.mr_resolutions``, averaging over resolutions.
    """
    if not S.same_geometry(S_hat):
        raise DimensionError(f"spectra differ: {S.planes.shape} vs {S_hat.planes.shape}")
    l1, l2, l3, l4 = w.lambdas
    zero = Tensor(np.zeros((), S.planes.dtype))
    terms = [zero, zero, zero, zero]
    if l1:
        terms[0] = _mse(S_hat.planes, S.planes)
    if l2:
        terms[1] = _mse(magnitude(S_hat), magnitude(S))
    if (l3 or l4) and w.mr_resolutions:
        n = length if length is not None else S.n_frames * S.hop
        wav, wav_hat = istft(S, n), istft(S_hat, n)
        acc3, acc4 = zero, zero
        for n_fft, hop in w.mr_resolutions:
            R = stft(wav, n_fft, hop, normalized=S.normalized)
            R_hat = stft(wav_hat, n_fft, hop, normalized=S.normalized)
            if l3:
                acc3 = acc3 + _mse(R_hat.planes, R.planes)
            if l4:
                acc4 = acc4 + _mse(magnitude(R_hat), magnitude(R))
        k = len(w.mr_resolutions)
        terms[2], terms[3] = acc3 / k, acc4 / k
    total = l1 * terms[0] + l2 * terms[1] + l3 * terms[2] + l4 * terms[3]
    if return_terms:
        return total, [float(t.data) for t in terms]
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr_base: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 2000
    schedule: str = "cosine"
    clip_norm: float | None = 5.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.total_steps < 1 or self.warmup_steps < 0:
            raise ConfigError("total_steps must be positive and warmup_steps nonnegative")

    def lr_at(self, step: int) -> float:
        """Learning rate for update number ``step`` (1-based)."""
        if self.schedule == "constant":
            return self.lr_base
        if step < self.warmup_steps:
            return self.lr_base * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.lr_base * 0.5 * (1 + math.cos(math.pi * progress))


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def adamw_update(params, opt: OptimizerState) -> float:
    """One decoupled-weight-decay Adam step using ``p.grad``; returns the lr used."""
    if opt.step >= opt.total_steps:
        raise ContractError(f"optimizer already at total_steps={opt.total_steps}")
    if not opt.m:
        opt.m = [np.zeros_like(p.data) for p in params]
        opt.v = [np.zeros_like(p.data) for p in params]
    if len(opt.m) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    opt.step += 1
    lr = opt.lr_at(opt.step)
    b1, b2 = opt.betas
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    for p, m, v in zip(params, opt.m, opt.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if opt.weight_decay:
            p.data = p.data - p.data.dtype.type(lr * opt.weight_decay) * p.data
        upd = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)
    return lr


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    x: SpectroBatch  # clean
    y: SpectroBatch  # degraded
    length: int


def make_batch(clean: list[np.ndarray], degraded: list[np.ndarray], rng: np.random.Generator,
               batch_size: int, crop: int, n_fft: int = 512, hop: int = 128) -> Batch:
    """Random clips with random crops; each pair is scaled by 1 / peak of its degraded crop."""
    idx = rng.integers(len(clean), size=batch_size)
    xs, ys = [], []
    for i in idx:
        c, d = clean[i], degraded[i]
        if len(c) != len(d):
            raise InputError("clean/degraded length mismatch")
        n = min(crop, len(c))
        start = int(rng.integers(len(c) - n + 1))
        c, d = c[start:start + n], d[start:start + n]
        if n < crop:
            c = np.pad(c, (0, crop - n))
            d = np.pad(d, (0, crop - n))
        scale = 1.0 / max(np.max(np.abs(d)), 1e-8)
        xs.append(c * scale)
        ys.append(d * scale)
    dt = T.get_default_dtype()
    x = stft(Tensor(np.stack(xs).astype(dt)), n_fft, hop)
    y = stft(Tensor(np.stack(ys).astype(dt)), n_fft, hop)
    return Batch(_detach(x), _detach(y), crop)


def _detach(s: SpectroBatch) -> SpectroBatch:
    return s.with_planes(Tensor(s.planes.data))


# ---------------------------------------------------------------------------
# steps


def bridge_states(x: SpectroBatch, y: SpectroBatch, t: np.ndarray, z: np.ndarray,
                  sched: BridgeSchedule) -> SpectroBatch:
    """Per-example ``x_t = w_x x + w_y y + sigma_x z``."""
    coeffs = [marginal_coeffs(sched, ti) for ti in t]
    dt = x.planes.dtype
    shape = (len(t), 1, 1, 1)
    wx = np.array([c.w_x for c in coeffs], dt).reshape(shape)
    wy = np.array([c.w_y for c in coeffs], dt).reshape(shape)
    sx = np.array([c.sigma_x for c in coeffs], dt).reshape(shape)
    return x.with_planes(Tensor(wx * x.planes.data + wy * y.planes.data + sx * z))


def _finish_step(loss: Tensor, terms, model, opt: OptimizerState) -> dict:
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericalError(f"non-finite loss {val} at step {opt.step + 1}")
    params = model.parameters()
    model.zero_grad()
    loss.backward()
    norm = clip_grad_norm(params, opt.clip_norm) if opt.clip_norm else global_grad_norm(params)
    if not np.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm at step {opt.step + 1}")
    lr = adamw_update(params, opt)
    return {"loss": val, "terms": terms, "lr": lr, "grad_norm": norm}


def sb_training_step(batch: Batch, model: Backbone, sched: BridgeSchedule, opt: OptimizerState,
                     rng: np.random.Generator, weights: LossWeights = LossWeights(),
                     convention: str = "split", t: np.ndarray | None = None) -> dict:
    """Bridge-state training step; ``t`` overrides the uniform draw on ``[t_eps, T]``."""
    B = batch.x.planes.shape[0]
    if t is None:
        t = rng.uniform(sched.t_eps, sched.T, size=B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    z = draw_noise(rng, batch.x.planes.shape, convention, batch.x.planes.dtype)
    x_t = bridge_states(batch.x, batch.y, t, z, sched)
    S_hat = model(x_t, t)
    loss, terms = data_prediction_loss(batch.x, S_hat, weights, batch.length, return_terms=True)
    return _finish_step(loss, terms, model, opt)


def predictive_training_step(batch: Batch, model: Backbone, opt: OptimizerState,
                             weights: LossWeights = LossWeights()) -> dict:
    """Direct mapping step: the model sees the degraded spectrum only."""
    S_hat = model(batch.y)
    loss, terms = data_prediction_loss(batch.x, S_hat, weights, batch.length, return_terms=True)
    return _finish_step(loss, terms, model, opt)


# ---------------------------------------------------------------------------
# checkpoints


def build_model(mode: str, cfg: BackboneConfig, seed: int = 0) -> Backbone:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return Backbone(cfg, seed=seed, with_time=(mode == "sbm"))


def save_checkpoint(path, model: Backbone, opt: OptimizerState | None, meta: dict) -> Path:
    """Directory of ``.sbmt`` tensors plus ``state.json``; written to a temp dir then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    for name, arr in model.state_dict().items():
        T.save_tensor(arr, tmp / "params" / f"{name}.sbmt")
    state = dict(meta)
    state["backbone"] = asdict(model.cfg)
    state["with_time"] = model.with_time
    if opt is not None:
        (tmp / "opt").mkdir()
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            T.save_tensor(m, tmp / "opt" / f"m{i:04d}.sbmt")
            T.save_tensor(v, tmp / "opt" / f"v{i:04d}.sbmt")
        state["optimizer"] = {k: v for k, v in asdict(opt).items() if k not in ("m", "v")}
        state["optimizer"]["n_moments"] = len(opt.m)
    (tmp / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def read_checkpoint_state(path) -> dict:
    f = Path(path) / "state.json"
    if not f.exists():
        raise InputError(f"{path} is not a checkpoint (no state.json)")
    return json.loads(f.read_text())


def backbone_config_from(state: dict) -> BackboneConfig:
    bc = dict(state["backbone"])
    bc["tf_compress"] = tuple(bc["tf_compress"])
    return BackboneConfig(**bc)


def load_checkpoint(path, mode: str | None = None, allow_mode_change: bool = False,
                    with_optimizer: bool = False):
    """Rebuild the model (and optionally the optimizer) saved at ``path``.

    Loading an sbm checkpoint as ``mamba-base`` drops the timestep parameters
    and requires ``allow_mode_change``. Returns ``(model, opt, state)``.
    """
    path = Path(path)
    state = read_checkpoint_state(path)
    saved_mode = state.get("mode", "sbm" if state.get("with_time") else "mamba-base")
    mode = mode or saved_mode
    if mode != saved_mode:
        if not (allow_mode_change and saved_mode == "sbm" and mode == "mamba-base"):
            raise ContractError(f"checkpoint was trained as {saved_mode}; cannot load as {mode}"
                                + ("" if saved_mode == "mamba-base" else " without the compatibility flag"))
    cfg = backbone_config_from(state)
    model = build_model(mode, cfg)
    arrays = {p.name[: -len(".sbmt")]: T.load_tensor(p).data for p in (path / "params").glob("*.sbmt")}
    if mode != saved_mode:
        drop = set(Backbone(cfg, with_time=True).timestep_parameter_names())
        arrays = {k: v for k, v in arrays.items() if k not in drop}
    model.load_state_dict(arrays, strict=True)
    opt = None
    if with_optimizer and "optimizer" in state:
        o = dict(state["optimizer"])
        n = o.pop("n_moments")
        o["betas"] = tuple(o["betas"])
        opt = OptimizerState(**o)
        opt.m = [T.load_tensor(path / "opt" / f"m{i:04d}.sbmt").data for i in range(n)]
        opt.v = [T.load_tensor(path / "opt" / f"v{i:04d}.sbmt").data for i in range(n)]
    return model, opt, state


# ---------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop_s: float = 2.0
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup: int = 100
    clip_norm: float = 5.0
    ckpt_every: int = 250
    log_every: int = 1
    seed: int = 0
    convention: str = "split"
    n_fft: int = 512
    hop: int = 128
    time_budget_s: float | None = None


METRICS_HEADER = "step\tlr\tloss\tl_mse\tl_mag\tl_mr\tl_mr_mag\tgrad_norm\twall_s"


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train(mode: str, clean: list[np.ndarray], degraded: list[np.ndarray], out_dir,
          tcfg: TrainConfig = TrainConfig(), bcfg: BackboneConfig = BackboneConfig(),
          sched: BridgeSchedule = BridgeSchedule(), weights: LossWeights = LossWeights(),
          resume: bool = True, config_echo: dict | None = None, log=print) -> Backbone:
    """Train ``mode`` and write ``out_dir/{metrics.tsv, ckpt/step_*, latest}``.

    With ``resume`` the run continues from ``out_dir/latest`` when present;
    model, optimizer and RNG state are restored so the continuation matches
    an uninterrupted run.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latest = out / "latest"
    metrics = out / "metrics.tsv"
    meta = {"mode": mode, "seed": tcfg.seed, "train": asdict(tcfg), "schedule": asdict(sched),
            "loss": asdict(weights), "config": config_echo or {}}
    if resume and latest.exists():
        ck = out / latest.read_text().strip()
        model, opt, state = load_checkpoint(ck, mode, with_optimizer=True)
        rng = _rng_from(state["rng"])
        _truncate_metrics(metrics, opt.step)
        log(f"resumed from {ck} at step {opt.step}")
    else:
        model = build_model(mode, bcfg, tcfg.seed)
        opt = OptimizerState(tcfg.lr, tcfg.betas, 1e-8, tcfg.weight_decay, tcfg.warmup,
                             max(tcfg.steps, 1), "cosine", tcfg.clip_norm)
        rng = np.random.default_rng(tcfg.seed)
        metrics.write_text(METRICS_HEADER + "\n")
    crop = int(round(tcfg.crop_s * 16000))

    def checkpoint():
        name = f"ckpt/step_{opt.step:06d}"
        (out / "ckpt").mkdir(exist_ok=True)
        save_checkpoint(out / name, model, opt, dict(meta, step=opt.step, rng=_rng_state(rng)))
        tmp = out / "latest.part"
        tmp.write_text(name + "\n")
        os.replace(tmp, latest)

    if opt.step == 0:
        checkpoint()
    t0 = time.perf_counter()
    with metrics.open("a") as mf:
        while opt.step < tcfg.steps:
            if tcfg.time_budget_s is not None and time.perf_counter() - t0 > tcfg.time_budget_s:
                log(f"time budget reached at step {opt.step}")
                break
            batch = make_batch(clean, degraded, rng, tcfg.batch_size, crop, tcfg.n_fft, tcfg.hop)
            try:
                if mode == "sbm":
                    info = sb_training_step(batch, model, sched, opt, rng, weights, tcfg.convention)
                else:
                    info = predictive_training_step(batch, model, opt, weights)
            except NumericalError:
                log(f"aborting: non-finite loss; last good checkpoint is {latest.read_text().strip()}")
                raise
            terms = "\t".join(f"{v:.6g}" for v in info["terms"])
            mf.write(f"{opt.step}\t{info['lr']:.6g}\t{info['loss']:.6g}\t{terms}\t"
                     f"{info['grad_norm']:.6g}\t{time.perf_counter() - t0:.3f}\n")
            if opt.step % tcfg.log_every == 0:
                mf.flush()
                log(f"step {opt.step} loss {info['loss']:.5f} lr {info['lr']:.3g}")
            if opt.step % tcfg.ckpt_every == 0:
                mf.flush()
                checkpoint()
    if opt.step % tcfg.ckpt_every:
        checkpoint()
    return model


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop metrics rows written after the checkpoint being resumed."""
    if not path.exists():
        path.write_text(METRICS_HEADER + "\n")
        return
    keep = []
    for line in path.read_text().splitlines():
        head = line.split("\t", 1)[0]
        if not head.isdigit() or int(head) <= step:
            keep.append(line)
    path.write_text("\n".join(keep) + "\n")


def read_metrics(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    rows = np.array([[float(v) for v in l.split("\t")] for l in lines[1:] if l], dtype=np.float64)
    rows = rows.reshape(-1, len(cols))
    return {c: rows[:, i] for i, c in enumerate(cols)}


def smoothed(values: np.ndarray, window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    c = np.cumsum(np.insert(np.asarray(values, np.float64), 0, 0.0))
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
