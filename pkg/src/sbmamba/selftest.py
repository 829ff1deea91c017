"""Fast built-in oracle suite used by ``sbmamba selftest``.

Each check returns ``(name, ok, detail)``; details hold numbers only (no
timings) so two runs with the same seed print identical text.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .bridge import BridgeSchedule, marginal_coeffs, ve_sigma2
from .data import si_sdr
from .spectral import SpectroBatch, istft, stft
from .ssm import SSMParams, scan_parallel, scan_sequential
from .train import LossWeights, data_prediction_loss


def check_bridge_boundaries(rng):
    with T.precision("float64"):
        s = BridgeSchedule()
        m0, m1 = marginal_coeffs(s, 0.0), marginal_coeffs(s, s.T)
        ok = (m0.w_x, m0.w_y, m0.sigma_x) == (1.0, 0.0, 0.0) and (m1.w_x, m1.w_y, m1.sigma_x) == (0.0, 1.0, 0.0)
        err = max(abs(marginal_coeffs(s, t).w_x + marginal_coeffs(s, t).w_y - 1) for t in np.linspace(0, s.T, 64))
    return "bridge-boundaries", ok and err < 1e-12, f"sum_err={err:.3e}"


def check_ve_quadrature(rng):
    worst = 0.0
    for _ in range(20):
        c, k, t = rng.uniform(0.05, 2.0), rng.uniform(1.2, 10.0), rng.uniform(0.05, 1.0)
        s = BridgeSchedule(c=c, k=k)
        grid = np.linspace(0, t, 20001)
        q = integrate.trapezoid(s.g2(grid), grid)
        worst = max(worst, abs(ve_sigma2(s, t) - q) / q)
    return "ve-quadrature", worst < 1e-8, f"max_rel={worst:.3e}"


def check_scan(rng):
    worst = 0.0
    for L in (1, 13, 64):
        S, D, N = 2, 3, 4
        p = SSMParams(-rng.uniform(0.1, 2.0, N), rng.uniform(0.01, 0.5, (S, L, D)),
                      rng.standard_normal((S, L, N)), rng.standard_normal((S, L, N)), rng.standard_normal(D))
        u = rng.standard_normal((S, L, D))
        a, b = scan_sequential(u, p), scan_parallel(u, p)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30)))
    return "scan-equivalence", worst < 1e-10, f"max_rel={worst:.3e}"


def check_stft(rng):
    worst = 0.0
    with T.precision("float64"):
        for n_fft, hop in ((512, 128), (256, 64), (128, 32)):
            w = rng.standard_normal((2, 4000))
            r = istft(stft(T.Tensor(w), n_fft, hop), 4000).data
            worst = max(worst, float(np.max(np.abs(r - w)) / np.max(np.abs(w))))
    return "stft-roundtrip", worst < 1e-6, f"max_rel={worst:.3e}"


def check_loss_zero(rng):
    with T.precision("float64"):
        S = stft(T.Tensor(rng.standard_normal((2, 2048))), 512, 128)
        val = float(data_prediction_loss(S, S, LossWeights()).data)
    return "loss-zero", val == 0.0, f"loss={val!r}"


def randomize_parameters(model, rng, scale: float = 0.5) -> None:
    """Move every parameter to a generic point.

    At initialization some paths (near-zero output head, small step sizes)
    carry gradients ~1e-8 of the loss, below central-difference round-off.
    """
    for _, p in model.named_parameters():
        p.data = rng.normal(0.0, scale, p.shape).astype(p.dtype)


def check_gradients(rng):
    with T.precision("float64"):
        cfg = BackboneConfig(n_blocks=1, d_model=4, d_state=2, fourier_dim=4, tf_compress=(4, 2))
        m = Backbone(cfg, seed=int(rng.integers(1 << 30)))
        randomize_parameters(m, rng)
        x = SpectroBatch(T.Tensor(rng.standard_normal((1, 2, 9, 6))), n_fft=16, hop=4)
        R = T.Tensor(rng.standard_normal((1, 2, 9, 6)))
        names, params = zip(*m.named_parameters())
        rep = T.check_gradients(lambda: (m(x, 0.5).planes * R).sum(), list(params), tol=1e-4,
                                eps=1e-5, names=list(names), max_entries=4, rng=rng)
    return "model-gradients", rep.ok, f"max_rel={rep.max_error:.3e}"


def check_si_sdr(rng):
    x = rng.standard_normal(4000)
    return "si-sdr-cap", si_sdr(x, 2 * x) == 100.0, f"value={si_sdr(x, 2 * x)}"


CHECKS = (check_bridge_boundaries, check_ve_quadrature, check_scan, check_stft,
          check_loss_zero, check_gradients, check_si_sdr)


def run(seed: int = 0, log=print) -> bool:
    rng = np.random.default_rng(seed)
    all_ok = True
    for fn in CHECKS:
        name, ok, detail = fn(rng)
        all_ok &= bool(ok)
        log(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    return all_ok
