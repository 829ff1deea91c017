"""Acceptance criteria 1-10, one printed PASS/FAIL line each.

Criteria 8 and 9 train two desk-scale models (about 15 min each, single
thread); everything else finishes in seconds.
"""

import hashlib
import time

import numpy as np
import pytest
from scipy import integrate

from sbmamba import selftest
from sbmamba import tensor as T
from sbmamba.backbone import BackboneConfig
from sbmamba.bridge import BridgeSchedule, iterative_sample, marginal_coeffs, ve_sigma2
from sbmamba.cli import bench_rtf, main
from sbmamba.data import build_corpus, load_pairs, si_sdr
from sbmamba.enhance import enhance_waveform
from sbmamba.spectral import SpectroBatch, hann, istft, stft
from sbmamba.ssm import SSMParams, discretize, scan_parallel, scan_sequential, ssm_kernel, causal_conv
from sbmamba.tensor import Tensor
from sbmamba.train import (LossWeights, OptimizerState, TrainConfig, build_model,
                           data_prediction_loss, load_checkpoint, make_batch, read_metrics,
                           sb_training_step, smoothed, train)
from sbmamba.selftest import randomize_parameters

# desk configuration for the end-to-end runs
E2E_BACKBONE = BackboneConfig(n_blocks=2, d_model=32, d_state=8)
E2E_TRAIN = TrainConfig(steps=1400, batch_size=4, crop_s=0.5, lr=1e-3, warmup=100, ckpt_every=500,
                        log_every=100, seed=0, time_budget_s=14.5 * 60)
E2E_TARGET_DB = 5.0


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_criterion_01_substitution(verdict):
    # large-scale perceptual listening scores are out of reach on a CPU; the property
    # suites below (criteria 2-10) stand in for them
    assert verdict(1, True, "large-scale perceptual listening scores not reproduced; substituted by criteria 2-10")


def test_criterion_02_bridge_boundaries(verdict):
    t0 = time.perf_counter()
    with T.precision("float64"):
        s = BridgeSchedule()
        m0, m1 = marginal_coeffs(s, 0.0), marginal_coeffs(s, s.T)
        exact = (m0.w_x, m0.w_y, m0.sigma_x) == (1.0, 0.0, 0.0) and (m1.w_x, m1.w_y, m1.sigma_x) == (0.0, 1.0, 0.0)
        err = max(abs(marginal_coeffs(s, t).w_x + marginal_coeffs(s, t).w_y - 1) for t in np.linspace(0, s.T, 64))
    dt = time.perf_counter() - t0
    ok = exact and err <= 1e-12 and dt < 1.0
    assert verdict(2, ok, f"endpoints exact={exact}, max|w_x+w_y-1|={err:.2e} (<=1e-12), {dt:.3f}s (<1s)")


def test_criterion_03_ve_quadrature(verdict, frozen):
    t0 = time.perf_counter()
    worst = 0.0
    for c, k, t, q in frozen["ve_triples"]:
        worst = max(worst, abs(ve_sigma2(BridgeSchedule(c=c, k=k), t) - q) / q)
    # also a fresh numpy trapezoid on the same triples
    for c, k, t, _ in frozen["ve_triples"]:
        grid = np.linspace(0.0, t, 200_001)
        q = integrate.trapezoid(c * k ** (2 * grid), grid)
        worst = max(worst, abs(ve_sigma2(BridgeSchedule(c=c, k=k), t) - q) / q)
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 5.0
    assert verdict(3, ok, f"20 triples, max rel err {worst:.2e} (<1e-8), {dt:.2f}s (<5s)")


# -- criterion 4: scalar linear-Gaussian toys --------------------------------
#
# x ~ N(0, 1), y = x + N(0, 1). Conditioned on y = 1 the target is
# N(0.5, 0.5). The SDE check uses the exact posterior mean E[x | x_t, y];
# the ODE check uses the y-marginal mean E[x | x_t] = x_t / (1 + w_y^2 + var),
# whose probability-flow endpoint from y = 1 is a deterministic number.


def conditional_mean_model(sched, y, mu=0.5, v=0.5):
    def model(x_t, t):
        m = marginal_coeffs(sched, t)
        den = v * m.w_x ** 2 + m.sigma_x ** 2
        if den == 0:
            return np.full_like(x_t, mu)
        return mu + v * m.w_x * (x_t - m.w_y * y - m.w_x * mu) / den

    return model


def marginal_mean_model(sched):
    def model(x_t, t):
        m = marginal_coeffs(sched, t)
        return x_t / (1 + m.w_y ** 2 + m.sigma_x ** 2)

    return model


def test_criterion_04_sampler_soundness(verdict, frozen):
    t0 = time.perf_counter()
    sched = BridgeSchedule()
    y = np.ones(100_000)
    x0, nfe = iterative_sample(y, conditional_mean_model(sched, 1.0), 50, sched, "sde", seed=0,
                               convention="full")
    mean_err, var_err = abs(x0.mean() - 0.5), abs(x0.var() - 0.5)
    target = frozen["ode_transport"]
    ode_err = [abs(float(iterative_sample(np.ones(1), marginal_mean_model(sched), n, sched, "ode")[0][0]) - target)
               for n in (1, 10, 50)]
    decreasing = ode_err[0] > ode_err[1] > ode_err[2]
    dt = time.perf_counter() - t0
    ok = mean_err < 0.02 and var_err < 0.02 and decreasing and dt < 60 and nfe == 50
    assert verdict(4, ok, f"sde(50) mean err {mean_err:.4f}, var err {var_err:.4f} (<0.02; var={x0.var():.4f} vs 0.5); "
                          f"ode err @1/10/50 = {ode_err[0]:.2e}/{ode_err[1]:.2e}/{ode_err[2]:.2e} "
                          f"decreasing={decreasing}; {dt:.1f}s (<60s)")


def test_criterion_05_scan_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for i in range(100):
        L = (1, 13, 64, 256)[i % 4]
        S, D, N = 2, 3, 4
        p = SSMParams(-rng.uniform(0.05, 3.0, N), rng.uniform(1e-3, 0.5, (S, L, D)),
                      rng.standard_normal((S, L, N)), rng.standard_normal((S, L, N)), rng.standard_normal(D))
        u = rng.standard_normal((S, L, D))
        for dtype in worst:
            pd = SSMParams(p.a.astype(dtype), p.delta.astype(dtype), p.b.astype(dtype), p.c_out.astype(dtype),
                           p.d_skip.astype(dtype))
            a = scan_sequential(u.astype(dtype), pd)
            worst[dtype] = max(worst[dtype], rel_err(scan_parallel(u.astype(dtype), pd), a))
    kern = 0.0
    for _ in range(50):
        N, L = 4, int(rng.integers(1, 128))
        a = -rng.uniform(0.05, 3.0, N)
        dl, bv, cv = rng.uniform(1e-3, 0.5), rng.standard_normal(N), rng.standard_normal(N)
        p = SSMParams(a, np.full((1, L, 1), dl), np.tile(bv, (1, L, 1)), np.tile(cv, (1, L, 1)))
        u = rng.standard_normal((1, L, 1))
        a_bar, b_bar = discretize(a, np.array([[dl]]), bv[None])
        K = ssm_kernel(a_bar[0, 0], b_bar[0, 0], cv, L)
        kern = max(kern, rel_err(causal_conv(u[0, :, 0], K), scan_sequential(u, p)[0, :, 0]))
    dt = time.perf_counter() - t0
    ok = worst[np.float32] < 1e-5 and worst[np.float64] < 1e-10 and kern < 1e-6 and dt < 30
    assert verdict(5, ok, f"parallel vs sequential: {worst[np.float32]:.2e} (32-bit, <1e-5), "
                          f"{worst[np.float64]:.2e} (64-bit, <1e-10); kernel {kern:.2e} (<1e-6); {dt:.1f}s (<30s)")


def test_criterion_06_gradient_integrity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    with T.precision("float64"):
        cfg = BackboneConfig(n_blocks=1, d_model=4, d_state=2, fourier_dim=4)
        m = build_model("sbm", cfg, seed=0)
        n_params = m.n_parameters()
        # generic parameter point: at init several paths carry gradients
        # far below central-difference round-off
        randomize_parameters(m, rng)
        x = SpectroBatch(Tensor(rng.standard_normal((1, 2, 9, 6))), n_fft=16, hop=4)
        R = Tensor(rng.standard_normal((1, 2, 9, 6)))
        names, params = zip(*m.named_parameters())
        rep = T.check_gradients(lambda: (m(x, 0.5).planes * R).sum(), list(params), tol=1e-4, eps=1e-5,
                                names=list(names))
    # one real training step from the initial point
    m = build_model("sbm", cfg, seed=0)
    clean = [0.3 * rng.standard_normal(4000) for _ in range(2)]
    batch = make_batch(clean, [c + 0.1 * rng.standard_normal(4000) for c in clean], rng, 2, 1024, 256, 64)
    sb_training_step(batch, m, BridgeSchedule(), OptimizerState(total_steps=2), rng)
    dead = [k for k, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
    dt = time.perf_counter() - t0
    ok = n_params <= 2000 and rep.ok and rep.max_error < 1e-4 and not dead and dt < 120
    assert verdict(6, ok, f"{n_params} params, max rel err {rep.max_error:.2e} (<1e-4, eps 1e-5, 64-bit); "
                          f"zero-gradient params: {dead or 'none'}; {dt:.1f}s (<120s)")


def np_stft(x, n_fft, hop):
    L = -(-len(x) // hop)
    xp = np.pad(x, n_fft // 2, mode="reflect")
    xp = np.pad(xp, (0, max(0, (L - 1) * hop + n_fft - len(xp))))
    frames = np.stack([xp[j * hop: j * hop + n_fft] for j in range(L)])
    return np.fft.rfft(frames * hann(n_fft), axis=1).T


def test_criterion_07_signal_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    presets = [(512, 128), (256, 64), (128, 32), (512, 256), (256, 128), (128, 64)]
    rt = 0.0
    adj = 0.0
    with T.precision("float64"):
        for n_fft, hop in presets:
            x = rng.standard_normal((2, 5003))
            rt = max(rt, rel_err(istft(stft(Tensor(x), n_fft, hop), 5003).data, x))
            # <stft x, G> = <x, stft^T G>, with stft^T from reverse mode; same for istft
            xt = Tensor(x, requires_grad=True)
            S = stft(xt, n_fft, hop)
            G = rng.standard_normal(S.planes.shape)
            (S.planes * Tensor(G)).sum().backward()
            adj = max(adj, abs(np.sum(S.planes.data * G) - np.sum(x * xt.grad)) / abs(np.sum(S.planes.data * G)))
            P = Tensor(rng.standard_normal(S.planes.shape), requires_grad=True)
            y = istft(SpectroBatch(P, n_fft, hop), 5003)
            g = rng.standard_normal(y.shape)
            (y * Tensor(g)).sum().backward()
            adj = max(adj, abs(np.sum(y.data * g) - np.sum(P.data * P.grad)) / abs(np.sum(y.data * g)))
        S = stft(Tensor(rng.standard_normal((2, 4096))), 512, 128)
        zero = float(data_prediction_loss(S, S).data)
        n = 4096
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        Sa, Sb = stft(Tensor(a[None]), 512, 128), stft(Tensor(b[None]), 512, 128)
        got = float(data_prediction_loss(Sa, Sb, LossWeights(), n).data)
    pl = lambda Z: np.stack([Z.real, Z.imag])
    mag = lambda Z: np.sqrt(np.abs(Z) ** 2 + 1e-9)
    A, B = np_stft(a, 512, 128), np_stft(b, 512, 128)
    ref = np.mean((pl(B) - pl(A)) ** 2) + np.mean((mag(B) - mag(A)) ** 2)
    mr = [(np.mean((pl(np_stft(b, f, h)) - pl(np_stft(a, f, h))) ** 2),
           np.mean((mag(np_stft(b, f, h)) - mag(np_stft(a, f, h))) ** 2)) for f, h in LossWeights().mr_resolutions]
    ref += np.mean([m[0] for m in mr]) + np.mean([m[1] for m in mr])
    loss_err = abs(got - ref) / ref
    dt = time.perf_counter() - t0
    ok = rt < 1e-6 and adj < 1e-5 and zero == 0.0 and loss_err < 1e-6 and dt < 30
    assert verdict(7, ok, f"round trip {rt:.2e} (<1e-6, {len(presets)} presets); adjoint {adj:.2e} (<1e-5); "
                          f"loss(S,S)={zero}; loss vs numpy rfft {loss_err:.2e} (<1e-6); {dt:.1f}s (<30s)")


# -- criteria 8-9: end-to-end desk runs --------------------------------------


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    paths = build_corpus(root / "corpus", {"train": 200, "test": 20}, dur_s=2.0, seed=0)
    clean, degraded, _ = load_pairs(paths["train"])
    test_clean, test_deg, _ = load_pairs(paths["test"])
    runs = {}
    for mode in ("sbm", "mamba-base"):
        t0 = time.perf_counter()
        model = train(mode, clean, degraded, root / mode, E2E_TRAIN, E2E_BACKBONE, resume=False,
                      log=lambda *_: None)
        wall = time.perf_counter() - t0
        met = read_metrics(root / mode / "metrics.tsv")
        imp = [si_sdr(c, enhance_waveform(model, d)[0]) - si_sdr(c, d) for c, d in zip(test_clean, test_deg)]
        runs[mode] = {"model": model, "wall": wall, "steps": int(met["step"][-1]), "metrics": met,
                      "improvement": float(np.mean(imp)), "dir": root / mode}
    return runs


def test_criterion_08_end_to_end(verdict, e2e):
    parts, ok = [], True
    for mode, r in e2e.items():
        good = r["improvement"] >= E2E_TARGET_DB and r["steps"] <= 2000 and r["wall"] <= 15 * 60
        ok &= good
        parts.append(f"{mode}: {r['improvement']:+.2f} dB in {r['steps']} steps / {r['wall'] / 60:.1f} min")
    delta = e2e["sbm"]["improvement"] - e2e["mamba-base"]["improvement"]
    assert verdict(8, ok, "; ".join(parts) + f" (each >= +{E2E_TARGET_DB:.0f} dB); "
                          f"sbm - mamba-base = {delta:+.2f} dB (logged, not gated)")


def test_training_loss_halves_within_500_steps(e2e):
    for mode, r in e2e.items():
        s = smoothed(r["metrics"]["loss"])
        print(f"{mode}: smoothed loss step 10 {s[9]:.3f}, step 500 {s[499]:.3f}")
        assert s[499] <= 0.5 * s[9]


def test_criterion_09_nfe_rtf(verdict, e2e):
    ck = e2e["sbm"]["dir"] / (e2e["sbm"]["dir"] / "latest").read_text().strip()
    model, _, state = load_checkpoint(ck)
    res = bench_rtf(model, state, [1, 10, 50], n_clips=3, clip_s=4.0, warmup=1, log=lambda *_: None)
    nfe_ok = [r["nfe"] for r in res] == [1, 10, 50]
    rtf = [r["rtf_mean"] for r in res]
    ok = nfe_ok and rtf[0] < rtf[1] < rtf[2]
    assert verdict(9, ok, "nfe " + "/".join(str(r["nfe"]) for r in res) + " for steps 1/10/50; rtf "
                   + " < ".join(f"{v:.4f}" for v in rtf))


def _digest(directory):
    h = hashlib.sha256()
    for f in sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix in (".sbmt", ".wav")):
        h.update(f.relative_to(directory).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_criterion_10_determinism(verdict, tmp_path, capsys):
    lines = []
    for _ in range(2):
        out = []
        selftest.run(seed=3, log=out.append)
        lines.append(out)
    same_selftest = lines[0] == lines[1]
    ini = tmp_path / "tiny.ini"
    ini.write_text("[data]\ntrain_clips = 4\ntest_clips = 1\nclip_s = 0.5\n"
                   "[backbone]\nn_blocks = 1\nd_model = 8\nd_state = 4\nfourier_dim = 8\n"
                   "[train]\nsteps = 6\nbatch_size = 2\ncrop_s = 0.25\nwarmup = 2\nckpt_every = 3\n")
    main(["synth", "--config", str(ini), "--out", str(tmp_path / "c")])
    man = str(tmp_path / "c" / "manifest_train.tsv")
    digests, wavs = [], []
    for i in range(2):
        main(["train", "--config", str(ini), "--manifest", man, "--out", str(tmp_path / f"r{i}"), "--seed", "11"])
        digests.append(_digest(tmp_path / f"r{i}" / "ckpt"))
        out = tmp_path / f"e{i}.wav"
        main(["enhance", "--checkpoint", str(tmp_path / f"r{i}"), "--input",
              str(tmp_path / "c" / "test" / "00000_degraded.wav"), "--output", str(out),
              "--mode", "sde", "--steps", "5", "--seed", "2"])
        wavs.append(out.read_bytes())
    capsys.readouterr()
    same_train, same_enh = digests[0] == digests[1], wavs[0] == wavs[1]
    ok = same_selftest and same_train and same_enh
    assert verdict(10, ok, f"selftest identical={same_selftest}, training checkpoints identical={same_train}, "
                           f"enhanced audio identical={same_enh} (single thread)")
