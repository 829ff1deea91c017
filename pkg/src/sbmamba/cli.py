"""Command line: synth, train, enhance, eval, bench-rtf, selftest.

Exit codes: 0 ok, 1 usage/contract, 2 config, 3 data, 4 numerical failure.
Set ``SBM_NUM_THREADS`` (default 1) to change the math-library thread count.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import selftest
from .bridge import BridgeSchedule
from .config import load_config
from .data import (CorpusManifest, build_corpus, load_pairs, log_spectral_distance, si_sdr,
                   synth_clean)
from .enhance import ENHANCE_MODES, enhance_waveform
from .errors import ContractError, InputError, MetricError, SBMError
from .spectral import SAMPLE_RATE, read_wav, write_wav
from .train import MODES, load_checkpoint, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, flush=True)


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if (p / "latest").exists():
        p = p / (p / "latest").read_text().strip()
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    d = cfg.section("data")
    seed = d["seed"] if args.seed is None else args.seed
    counts = {k: d[f"{k}_clips"] for k in ("train", "val", "test") if d[f"{k}_clips"] > 0}
    paths = build_corpus(args.out, counts, d["clip_s"], cfg.degradation(), seed, d["kinds"])
    cfg.echo(Path(args.out) / "config.ini")
    for split, p in paths.items():
        _log(f"wrote {p} ({counts[split]} pairs)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train()
    over = {}
    if args.steps is not None:
        over["steps"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.time_budget is not None:
        over["time_budget_s"] = args.time_budget
    if over:
        tcfg = replace(tcfg, **over)
    clean, degraded, _ = load_pairs(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out / "config.ini")
    train(args.mode, clean, degraded, out, tcfg, cfg.backbone(), cfg.schedule(), cfg.loss(),
          resume=not args.no_resume, config_echo=cfg.values, log=_log)
    _log(f"checkpoint: {out / (out / 'latest').read_text().strip()}")
    return 0


def _enhance_file(model, state, src, dst, args) -> int:
    audio, _ = read_wav(src, SAMPLE_RATE)
    sched_cfg = state.get("schedule", {})
    sched = BridgeSchedule(**sched_cfg) if sched_cfg else BridgeSchedule()
    conv = state.get("train", {}).get("convention", "split")
    tr = state.get("train", {})
    out, nfe = enhance_waveform(model, audio, args.mode, args.steps, sched, args.seed, conv,
                                tr.get("n_fft", 512), tr.get("hop", 128))
    write_wav(dst, out, SAMPLE_RATE, args.format)
    return nfe


def cmd_enhance(args) -> int:
    ck = _resolve_checkpoint(args.checkpoint)
    model, _, state = load_checkpoint(ck, "mamba-base" if args.as_mamba_base else None,
                                      allow_mode_change=args.allow_mode_change)
    if args.mode == "one-step" and args.steps != 1:
        raise ContractError("--mode one-step requires --steps 1")
    if args.manifest:
        m = CorpusManifest.read(args.manifest)
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        for e in m.entries:
            src = m.resolve(args.manifest, e.degraded_path)
            nfe = _enhance_file(model, state, src, out_dir / Path(e.degraded_path).name, args)
        _log(f"enhanced {len(m.entries)} files into {out_dir}")
    else:
        nfe = _enhance_file(model, state, args.input, args.output, args)
        _log(f"wrote {args.output}")
    _log(f"nfe={nfe}")
    return 0


def evaluate(manifest, enhanced_dir, log=_log) -> tuple[list[dict], list[str]]:
    """Per-file SI-SDR/LSD for enhanced files named after each degraded file."""
    m = CorpusManifest.read(manifest)
    rows, missing = [], []
    for e in m.entries:
        enh_path = Path(enhanced_dir) / Path(e.degraded_path).name
        if not enh_path.exists():
            missing.append(str(enh_path))
            continue
        clean = read_wav(m.resolve(manifest, e.clean_path), m.sample_rate)[0]
        deg = read_wav(m.resolve(manifest, e.degraded_path), m.sample_rate)[0]
        enh = read_wav(enh_path, m.sample_rate)[0]
        if len(enh) != len(clean):
            raise InputError(f"{enh_path}: length {len(enh)} != reference {len(clean)}")
        try:
            rows.append({"file": Path(e.degraded_path).name,
                         "si_sdr": si_sdr(clean, enh), "lsd": log_spectral_distance(clean, enh),
                         "si_sdr_in": si_sdr(clean, deg), "lsd_in": log_spectral_distance(clean, deg)})
        except MetricError as exc:
            log(f"skipping {enh_path}: {exc}")
    return rows, missing


def format_report(rows: list[dict]) -> str:
    cols = ("file", "si_sdr", "lsd", "si_sdr_in", "lsd_in")
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join([r["file"]] + [f"{r[c]:.6f}" for c in cols[1:]]))
    if rows:
        means = {c: float(np.mean([r[c] for r in rows])) for c in cols[1:]}
        lines.append("\t".join(["MEAN"] + [f"{means[c]:.6f}" for c in cols[1:]]))
        lines.append("\t".join(["NO-OP", f"{means['si_sdr_in']:.6f}", f"{means['lsd_in']:.6f}",
                                f"{means['si_sdr_in']:.6f}", f"{means['lsd_in']:.6f}"]))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    rows, missing = evaluate(args.manifest, args.enhanced)
    report = format_report(rows)
    if args.report:
        Path(args.report).write_text(report)
    print(f"{'file':<28}{'SI-SDR':>10}{'LSD':>9}{'SI-SDR in':>11}{'LSD in':>9}")
    for line in report.splitlines()[1:]:
        f, *vals = line.split("\t")
        print(f"{f:<28}" + "".join(f"{float(v):>{w}.2f}" for v, w in zip(vals, (10, 9, 11, 9))))
    if rows:
        imp = np.mean([r["si_sdr"] - r["si_sdr_in"] for r in rows])
        print(f"mean SI-SDR improvement: {imp:.2f} dB over {len(rows)} files")
    if missing:
        for p in missing:
            print(f"missing: {p}", file=sys.stderr)
        return InputError.exit_code
    return 0


def bench_rtf(model, state, steps_list, n_clips: int = 10, clip_s: float = 10.0, warmup: int = 2,
              mode: str = "sde", seed: int = 0, log=_log) -> list[dict]:
    """Wall-time / audio-duration over synthetic clips, warmup runs excluded."""
    clips = [synth_clean("harmonic-voice-surrogate", clip_s, seed + i) for i in range(n_clips)]
    results = []
    for steps in steps_list:
        m = "one-step" if steps == 1 else mode
        for i in range(warmup):
            enhance_waveform(model, clips[i % n_clips], m, steps, seed=seed)
        rtfs, nfes = [], set()
        for clip in clips:
            t0 = time.perf_counter()
            _, nfe = enhance_waveform(model, clip, m, steps, seed=seed)
            rtfs.append((time.perf_counter() - t0) / clip_s)
            nfes.add(nfe)
        r = {"steps": steps, "nfe": nfes.pop() if len(nfes) == 1 else -1,
             "rtf_mean": float(np.mean(rtfs)), "rtf_std": float(np.std(rtfs))}
        log(f"steps={r['steps']}\tnfe={r['nfe']}\trtf={r['rtf_mean']:.4f} +- {r['rtf_std']:.4f}")
        results.append(r)
    return results


def cmd_bench_rtf(args) -> int:
    ck = _resolve_checkpoint(args.checkpoint)
    model, _, state = load_checkpoint(ck)
    bench_rtf(model, state, args.steps, args.n_clips, args.clip_s, args.warmup, args.mode, args.seed)
    return 0


def cmd_selftest(args) -> int:
    return 0 if selftest.run(args.seed, _log) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbmamba", description="Bridge-based speech enhancement with a Mamba backbone")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic paired corpus and manifests")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train sbm or mamba-base")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=MODES, default="sbm")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--time-budget", type=float, help="stop after this many seconds")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="enhance a WAV file (or every degraded file of a manifest)")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--input")
    g.add_argument("--manifest")
    s.add_argument("--output", required=True, help="output WAV, or output directory with --manifest")
    s.add_argument("--mode", choices=ENHANCE_MODES, default="one-step")
    s.add_argument("--steps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    s.add_argument("--as-mamba-base", action="store_true", help="load an sbm checkpoint without timestep parameters")
    s.add_argument("--allow-mode-change", action="store_true")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="SI-SDR / LSD report for enhanced files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--enhanced", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench-rtf", help="real-time factor per step count")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int, nargs="+", default=[1, 10, 50])
    s.add_argument("--n-clips", type=int, default=10)
    s.add_argument("--clip-s", type=float, default=10.0)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--mode", choices=("sde", "ode"), default="sde")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_rtf)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SBMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
