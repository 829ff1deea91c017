"""INI-style run configuration with a typed schema and located error messages.

Every default used by the command line lives in :data:`SCHEMA`. Unknown
sections/keys and malformed values raise :class:`ConfigError` naming the
file, line and field.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .bridge import BridgeSchedule
from .data import DegradationSpec
from .errors import ConfigError, SBMError
from .spectral import check_cola
from .train import LossWeights, TrainConfig


def _floats(n):
    def parse(s):
        vals = tuple(float(v) for v in s.replace(",", " ").split())
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} numbers, got {len(vals)}")
        return vals
    return parse


def _ints(n):
    def parse(s):
        vals = tuple(int(v) for v in s.replace(",", " ").split())
        if len(vals) != n:
            raise ValueError(f"expected {n} integers, got {len(vals)}")
        return vals
    return parse


def _words(s):
    vals = tuple(s.replace(",", " ").split())
    if not vals:
        raise ValueError("expected at least one name")
    return vals


def _pairs(s):
    out = []
    for chunk in s.split(";"):
        chunk = chunk.strip()
        if chunk:
            out.append(_ints(2)(chunk))
    return tuple(out)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(" ".join(str(x) for x in p) for p in v)
        return " ".join(str(x) for x in v)
    return str(v)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "train_clips": (int, 200),
        "val_clips": (int, 0),
        "test_clips": (int, 20),
        "clip_s": (float, 2.0),
        "snr_db": (_floats(2), (-10.0, 20.0)),
        "rir": (str, "synthetic"),
        "t60": (_floats(2), (0.1, 0.6)),
        "rir_length": (int, 4096),
        "drr_db": (float, 0.0),
        "noise": (_words, ("white", "pink", "babble")),
        "kinds": (_words, ("harmonic-voice-surrogate", "chirp", "noise-burst-sentence")),
        "seed": (int, 0),
    },
    "stft": {
        "n_fft": (int, 512),
        "hop": (int, 128),
    },
    "backbone": {
        "n_blocks": (int, 4),
        "d_model": (int, 64),
        "d_state": (int, 16),
        "tf_compress": (_ints(2), (4, 2)),
        "time_causal": (_bool, True),
        "fourier_dim": (int, 64),
        "fourier_scale": (float, 16.0),
        "scan_impl": (str, "sequential"),
    },
    "bridge": {
        "c": (float, 0.3),
        "k": (float, 2.6),
        "T": (float, 1.0),
        "t_eps": (float, 1e-2),
        "convention": (str, "split"),
    },
    "loss": {
        "lambdas": (_floats(4), (1.0, 1.0, 1.0, 1.0)),
        "mr_resolutions": (_pairs, ((128, 32), (256, 64), (512, 128))),
    },
    "train": {
        "steps": (int, 2000),
        "batch_size": (int, 4),
        "crop_s": (float, 2.0),
        "lr": (float, 3e-4),
        "betas": (_floats(2), (0.9, 0.999)),
        "weight_decay": (float, 0.01),
        "warmup": (int, 100),
        "clip_norm": (float, 5.0),
        "ckpt_every": (int, 250),
        "log_every": (int, 10),
        "seed": (int, 0),
        "time_budget_s": (_opt_float, None),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict]
    source: str = "<defaults>"

    def section(self, name: str) -> dict:
        return self.values[name]

    # -- typed views ----------------------------------------------------
    def degradation(self) -> DegradationSpec:
        d = self.values["data"]
        return DegradationSpec(d["snr_db"], d["rir"], d["t60"], d["rir_length"], d["drr_db"],
                               d["noise"], seed=d["seed"])

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(**self.values["backbone"])

    def schedule(self) -> BridgeSchedule:
        b = dict(self.values["bridge"])
        b.pop("convention")
        return BridgeSchedule("ve", **b)

    def loss(self) -> LossWeights:
        l = self.values["loss"]
        return LossWeights(l["lambdas"], l["mr_resolutions"])

    def train(self) -> TrainConfig:
        s = self.values["stft"]
        return TrainConfig(**self.values["train"], convention=self.values["bridge"]["convention"],
                           n_fft=s["n_fft"], hop=s["hop"])

    def validate(self) -> "RunConfig":
        """Build every typed view so cross-field errors surface early."""
        try:
            check_cola(self.values["stft"]["n_fft"], self.values["stft"]["hop"])
            self.degradation()
            self.backbone()
            self.schedule()
            self.loss()
            self.train()
        except SBMError as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc
        if self.values["bridge"]["convention"] not in ("split", "full"):
            raise ConfigError(f"{self.source}: [bridge] convention must be split or full")
        return self

    def to_text(self) -> str:
        lines = []
        for sec, fields in self.values.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in fields.items()]
            lines.append("")
        return "\n".join(lines)

    def echo(self, path) -> None:
        Path(path).write_text(self.to_text())


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in f.items()} for s, f in SCHEMA.items()})


def _locate(text: str, section: str, key: str | None) -> int:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return n
            continue
        if cur == section and key is not None:
            m = re.match(r"\s*([^=:#;\s]+)\s*[=:]", line)
            if m and m.group(1).strip() == key:
                return n
    return 0


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = defaults()
    cfg.source = source
    for sec in cp.sections():
        line = _locate(text, sec, None)
        if sec not in SCHEMA:
            raise ConfigError(f"{source}:{line}: unknown section [{sec}]; expected one of {sorted(SCHEMA)}")
        for key, raw in cp.items(sec):
            line = _locate(text, sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}:{line}: [{sec}] unknown key {key!r}; "
                                  f"expected one of {sorted(SCHEMA[sec])}")
            parser, _ = SCHEMA[sec][key]
            try:
                cfg.values[sec][key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}:{line}: [{sec}] {key} = {raw!r}: {exc}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    if path is None:
        return defaults().validate()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
