import numpy as np
import pytest

from sbmamba.cli import main
from sbmamba.config import defaults, load_config, parse_config
from sbmamba.errors import ConfigError
from sbmamba.spectral import read_wav, write_wav

TINY_INI = """\
[data]
train_clips = 3
test_clips = 2
clip_s = 0.5
seed = 4

[backbone]
n_blocks = 1
d_model = 4
d_state = 2
fourier_dim = 4

[train]
steps = 3
batch_size = 1
crop_s = 0.1
warmup = 1
ckpt_every = 2
log_every = 1
"""


class TestConfig:
    def test_defaults_validate(self):
        cfg = defaults().validate()
        assert cfg.backbone().d_model == 64 and cfg.train().n_fft == 512
        assert cfg.loss().mr_resolutions == ((128, 32), (256, 64), (512, 128))

    def test_override(self):
        cfg = parse_config("[bridge]\nc = 0.5\nconvention = full\n[loss]\nmr_resolutions = 256 64; 512 128\n")
        assert cfg.schedule().c == 0.5 and cfg.train().convention == "full"
        assert cfg.loss().mr_resolutions == ((256, 64), (512, 128))

    def test_echo_roundtrip(self, tmp_path):
        cfg = parse_config(TINY_INI)
        cfg.echo(tmp_path / "echo.ini")
        assert load_config(tmp_path / "echo.ini").values == cfg.values

    @pytest.mark.parametrize("text,line", [
        ("[data]\nseed = 1\n\n[tarin]\nsteps = 2\n", 4),
        ("[data]\nseed = 1\nsnr = 3\n", 3),
        ("[train]\n\nsteps = many\n", 3),
        ("[data]\nsnr_db = 1 2 3\n", 2),
    ])
    def test_error_line_numbers(self, text, line):
        with pytest.raises(ConfigError, match=rf"cfg\.ini:{line}:"):
            parse_config(text, "cfg.ini")

    @pytest.mark.parametrize("text", ["[stft]\nhop = 100\n", "[bridge]\nconvention = half\n",
                                      "[backbone]\nfourier_dim = 5\n", "[loss]\nlambdas = 0 0 0 0\n",
                                      "[data]\nsnr_db = 5 -5\n"])
    def test_cross_field_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.ini").write_text(TINY_INI)
    assert main(["synth", "--config", str(d / "tiny.ini"), "--out", str(d / "corpus")]) == 0
    assert main(["train", "--config", str(d / "tiny.ini"), "--manifest", str(d / "corpus" / "manifest_train.tsv"),
                 "--mode", "sbm", "--out", str(d / "sbm")]) == 0
    return d


class TestCli:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["enhance", "--checkpoint", "x"])
        assert exc.value.code == 1

    def test_config_error_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[train]\nsteps = x\n")
        assert main(["synth", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 2
        assert "bad.ini:2:" in capsys.readouterr().err

    def test_missing_input_exit_code(self, run_dir, tmp_path):
        assert main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", str(tmp_path / "none.wav"),
                     "--output", str(tmp_path / "o.wav")]) == 3

    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 7 and all(l.startswith("PASS") for l in out)

    def test_synth_idempotent(self, run_dir, tmp_path):
        assert main(["synth", "--config", str(run_dir / "tiny.ini"), "--out", str(tmp_path / "again")]) == 0
        for f in sorted((run_dir / "corpus").rglob("*.wav")):
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(run_dir / "corpus")).read_bytes()

    def test_train_outputs(self, run_dir):
        assert (run_dir / "sbm" / "latest").read_text().strip() == "ckpt/step_000003"
        assert (run_dir / "sbm" / "config.ini").exists()
        assert len((run_dir / "sbm" / "metrics.tsv").read_text().splitlines()) == 4

    def test_train_resume_is_noop_when_done(self, run_dir):
        before = (run_dir / "sbm" / "metrics.tsv").read_text()
        assert main(["train", "--config", str(run_dir / "tiny.ini"),
                     "--manifest", str(run_dir / "corpus" / "manifest_train.tsv"),
                     "--out", str(run_dir / "sbm")]) == 0
        assert (run_dir / "sbm" / "metrics.tsv").read_text() == before

    def test_one_step_equals_ode_single_step(self, run_dir, tmp_path, capsys):
        src = str(run_dir / "corpus" / "test" / "00000_degraded.wav")
        outs = {}
        for mode in ("one-step", "ode", "sde"):
            dst = tmp_path / f"{mode}.wav"
            assert main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", src,
                         "--output", str(dst), "--mode", mode, "--steps", "1"]) == 0
            outs[mode] = dst.read_bytes()
        assert outs["one-step"] == outs["ode"] == outs["sde"]
        assert "nfe=1" in capsys.readouterr().out

    def test_iterative_nfe_and_seed(self, run_dir, tmp_path, capsys):
        src = str(run_dir / "corpus" / "test" / "00001_degraded.wav")
        paths = []
        for i, seed in enumerate((1, 1, 2)):
            paths.append(tmp_path / f"{i}.wav")
            assert main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", src, "--output",
                         str(paths[-1]), "--mode", "sde", "--steps", "3", "--seed", str(seed)]) == 0
        assert "nfe=3" in capsys.readouterr().out
        a, b, c = (p.read_bytes() for p in paths)
        assert a == b and a != c
        assert len(read_wav(paths[0])[0]) == len(read_wav(src)[0])

    def test_one_step_rejects_many_steps(self, run_dir, tmp_path):
        src = str(run_dir / "corpus" / "test" / "00000_degraded.wav")
        assert main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", src,
                     "--output", str(tmp_path / "o.wav"), "--steps", "4"]) == 1

    def test_as_mamba_base_requires_flag(self, run_dir, tmp_path):
        src = str(run_dir / "corpus" / "test" / "00000_degraded.wav")
        args = ["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", src, "--output",
                str(tmp_path / "o.wav"), "--as-mamba-base"]
        assert main(args) == 1
        assert main(args + ["--allow-mode-change"]) == 0
        assert main(args + ["--allow-mode-change", "--mode", "sde", "--steps", "5"]) == 1

    def test_enhance_manifest_and_eval(self, run_dir, tmp_path, capsys):
        man = str(run_dir / "corpus" / "manifest_test.tsv")
        assert main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--manifest", man,
                     "--output", str(tmp_path / "enh")]) == 0
        assert main(["eval", "--manifest", man, "--enhanced", str(tmp_path / "enh"),
                     "--report", str(tmp_path / "r.tsv")]) == 0
        rows = (tmp_path / "r.tsv").read_text().splitlines()
        assert rows[0].split("\t")[:3] == ["file", "si_sdr", "lsd"]
        assert [r.split("\t")[0] for r in rows[-2:]] == ["MEAN", "NO-OP"]
        assert "mean SI-SDR improvement" in capsys.readouterr().out

    def test_eval_missing_files(self, run_dir, tmp_path, capsys):
        man = str(run_dir / "corpus" / "manifest_test.tsv")
        (tmp_path / "enh").mkdir()
        clean, _ = read_wav(run_dir / "corpus" / "test" / "00000_clean.wav")
        write_wav(tmp_path / "enh" / "00000_degraded.wav", clean)
        code = main(["eval", "--manifest", man, "--enhanced", str(tmp_path / "enh"),
                     "--report", str(tmp_path / "r.tsv")])
        assert code == 3
        assert "missing" in capsys.readouterr().err
        rows = (tmp_path / "r.tsv").read_text().splitlines()
        assert len(rows) == 4  # header, one file, MEAN, NO-OP
        assert float(rows[1].split("\t")[1]) == 100.0

    def test_bench_rtf(self, run_dir, capsys):
        assert main(["bench-rtf", "--checkpoint", str(run_dir / "sbm"), "--steps", "1", "2",
                     "--n-clips", "1", "--clip-s", "0.5", "--warmup", "0"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("steps=")]
        assert [l.split("\t")[1] for l in lines] == ["nfe=1", "nfe=2"]

    def test_checkpoint_error_paths(self, tmp_path):
        assert main(["bench-rtf", "--checkpoint", str(tmp_path)]) == 3

    def test_wav_output_is_finite(self, run_dir, tmp_path):
        src = str(run_dir / "corpus" / "test" / "00000_degraded.wav")
        main(["enhance", "--checkpoint", str(run_dir / "sbm"), "--input", src, "--output", str(tmp_path / "o.wav")])
        assert np.all(np.isfinite(read_wav(tmp_path / "o.wav")[0]))
