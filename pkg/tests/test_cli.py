"""End-to-end tests of the command-line interface."""

import json

import numpy as np
import pytest

from semamba.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from semamba.models import save_checkpoint
from semamba.pipeline import passthrough_checkpoint, read_wav, write_wav

TINY_TRAIN = """
[train]
model = "basic"
steps = 2
batch_size = 1
segment_len = 800

[model]
enc_channels = [2]
enc_freq_strides = [2]
d_model = 4
n_mamba = 1
d_state = 2
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "synth.toml"
    spec.write_text('[synth]\nn = 3\nduration_s = 1.0\nnoises = ["white"]\n')
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), "--seed", "1"]) == EXIT_OK
    return root / "data"


def test_synth_layout(synth_dir):
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert len(manifest["items"]) == 3
    assert (synth_dir / "clean" / "00000.wav").exists()


def test_synth_same_seed_bitwise(synth_dir, tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text('[synth]\nn = 3\nduration_s = 1.0\nnoises = ["white"]\n')
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "again"), "--seed", "1"])
    for sub in ("clean", "noisy"):
        a = (synth_dir / sub / "00002.wav").read_bytes()
        b = (tmp_path / "again" / sub / "00002.wav").read_bytes()
        assert a == b


def test_train_and_resume(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "t.toml"
    cfg.write_text(TINY_TRAIN)
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "log.jsonl"
    rc = main(["train", "--model", "basic", "--config", str(cfg), "--data", str(synth_dir), "--out", str(ckpt),
               "--log", str(log)])
    assert rc == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["final"]["step"] == 2
    assert len(log.read_text().splitlines()) == 2
    rc = main(["train", "--model", "basic", "--config", str(cfg), "--data", str(synth_dir), "--out",
               str(tmp_path / "m2.ckpt"), "--resume", str(ckpt), "--steps", "3"])
    assert rc == EXIT_OK


def test_train_model_mismatch(synth_dir, tmp_path):
    cfg = tmp_path / "t.toml"
    cfg.write_text(TINY_TRAIN)
    rc = main(["train", "--model", "advanced", "--config", str(cfg), "--data", str(synth_dir),
               "--out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_USAGE


def test_train_loss_weight_flags(synth_dir, tmp_path):
    cfg = tmp_path / "t.toml"
    cfg.write_text(TINY_TRAIN)
    base = ["train", "--model", "basic", "--config", str(cfg), "--data", str(synth_dir),
            "--out", str(tmp_path / "w.ckpt")]
    assert main(base + ["--w-phase", "0.5", "--w-consistency", "0"]) == EXIT_OK
    assert main(base + ["--w-gan", "1.0"]) == EXIT_USAGE
    assert main(base + ["--w-mag", "-1"]) == EXIT_USAGE


def test_train_missing_data(tmp_path):
    rc = main(["train", "--model", "basic", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_IO


@pytest.fixture()
def passthrough(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(passthrough_checkpoint("basic"), path)
    return path


@pytest.mark.filterwarnings("ignore::semamba.pipeline.ClippingWarning")
def test_enhance_and_eval(synth_dir, passthrough, tmp_path, capsys):
    noisy = synth_dir / "noisy" / "00000.wav"
    out = tmp_path / "e.wav"
    assert main(["enhance", "--in", str(noisy), "--ckpt", str(passthrough), "--out", str(out)]) == EXIT_OK
    assert np.max(np.abs(read_wav(out) - read_wav(noisy))) <= 1 / 32768 + 1e-12
    assert main(["enhance", "--in", str(noisy), "--ckpt", str(passthrough), "--out", str(out),
                 "--pcs", "default"]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--ref", str(synth_dir / "clean" / "00000.wav"), "--est", str(out)]) == EXIT_OK
    scores = json.loads(capsys.readouterr().out)
    assert set(scores) == {"si_sdr", "stoi"}


def test_enhance_pcs_file(synth_dir, passthrough, tmp_path):
    table = tmp_path / "pcs.txt"
    table.write_text("0 8000 1.0\n")
    noisy = synth_dir / "noisy" / "00001.wav"
    out = tmp_path / "e.wav"
    assert main(["enhance", "--in", str(noisy), "--ckpt", str(passthrough), "--out", str(out),
                 "--pcs", str(table)]) == EXIT_OK


def test_enhance_kind_mismatch(synth_dir, passthrough, tmp_path):
    rc = main(["enhance", "--in", str(synth_dir / "noisy" / "00000.wav"), "--ckpt", str(passthrough),
               "--out", str(tmp_path / "e.wav"), "--model", "advanced"])
    assert rc == EXIT_IO


def test_enhance_bad_wav(passthrough, tmp_path):
    write_wav(tmp_path / "r.wav", np.zeros(8000), sample_rate=8000)
    rc = main(["enhance", "--in", str(tmp_path / "r.wav"), "--ckpt", str(passthrough),
               "--out", str(tmp_path / "e.wav")])
    assert rc == EXIT_IO


def test_enhance_corrupt_checkpoint(synth_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    rc = main(["enhance", "--in", str(synth_dir / "noisy" / "00000.wav"), "--ckpt", str(bad),
               "--out", str(tmp_path / "e.wav")])
    assert rc == EXIT_IO


def test_bench(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--sweep", "256:2048", "--out", str(out), "--no-time"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["T"] == [256, 512, 1024, 2048]
    assert summary["mamba_exponent"] == pytest.approx(1.0, abs=1e-9)
    assert len(out.read_text().splitlines()) == 5


def test_bench_bad_sweep(tmp_path):
    assert main(["bench", "--sweep", "abc", "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE
    assert main(["bench", "--sweep", "512:256", "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE


def test_flops(capsys):
    assert main(["flops", "--model", "basic", "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["total_params"] == 365305
    assert main(["flops", "--model", "advanced", "--frames", "10"]) == EXIT_OK
    assert "total" in capsys.readouterr().out


def test_gradcheck_losses(capsys):
    assert main(["gradcheck", "--module", "losses"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_gradcheck_failure_exit_code(monkeypatch):
    from semamba import checks
    from semamba.autodiff import GradCheckReport
    monkeypatch.setitem(checks.SUITES, "losses", lambda seed: [("bad", GradCheckReport(1.0, 1e-4, 1))])
    assert main(["gradcheck", "--module", "losses"]) == EXIT_NUMERIC


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["enhance", "--in", "x.wav"]) == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "synth" in capsys.readouterr().out
