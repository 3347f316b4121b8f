"""Tests for synthesis, WAV I/O, training and inference."""

import json
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semamba.models import load_checkpoint, restore
from semamba.pipeline import (
    NOISE_TYPES,
    TEST_SNRS,
    TRAIN_SNRS,
    ClippingWarning,
    MixtureSpec,
    SynthesisError,
    TrainConfig,
    TrainingDivergedError,
    WavFormatError,
    enhance,
    enhance_array,
    evaluate,
    heldout_specs,
    load_dir,
    load_synth_config,
    make_noise,
    measured_snr,
    passthrough_checkpoint,
    quantize,
    read_wav,
    sample_batch,
    specs_from_synth_config,
    synth_pair,
    synth_to_dir,
    train,
    train_specs,
    write_wav,
)
from semamba.spectral import PcsTable, istft, stft

TINY_MODEL = {"enc_channels": [2, 2], "enc_freq_strides": [1, 2], "d_model": 4, "n_mamba": 1, "d_state": 2,
              "stft": {"n_fft": 64, "hop": 16, "win_len": 64}}


def _tiny_cfg(**kw):
    base = dict(model="basic", model_config=TINY_MODEL, steps=4, batch_size=2, segment_len=800, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _tiny_data(n=4, seed=0):
    return [synth_pair(s, 0.5) for s in train_specs(n, seed)]


class TestSynthesis:
    @pytest.mark.parametrize("noise", NOISE_TYPES)
    def test_zero_db(self, noise):
        clean, noisy = synth_pair(MixtureSpec(0.0, noise, 3), 1.0)
        ratio = np.mean(clean ** 2) / np.mean((noisy - clean) ** 2)
        assert 10 * np.log10(ratio) == pytest.approx(0.0, abs=0.01)

    @pytest.mark.parametrize("snr", TRAIN_SNRS + TEST_SNRS)
    def test_measured_snr(self, snr):
        clean, noisy = synth_pair(MixtureSpec(snr, "pink", 7), 1.0)
        independent = 10 * np.log10(np.sum(clean ** 2) / np.sum((noisy - clean) ** 2))
        assert independent == pytest.approx(snr, abs=0.01)
        assert measured_snr(clean, noisy) == pytest.approx(snr, abs=0.01)

    def test_same_seed_bitwise(self):
        spec = MixtureSpec(5.0, "babble", 11)
        a, b = synth_pair(spec, 1.0), synth_pair(spec, 1.0)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_different_seeds_differ(self):
        a = synth_pair(MixtureSpec(5.0, "white", 1), 1.0)[0]
        b = synth_pair(MixtureSpec(5.0, "white", 2), 1.0)[0]
        assert not np.array_equal(a, b)

    def test_peak_limited(self):
        clean, noisy = synth_pair(MixtureSpec(0.0, "white", 0), 1.0)
        assert max(np.abs(clean).max(), np.abs(noisy).max()) == pytest.approx(0.95)

    def test_degenerate_generator_raises(self):
        def silent(rng, n, spec, sr):
            return np.zeros(n)
        with pytest.raises(SynthesisError):
            synth_pair(MixtureSpec(0.0), 1.0, generator=silent)

    def test_retry_after_degenerate_draw(self):
        calls = []

        def flaky(rng, n, spec, sr):
            calls.append(1)
            return np.zeros(n) if len(calls) == 1 else rng.standard_normal(n)
        clean, _ = synth_pair(MixtureSpec(0.0), 1.0, generator=flaky)
        assert len(calls) == 2 and np.any(clean != 0)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            MixtureSpec(0.0, noise="traffic")
        with pytest.raises(ValueError):
            MixtureSpec(0.0, f0_low=300, f0_high=100)
        with pytest.raises(ValueError):
            synth_pair(MixtureSpec(0.0), 0.1)

    def test_pink_spectrum_slope(self):
        n = make_noise(np.random.default_rng(0), "pink", 1 << 16, MixtureSpec(0.0))
        p = np.abs(np.fft.rfft(n)) ** 2
        f = np.arange(p.size)
        lo, hi = p[100:200].mean(), p[1000:2000].mean()
        assert 10 * np.log10(lo / hi) == pytest.approx(10.0, abs=1.0)  # -10 dB per decade

    def test_spec_sets(self):
        tr, te = train_specs(8, 0), heldout_specs(8, 0)
        assert [s.snr_db for s in tr[:4]] == list(TRAIN_SNRS)
        assert [s.snr_db for s in te[:4]] == list(TEST_SNRS)
        assert {s.noise for s in tr} <= set(NOISE_TYPES)
        assert train_specs(8, 0) == tr


@settings(max_examples=15, deadline=None)
@given(st.floats(-5.0, 20.0), st.sampled_from(NOISE_TYPES), st.integers(0, 2**32 - 1))
def test_snr_property(snr, noise, seed):
    clean, noisy = synth_pair(MixtureSpec(snr, noise, seed), 0.5)
    assert measured_snr(clean, noisy) == pytest.approx(snr, abs=0.01)


class TestWav:
    def test_roundtrip_quantization(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000)
        write_wav(tmp_path / "a.wav", x)
        y = read_wav(tmp_path / "a.wav")
        assert np.max(np.abs(x - y)) <= 0.5 / 32768 + 1e-12

    def test_clipped_fraction(self):
        _, frac = quantize(np.array([0.0, 2.0, -2.0, 0.5]))
        assert frac == 0.5

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "s.wav"
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(16000)
            fh.writeframes(b"\0" * 400)
        with pytest.raises(WavFormatError):
            read_wav(path)

    def test_rejects_sample_rate(self, tmp_path):
        write_wav(tmp_path / "r.wav", np.zeros(100), sample_rate=8000)
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "r.wav")

    def test_rejects_non_wav(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"not a wav file at all")
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "x.wav")

    def test_synth_dir(self, tmp_path):
        specs = train_specs(3, 0)
        out = synth_to_dir(specs, 0.5, tmp_path / "d")
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["items"]) == 3
        pairs = load_dir(out)
        clean, noisy = synth_pair(specs[1], 0.5)
        np.testing.assert_allclose(pairs[1][0], clean, atol=1 / 32768)

    def test_synth_config(self, tmp_path):
        path = tmp_path / "s.toml"
        path.write_text('[synth]\nn = 6\nsplit = "test"\nnoises = ["white"]\n')
        specs = specs_from_synth_config(load_synth_config(path), seed=3)
        assert len(specs) == 6 and {s.noise for s in specs} == {"white"}
        assert {s.snr_db for s in specs} <= set(TEST_SNRS)
        path.write_text("[synth]\nbogus = 1\n")
        with pytest.raises(ValueError):
            load_synth_config(path)
        with pytest.raises(ValueError):
            specs_from_synth_config({"split": "dev"})


class TestTrainConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(steps=100)
        assert [cfg.lr_at(s) for s in (0, 29, 30, 60, 90)] == [5e-4, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5]

    @pytest.mark.parametrize("kw", [dict(model="rnn"), dict(steps=0), dict(batch_size=0), dict(lr=-1.0),
                                    dict(lr_halve_every=0.0), dict(segment_len=10),
                                    dict(loss_weights={"w_gan": 1.0})])
    def test_invalid(self, kw):
        with pytest.raises((ValueError, NotImplementedError)):
            TrainConfig(**kw)

    def test_from_toml(self, tmp_path):
        path = tmp_path / "t.toml"
        path.write_text('[train]\nmodel = "advanced"\nsteps = 5\n[model]\nchannels = 4\n'
                        '[model.stft]\nn_fft = 64\nhop = 16\nwin_len = 64\n[loss]\nw_time = 0.5\n')
        cfg = TrainConfig.from_toml(path)
        assert cfg.steps == 5 and cfg.build_model_config().channels == 4
        assert cfg.weights().w_time == 0.5
        path.write_text("[trian]\nsteps = 5\n")
        with pytest.raises(ValueError):
            TrainConfig.from_toml(path)

    def test_shipped_toy_config(self):
        from pathlib import Path
        cfg = TrainConfig.from_toml(Path(__file__).parent.parent / "configs" / "toy_basic.toml")
        assert cfg.steps == 2000 and cfg.build_model_config().causal


class TestTraining:
    def test_batches_deterministic(self):
        pairs = _tiny_data()
        cfg = _tiny_cfg()
        a, b = sample_batch(pairs, 3, cfg), sample_batch(pairs, 3, cfg)
        assert a[2] == b[2] and a[0].tobytes() == b[0].tobytes()
        assert a[0].shape == (2, 800)

    def test_zero_lr_keeps_params(self):
        data = _tiny_data()
        start = train(_tiny_cfg(lr=0.0), data, stop_at=0).checkpoint
        end = train(_tiny_cfg(lr=0.0), data).checkpoint
        for k in start.params:
            assert start.params[k].tobytes() == end.params[k].tobytes()

    def test_log_entries(self, tmp_path):
        log_path = tmp_path / "log.jsonl"
        res = train(_tiny_cfg(), _tiny_data(), log_path=log_path)
        lines = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert [e["step"] for e in lines] == [1, 2, 3, 4]
        assert lines == res.log
        assert {"loss", "grad_norm", "lr", "mag_mae"} <= set(lines[0])

    def test_resume_bitwise(self, tmp_path):
        data = _tiny_data()
        cfg = _tiny_cfg(steps=6, checkpoint_every=3)
        fresh = train(cfg, data).checkpoint
        path = tmp_path / "k.ckpt"
        train(cfg, data, checkpoint_path=path, stop_at=3)
        resumed = train(cfg, data, resume=load_checkpoint(path)).checkpoint
        assert resumed.metadata["step"] == 6
        for k in fresh.params:
            assert fresh.params[k].tobytes() == resumed.params[k].tobytes()

    def test_resume_kind_mismatch(self):
        ckpt = passthrough_checkpoint("advanced")
        with pytest.raises(ValueError):
            train(_tiny_cfg(), _tiny_data(), resume=ckpt)

    def test_resume_needs_optimizer_state(self):
        ckpt = passthrough_checkpoint("basic")
        cfg = _tiny_cfg(model_config={})
        with pytest.raises(ValueError):
            train(cfg, _tiny_data(), resume=ckpt)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_dumps_batch(self, tmp_path):
        with pytest.raises(TrainingDivergedError, match=r"step \d+") as info:
            train(_tiny_cfg(lr=1e200, steps=20), _tiny_data(), dump_dir=tmp_path)
        dumps = list(tmp_path.glob("diverged_step*.json"))
        assert len(dumps) == 1
        record = json.loads(dumps[0].read_text())
        assert f"step {record['step']}" in str(info.value)
        assert record["batch_seed"] == [0, record["step"]]

    def test_advanced_step_runs(self):
        cfg = TrainConfig(model="advanced", steps=1, batch_size=1, segment_len=400,
                          model_config={"channels": 2, "dense_dilations": [1], "n_tf_blocks": 1, "d_state": 2,
                                        "stft": {"n_fft": 64, "hop": 16, "win_len": 64}})
        res = train(cfg, _tiny_data(2))
        assert set(res.log[0]) >= {"time", "mag", "complex", "phase", "consistency"}

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        cfg = _tiny_cfg(steps=200, seed=seed, batch_size=4, lr=2e-3)
        log = train(cfg, _tiny_data(8, seed)).log
        first = np.mean([e["loss"] for e in log[:20]])
        last = np.mean([e["loss"] for e in log[-20:]])
        assert last < first


class TestInference:
    def test_passthrough_file(self, tmp_path):
        ckpt_path = tmp_path / "p.ckpt"
        from semamba.models import save_checkpoint
        save_checkpoint(passthrough_checkpoint("basic"), ckpt_path)
        _, noisy = synth_pair(MixtureSpec(5.0, "white", 0), 1.0)
        write_wav(tmp_path / "in.wav", noisy)
        x = read_wav(tmp_path / "in.wav")
        enhance(tmp_path / "in.wav", ckpt_path, tmp_path / "out.wav")
        y = read_wav(tmp_path / "out.wav")
        assert y.shape == x.shape
        assert np.max(np.abs(y - x)) <= 1 / 32768 + 1e-12

    def test_pcs_identity_noop(self):
        x = np.random.default_rng(0).standard_normal(1600) * 0.1
        ckpt = passthrough_checkpoint("basic")
        a = enhance_array(x, ckpt)
        b = enhance_array(x, ckpt, PcsTable.identity())
        assert a.tobytes() == b.tobytes()

    def test_clipping_warning(self, tmp_path):
        from semamba.models import save_checkpoint
        save_checkpoint(passthrough_checkpoint("basic"), tmp_path / "p.ckpt")
        write_wav(tmp_path / "in.wav", np.full(1600, 0.99) * np.sign(np.sin(np.arange(1600) / 5.0)))
        with pytest.warns(ClippingWarning):
            enhance(tmp_path / "in.wav", tmp_path / "p.ckpt", tmp_path / "out.wav",
                    pcs=PcsTable(((0.0, 8000.0, 3.0),)))

    def test_evaluate(self, tmp_path):
        clean, noisy = synth_pair(MixtureSpec(5.0, "white", 0), 1.0)
        write_wav(tmp_path / "c.wav", clean)
        write_wav(tmp_path / "n.wav", noisy)
        scores = evaluate(tmp_path / "c.wav", tmp_path / "n.wav")
        assert scores["si_sdr"] == pytest.approx(5.0, abs=0.1)
        assert 0 < scores["stoi"] < 1

    def test_evaluate_length_mismatch(self, tmp_path):
        write_wav(tmp_path / "a.wav", np.zeros(16000))
        write_wav(tmp_path / "b.wav", np.zeros(16001))
        with pytest.raises(ValueError):
            evaluate(tmp_path / "a.wav", tmp_path / "b.wav")

    def test_advanced_passthrough_restores(self):
        kind, cfg, _ = restore(passthrough_checkpoint("advanced"))
        assert kind == "advanced" and cfg.mask_beta == 2.0
