import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from conftest import sine
from oracles import analytic_continuous_gain_db, analytic_discrete_gain_db, measure_gain_db, prewarp
from rhythmlab.audio_features import (
    FRAME_LENGTH,
    FRAME_RATE,
    AudioError,
    AudioSignal,
    FeatureConfig,
    FeatureSequence,
    FilterSpec,
    apply_preemphasis,
    decode_audio,
    detect_voicing,
    export_features_csv,
    extract_features,
    frame_spl,
    normalize_amplitude,
    read_features,
    write_features,
)


def _preemph(x):
    return apply_preemphasis(AudioSignal(x, 16000)).samples


class TestAudioSignal:
    def test_rejects_non_finite(self):
        with pytest.raises(AudioError):
            AudioSignal(np.array([0.0, np.nan]), 16000)

    def test_rejects_2d(self):
        with pytest.raises(AudioError):
            AudioSignal(np.zeros((4, 2)), 16000)


class TestDecode:
    def test_silence_16bit(self, tmp_path):
        path = tmp_path / "s.wav"
        wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
        sig = decode_audio(path)
        assert len(sig) == 16000
        assert np.all(sig.samples == 0)

    def test_stereo_channels_cancel(self, tmp_path):
        path = tmp_path / "st.wav"
        data = np.empty((800, 2), dtype=np.float32)
        data[:, 0], data[:, 1] = 0.5, -0.5
        wavfile.write(path, 16000, data)
        np.testing.assert_array_equal(decode_audio(path).samples, np.zeros(800))

    @pytest.mark.parametrize("dtype,scale", [(np.uint8, None), (np.int16, 32767), (np.int32, 2**31 - 1)])
    def test_pcm_depths_scale_to_unit_range(self, tmp_path, dtype, scale):
        path = tmp_path / "d.wav"
        t = np.arange(1600) / 16000
        x = 0.5 * np.sin(2 * np.pi * 440 * t)
        if dtype is np.uint8:
            pcm = np.round(x * 127 + 128).astype(np.uint8)
        else:
            pcm = np.round(x * scale).astype(dtype)
        wavfile.write(path, 16000, pcm)
        out = decode_audio(path).samples
        np.testing.assert_allclose(out, x, atol=1.0 / 100)

    def test_24bit_pcm(self, tmp_path):
        # hand-written 24-bit little-endian WAV
        values = np.array([0, 2**22, -(2**22), 2**23 - 1], dtype=np.int64)
        payload = b"".join(int(v).to_bytes(3, "little", signed=True) for v in values)
        header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 16000 * 3, 3, 24)
        path = tmp_path / "p24.wav"
        path.write_bytes(header + fmt + b"data" + struct.pack("<I", len(payload)) + payload)
        np.testing.assert_allclose(decode_audio(path).samples, [0.0, 0.5, -0.5, (2**23 - 1) / 2**23], atol=1e-9)

    def test_wrong_rate_without_flag(self, tmp_path):
        path = tmp_path / "r.wav"
        wavfile.write(path, 44100, np.zeros(441, dtype=np.int16))
        with pytest.raises(AudioError, match="44100"):
            decode_audio(path)

    def test_resample_length_and_frequency(self, tmp_path):
        n = 44100
        t = np.arange(n) / 44100
        path = tmp_path / "r.wav"
        wavfile.write(path, 44100, (0.5 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32))
        sig = decode_audio(path, resample_to_16k=True)
        assert len(sig) == round(n * 16000 / 44100)
        spectrum = np.abs(np.fft.rfft(sig.samples * np.hanning(len(sig))))
        peak_hz = np.argmax(spectrum) * 16000 / len(sig)
        assert abs(peak_hz - 1000) < 2

    def test_missing_and_garbage(self, tmp_path):
        with pytest.raises(AudioError, match="not found"):
            decode_audio(tmp_path / "nope.wav")
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"this is not audio")
        with pytest.raises(AudioError):
            decode_audio(bad)


class TestNormalize:
    def test_unit_sine_scale(self):
        x = sine(250, amplitude=1.0)
        y = normalize_amplitude(x)
        ratio = np.max(np.abs(y.samples)) / np.max(np.abs(x.samples))
        assert ratio == pytest.approx(0.1 / math.sqrt(0.5), rel=1e-9)
        assert np.sqrt(np.mean(y.samples**2)) == pytest.approx(0.1, rel=1e-12)

    def test_fixed_point(self):
        x = normalize_amplitude(sine(250, amplitude=0.3))
        np.testing.assert_allclose(normalize_amplitude(x).samples, x.samples, rtol=1e-9, atol=0)

    def test_silence_passes(self):
        z = AudioSignal(np.zeros(1000), 16000)
        np.testing.assert_array_equal(normalize_amplitude(z).samples, 0.0)


class TestFilter:
    def test_coefficients_match_definition(self):
        f = FilterSpec()
        assert f.omega_a == pytest.approx(2 * math.pi * 200)
        assert f.omega_b == pytest.approx(2 * math.pi * 5000)
        assert f.A == pytest.approx(2 * 16000 / f.omega_a)
        assert f.A > f.B > 0

    def test_invalid_corner_order(self):
        with pytest.raises(ValueError):
            FilterSpec(f_a=5000, f_b=200)

    def test_100hz_gain(self):
        assert measure_gain_db(_preemph, 100) == pytest.approx(0.97, abs=0.3)

    def test_3khz_gain_is_warped_continuous_response(self):
        measured = measure_gain_db(_preemph, 3000)
        # the discrete shelf equals the analog prototype at the prewarped frequency
        assert measured == pytest.approx(analytic_continuous_gain_db(prewarp(3000)), abs=0.05)
        assert measured == pytest.approx(analytic_discrete_gain_db(3000), abs=0.05)
        # bilinear warping alone accounts for the offset from the unwarped curve
        assert 0.5 < measured - analytic_continuous_gain_db(3000) < 1.0

    def test_high_band_gain(self):
        assert 20 * math.log10(5000 / 200) == pytest.approx(27.96, abs=0.01)
        for f in (2000, 4000, 7900):
            assert 17 <= measure_gain_db(_preemph, f) <= 28

    def test_response_method_matches_oracle(self):
        freqs = np.geomspace(50, 7000, 10)
        ours = 20 * np.log10(np.abs(FilterSpec().response(freqs)))
        np.testing.assert_allclose(ours, [analytic_discrete_gain_db(f) for f in freqs], atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2**31))
    def test_linearity(self, a, seed):
        x = np.random.default_rng(seed).standard_normal(2048)
        np.testing.assert_allclose(_preemph(a * x), a * _preemph(x), rtol=1e-9, atol=1e-12 * abs(a))


class TestFrameSpl:
    def test_full_scale_sine(self):
        np.testing.assert_allclose(frame_spl(sine(250, amplitude=1.0)), 10 * math.log10(0.5), atol=1e-9)

    def test_silence_floor(self):
        np.testing.assert_allclose(frame_spl(np.zeros(2048)), -100.0)

    def test_framing(self):
        assert len(frame_spl(np.ones(1024))) == 2
        assert len(frame_spl(np.ones(1535))) == 2

    def test_too_short(self):
        with pytest.raises(AudioError):
            frame_spl(np.ones(511))


class TestVoicing:
    def test_pure_200hz(self):
        voiced, f0 = detect_voicing(normalize_amplitude(sine(200, seconds=2.0)))
        assert np.all(voiced == 1)
        np.testing.assert_allclose(f0, 200, atol=3)

    @pytest.mark.parametrize("freq", [90, 120, 160, 300, 440])
    def test_f0_range(self, freq):
        voiced, f0 = detect_voicing(sine(freq, seconds=1.0, amplitude=0.1))
        assert voiced.mean() == 1.0
        np.testing.assert_allclose(np.median(f0), freq, rtol=0.03)

    def test_white_noise_mostly_unvoiced(self):
        rng = np.random.default_rng(0)
        fractions = [detect_voicing(0.1 * rng.standard_normal(16000))[0].mean() for _ in range(100)]
        assert np.mean(fractions) < 0.05

    def test_silence(self):
        voiced, f0 = detect_voicing(np.zeros(16000))
        assert not voiced.any()
        assert not f0.any()

    def test_energy_gate(self):
        loud = sine(200, seconds=0.5, amplitude=0.5).samples
        quiet = sine(200, seconds=0.5, amplitude=0.5 * 10 ** (-50 / 20)).samples
        voiced, _ = detect_voicing(np.concatenate([loud, quiet]))
        n = len(loud) // FRAME_LENGTH
        assert voiced[:n].all()
        assert not voiced[n + 1 :].any()


class TestExtract:
    def test_silence(self):
        feats = extract_features(AudioSignal(np.zeros(16000), 16000))
        np.testing.assert_array_equal(feats.frames, 0.0)
        np.testing.assert_array_equal(feats.deltas, 0.0)

    def test_reference_sine_level(self):
        feats = extract_features(sine(250, amplitude=0.1))
        np.testing.assert_allclose(feats.frames[:, 0], 0.75, atol=1e-9)
        assert feats.frame_rate == FRAME_RATE == 31.25

    @settings(max_examples=25, deadline=None)
    @given(st.integers(512, 12000), st.integers(0, 2**31))
    def test_invariants(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n) * rng.uniform(0, 1, n) ** 4
        feats = extract_features(AudioSignal(x, 16000))
        assert len(feats) == n // 512
        assert np.all((feats.frames[:, :2] >= 0) & (feats.frames[:, :2] <= 1))
        assert set(np.unique(feats.frames[:, 2])) <= {0.0, 1.0}
        np.testing.assert_array_equal(feats.deltas[0], 0.0)
        np.testing.assert_array_equal(feats.deltas[1:], np.diff(feats.frames, axis=0))

    def test_deterministic(self, rng):
        x = AudioSignal(rng.standard_normal(20000), 16000)
        a, b = extract_features(x), extract_features(AudioSignal(x.samples.copy(), 16000))
        assert a.stacked(np.float64).tobytes() == b.stacked(np.float64).tobytes()

    def test_splh_exceeds_spl_for_bright_signal(self):
        feats = extract_features(sine(3000, amplitude=0.1))
        assert np.all(feats.frames[5:, 1] > feats.frames[5:, 0])

    def test_f0_channel(self):
        feats = extract_features(sine(200, amplitude=0.1), FeatureConfig(include_f0=True))
        np.testing.assert_allclose(feats.f0, 200, atol=3)


class TestFeatureFiles:
    def test_round_trip(self, tmp_path, rng):
        seq = FeatureSequence.from_frames(rng.random((50, 3)).astype(np.float32), f0=rng.random(50).astype(np.float32))
        write_features(tmp_path / "f.rfe", seq)
        back = read_features(tmp_path / "f.rfe")
        np.testing.assert_array_equal(back.frames, seq.frames)
        np.testing.assert_array_equal(back.deltas, seq.deltas)
        np.testing.assert_array_equal(back.f0, seq.f0)

    def test_layout(self, tmp_path):
        seq = FeatureSequence.from_frames(np.full((2, 3), 0.5, dtype=np.float32))
        write_features(tmp_path / "f.rfe", seq)
        raw = (tmp_path / "f.rfe").read_bytes()
        assert raw[:4] == b"RFE1"
        assert struct.unpack("<II", raw[4:12]) == (2, 6)
        assert len(raw) == 12 + 2 * 6 * 4

    def test_bad_magic_and_truncation(self, tmp_path):
        seq = FeatureSequence.from_frames(np.zeros((3, 3), dtype=np.float32))
        write_features(tmp_path / "f.rfe", seq)
        raw = (tmp_path / "f.rfe").read_bytes()
        (tmp_path / "t.rfe").write_bytes(raw[:-4])
        with pytest.raises(AudioError, match="expected"):
            read_features(tmp_path / "t.rfe")
        (tmp_path / "m.rfe").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(AudioError, match="RFE1"):
            read_features(tmp_path / "m.rfe")

    def test_csv_export(self, tmp_path):
        seq = FeatureSequence.from_frames(np.array([[0.0, 0.5, 1.0], [0.25, 0.5, 0.0]]))
        export_features_csv(tmp_path / "f.csv", seq)
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "frame,time,spl,splh,voiced,d_spl,d_splh,d_voiced"
        assert lines[2].split(",")[2:] == ["0.25", "0.5", "0", "0.25", "0", "-1"]
