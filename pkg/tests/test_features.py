import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avwhisper.containers import ContainerError, read_features, write_features
from avwhisper.features import (
    FeatureError,
    Waveform,
    audio_frontend,
    cap_length,
    hz_to_mel,
    log_mel,
    log_mel_power,
    mel_center_frequencies,
    mel_filterbank,
    resample,
)


def sine(freq, rate, seconds=1.0, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def test_resample_identity_at_16k():
    w = sine(440, 16000)
    assert resample(w) is w


def test_resample_length_ratio():
    assert len(resample(Waveform(np.zeros(48000), 48000))) == 16000


@pytest.mark.parametrize("rate", [8000, 22050, 44100, 48000])
def test_resample_duration_preserved(rate):
    w = Waveform(np.zeros(rate * 2 + 7), rate)
    out = resample(w)
    assert out.sample_rate == 16000
    assert abs(len(out) - len(w) * 16000 / rate) <= 1


def test_resample_sine_matches_analytic():
    out = resample(sine(1000, 48000))
    t = np.arange(len(out)) / 16000
    expected = 0.5 * np.sin(2 * np.pi * 1000 * t)
    trim = 200
    assert np.max(np.abs(out.samples[trim:-trim] - expected[trim:-trim])) < 1e-3


def test_resample_rejects_unsupported_rate():
    with pytest.raises(FeatureError):
        resample(Waveform(np.zeros(100), 11025))


@pytest.mark.parametrize("n,expected", [(320_001, 320_000), (100, 100), (0, 0)])
def test_cap_length(n, expected):
    assert len(cap_length(Waveform(np.zeros(n), 16000))) == expected


def test_silence_maps_to_minus_one():
    m = log_mel(Waveform(np.zeros(16000), 16000))
    assert m.frames.shape == (100, 80)
    assert np.all(m.frames == -1.0)


def test_one_second_has_100_frames():
    assert log_mel(sine(300, 16000)).time == 100


def test_sine_peaks_at_nearest_mel_center():
    m = log_mel(sine(440, 16000))
    centers = mel_center_frequencies(80)
    assert int(np.argmax(m.frames.mean(axis=0))) == int(np.argmin(np.abs(centers - 440)))


def test_mel_centers_follow_htk_formula():
    centers = mel_center_frequencies(80)
    steps = np.diff(hz_to_mel(np.concatenate([[0.0], centers, [8000.0]])))
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
    fb = mel_filterbank(80)
    assert fb.shape == (80, 201) and fb.max() <= 1.0 + 1e-12


def test_normalized_range():
    rng = np.random.default_rng(0)
    m = log_mel(Waveform(rng.standard_normal(8000) * np.linspace(0, 1, 8000), 16000))
    assert m.frames.min() >= -1.0 and m.frames.max() == pytest.approx(1.0)


def test_n_mels_configurable():
    assert log_mel(sine(440, 16000), n_mels=128).n_mels == 128


def test_empty_input_rejected():
    with pytest.raises(FeatureError):
        log_mel(Waveform(np.zeros(0), 16000))


@settings(max_examples=40, deadline=None)
@given(st.integers(160, 320_000))
def test_frame_count_formula(n):
    w = Waveform(np.random.default_rng(n).standard_normal(n) * 0.1, 16000)
    assert log_mel_power(w).shape == (n // 160, 80)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_doubling_amplitude_never_lowers_log_mel(seed):
    x = np.random.default_rng(seed).standard_normal(4000) * 0.05
    a = log_mel_power(Waveform(x, 16000))
    b = log_mel_power(Waveform(2 * x, 16000))
    assert np.all(b >= a)


def test_deterministic():
    w = sine(523, 16000)
    a, b = log_mel(w), log_mel(Waveform(w.samples.copy(), 16000))
    assert a.frames.tobytes() == b.frames.tobytes()


def test_frontend_caps_long_audio():
    w = Waveform(np.zeros(48000 * 21), 48000)
    assert audio_frontend(w).time == 2000


def test_feature_blob_round_trip(tmp_path):
    feats = log_mel(sine(700, 16000)).frames
    write_features(tmp_path / "u.mel", feats)
    np.testing.assert_array_equal(read_features(tmp_path / "u.mel"), feats)
    raw = bytearray((tmp_path / "u.mel").read_bytes())
    assert raw[:4] == b"LMEL"
    assert int.from_bytes(raw[8:12], "little") == 100 and int.from_bytes(raw[12:16], "little") == 80
    raw[20] ^= 0xFF
    (tmp_path / "u.mel").write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="checksum"):
        read_features(tmp_path / "u.mel")
