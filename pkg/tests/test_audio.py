"""Tests for waveform types, WAV I/O, resampling, STFT, and quality metrics.

Expected values for the non-trivial cases are produced by independent oracles
kept in this file: a brute-force two-loop LSD reference, an FFT probe for
resampler purity, and the published reference tone for the loudness meter
(997 Hz full-scale sine reads -3.01 LU on a single channel).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecraid import audio
from codecraid.audio import Waveform


def _rng(seed=0):
    return np.random.default_rng(seed)


def make_wave(samples, rate=24000):
    return Waveform(np.asarray(samples, dtype=np.float64), rate)


def noise_wave(n, rate=24000, seed=0, amp=0.3):
    return Waveform(amp * _rng(seed).standard_normal(n), rate)


# ---------------------------------------------------------------------------
# Waveform type
# ---------------------------------------------------------------------------

def test_waveform_rejects_empty():
    with pytest.raises(ValueError):
        Waveform(np.zeros(0), 24000)


def test_waveform_rejects_nonfinite():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 24000)


def test_waveform_rejects_bad_rate():
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)


def test_waveform_rejects_2d():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)), 24000)


def test_waveform_duration():
    w = noise_wave(12000, rate=24000)
    assert w.duration_s == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def test_load_wav_scaling(tmp_path):
    import struct
    import wave as wavemod

    path = tmp_path / "three.wav"
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(24000)
        fh.writeframes(struct.pack("<3h", 0, 16384, -32768))
    w = audio.load_wav(path)
    assert w.sample_rate_hz == 24000
    np.testing.assert_allclose(w.samples, [0.0, 0.5, -1.0])


def test_save_wav_clamps(tmp_path):
    import wave as wavemod

    path = tmp_path / "clamp.wav"
    audio.save_wav(make_wave([2.0, 0.0, -2.0]), path)
    with wavemod.open(str(path), "rb") as fh:
        raw = np.frombuffer(fh.readframes(3), dtype=np.int16)
    assert list(raw) == [32767, 0, -32768]


def test_load_wav_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        audio.load_wav(tmp_path / "nope.wav")


def test_load_wav_rejects_stereo(tmp_path):
    import wave as wavemod

    path = tmp_path / "stereo.wav"
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(24000)
        fh.writeframes(np.zeros(20, dtype=np.int16).tobytes())
    with pytest.raises(ValueError, match="multichannel"):
        audio.load_wav(path)


def test_load_wav_rejects_8bit(tmp_path):
    import wave as wavemod

    path = tmp_path / "eight.wav"
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(24000)
        fh.writeframes(bytes(16))
    with pytest.raises(ValueError, match="16-bit"):
        audio.load_wav(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_wav_roundtrip_quantization_bound(seed):
    import tempfile

    x = _rng(seed).uniform(-1.0, 1.0, size=256)
    with tempfile.TemporaryDirectory() as td:
        path = td + "/rt.wav"
        audio.save_wav(Waveform(x, 16000), path)
        y = audio.load_wav(path)
    assert y.sample_rate_hz == 16000
    assert np.max(np.abs(y.samples - x)) <= 1.0 / 32768 + 1e-12


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_resample_identity_bitexact():
    w = noise_wave(4096)
    out = audio.resample(w, 24000)
    assert out.sample_rate_hz == 24000
    np.testing.assert_array_equal(out.samples, w.samples)


def test_resample_length_arithmetic():
    w = noise_wave(24000, rate=24000)
    out = audio.resample(w, 16000)
    assert abs(len(out.samples) - 16000) <= 1
    assert out.sample_rate_hz == 16000


def test_resample_rejects_bad_rate():
    w = noise_wave(1000)
    with pytest.raises(ValueError):
        audio.resample(w, 0)


def test_resample_sine_purity():
    # FFT oracle: a 1 kHz sine resampled 24k -> 16k keeps its dominant bin at
    # 1 kHz and everything else at least 40 dB down.
    rate, n = 24000, 24000
    t = np.arange(n) / rate
    w = Waveform(np.sin(2 * np.pi * 1000.0 * t), rate)
    out = audio.resample(w, 16000)
    # skip edge transients of the FIR
    seg = out.samples[512:-512]
    spec = np.abs(np.fft.rfft(seg * np.hanning(len(seg))))
    freqs = np.fft.rfftfreq(len(seg), 1.0 / 16000)
    peak = np.argmax(spec)
    assert abs(freqs[peak] - 1000.0) < 5.0
    # mask out the peak neighbourhood, compare the rest against the peak
    mask = np.abs(freqs - freqs[peak]) > 40.0
    sidelobe_db = 20 * np.log10(np.max(spec[mask]) / spec[peak])
    assert sidelobe_db < -40.0


def test_resample_roundtrip_preserves_passband():
    # energy below 0.9 * (16000/2) survives a 24k -> 16k -> 24k round trip
    rate, n = 24000, 32768
    x = 0.2 * _rng(3).standard_normal(n)
    w = Waveform(x, rate)
    back = audio.resample(audio.resample(w, 16000), 24000)
    m = min(len(back.samples), n)
    spec_in = np.abs(np.fft.rfft(w.samples[:m])) ** 2
    spec_out = np.abs(np.fft.rfft(back.samples[:m])) ** 2
    freqs = np.fft.rfftfreq(m, 1.0 / rate)
    band = (freqs > 100) & (freqs < 0.9 * 8000)
    # compare band energy, not per-bin (FIR ripple + edge effects)
    ratio_db = 10 * np.log10(spec_out[band].sum() / spec_in[band].sum())
    assert abs(ratio_db) < 0.5


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def test_stft_shape():
    w = noise_wave(5000)
    spec = audio.stft(w, window_len=1024, hop=256)
    assert spec.frames.shape[0] == 513
    assert spec.window_len == 1024 and spec.hop == 256


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3000, 9000))
def test_stft_roundtrip_interior(seed, n):
    x = _rng(seed).standard_normal(n)
    w = Waveform(x, 24000)
    spec = audio.stft(w, window_len=512, hop=128)
    back = audio.istft(spec, n_samples=n)
    assert len(back.samples) == n
    interior = slice(512, n - 512)
    err = np.sqrt(np.mean((back.samples[interior] - x[interior]) ** 2))
    assert err < 1e-6


def test_istft_default_length_close():
    w = noise_wave(4096)
    spec = audio.stft(w, window_len=512, hop=128)
    back = audio.istft(spec)
    assert abs(len(back.samples) - 4096) <= 128


# ---------------------------------------------------------------------------
# SNR / SI-SDR
# ---------------------------------------------------------------------------

def test_snr_identity_hits_ceiling():
    w = noise_wave(8000)
    assert audio.snr_db(w, w) == 100.0


def test_snr_zero_test_is_zero_db():
    w = noise_wave(8000)
    z = Waveform(np.zeros_like(w.samples), w.sample_rate_hz)
    assert audio.snr_db(w, z) == pytest.approx(0.0, abs=1e-9)


def test_snr_orthogonal_sine_closed_form():
    # unit sine plus 0.1-amplitude orthogonal sine: SNR = 10 log10(0.5/0.005) = 20
    rate, n = 24000, 24000
    t = np.arange(n) / rate
    ref = np.sin(2 * np.pi * 1000.0 * t)
    noise = 0.1 * np.sin(2 * np.pi * 2000.0 * t)
    got = audio.snr_db(Waveform(ref, rate), Waveform(ref + noise, rate))
    assert got == pytest.approx(20.0, abs=0.01)


def test_snr_trims_small_mismatch():
    w = noise_wave(10000)
    shorter = Waveform(w.samples[:9950], w.sample_rate_hz)
    with pytest.warns(UserWarning):
        val = audio.snr_db(w, shorter)
    assert val == 100.0


def test_snr_rejects_large_mismatch():
    w = noise_wave(10000)
    short = Waveform(w.samples[:8000], w.sample_rate_hz)
    with pytest.raises(ValueError):
        audio.snr_db(w, short)


def test_snr_rejects_rate_mismatch():
    w = noise_wave(8000, rate=24000)
    v = Waveform(w.samples.copy(), 16000)
    with pytest.raises(ValueError):
        audio.snr_db(w, v)


def test_snr_delta_matches_snr_for_identity_roundtrip():
    clean = noise_wave(8000, seed=1)
    adv = Waveform(clean.samples + 0.01 * _rng(2).standard_normal(8000), 24000)
    assert audio.snr_delta_db(clean, adv) == audio.snr_db(clean, adv)


def test_si_sdr_scale_invariance():
    w = noise_wave(8000)
    half = Waveform(0.5 * w.samples, w.sample_rate_hz)
    assert audio.si_sdr_db(w, half) == 100.0


def test_si_sdr_sign_flip():
    w = noise_wave(8000)
    neg = Waveform(-w.samples, w.sample_rate_hz)
    assert audio.si_sdr_db(w, neg) == 100.0


def test_si_sdr_orthogonal_equal_energy():
    rate, n = 24000, 24000
    t = np.arange(n) / rate
    x = np.sin(2 * np.pi * 500.0 * t)
    nse = np.sin(2 * np.pi * 1500.0 * t)  # orthogonal, equal energy
    got = audio.si_sdr_db(Waveform(x, rate), Waveform(x + nse, rate))
    assert got == pytest.approx(0.0, abs=0.01)


def test_si_sdr_rejects_zero_reference():
    z = Waveform(np.zeros(4000) + 0.25, 24000)  # constant -> zero after mean removal
    w = noise_wave(4000)
    with pytest.raises(ValueError):
        audio.si_sdr_db(z, w)


# ---------------------------------------------------------------------------
# LSD
# ---------------------------------------------------------------------------

def _lsd_reference(x, y, rate, window_len=1024, hop=256, floor=1e-8):
    """Brute-force two-loop LSD used as an independent oracle."""
    win = np.hanning(window_len + 1)[:-1]
    n_frames = 1 + (len(x) - window_len) // hop
    frame_vals = []
    for f in range(n_frames):
        seg_x = x[f * hop:f * hop + window_len] * win
        seg_y = y[f * hop:f * hop + window_len] * win
        sx = np.maximum(np.abs(np.fft.rfft(seg_x)), floor)
        sy = np.maximum(np.abs(np.fft.rfft(seg_y)), floor)
        acc = 0.0
        for b in range(len(sx)):
            d = 20.0 * (math.log10(sx[b]) - math.log10(sy[b]))
            acc += d * d
        frame_vals.append(acc / len(sx))
    return math.sqrt(sum(frame_vals) / len(frame_vals))


def test_lsd_identity_zero():
    w = noise_wave(6000)
    assert audio.lsd_db(w, w) == 0.0


def test_lsd_uniform_gain_twenty_db():
    w = noise_wave(8192, seed=5, amp=0.3)
    ten = Waveform(10.0 * w.samples, w.sample_rate_hz)
    assert audio.lsd_db(w, ten) == pytest.approx(20.0, abs=1e-6)


def test_lsd_matches_two_loop_reference():
    rng = _rng(7)
    x = 0.25 * rng.standard_normal(8192)
    y = x + 0.05 * rng.standard_normal(8192)
    got = audio.lsd_db(Waveform(x, 24000), Waveform(y, 24000))
    want = _lsd_reference(x, y, 24000)
    assert got == pytest.approx(want, rel=1e-6)


def test_lsd_rejects_short_signal():
    w = noise_wave(512)
    with pytest.raises(ValueError):
        audio.lsd_db(w, w)


# ---------------------------------------------------------------------------
# Loudness
# ---------------------------------------------------------------------------

def _sine(freq, rate, dur_s, amp):
    t = np.arange(int(rate * dur_s)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def test_lufs_reference_tone():
    # published anchor: a full-scale 997 Hz sine on one channel reads -3.01
    for rate in (48000, 24000, 16000):
        w = Waveform(_sine(997.0, rate, 2.0, 1.0), rate)
        assert audio.lufs(w) == pytest.approx(-3.01, abs=0.1)


def test_lufs_minus_23_calibration():
    # amplitude such that the meter should read -23 LUFS: 20 log10 a - 3.01 = -23
    amp = 10 ** ((-23.0 + 3.01) / 20.0)
    w = Waveform(_sine(997.0, 48000, 2.0, amp), 48000)
    assert audio.lufs(w) == pytest.approx(-23.0, abs=0.1)


def test_delta_lufs_identity():
    w = noise_wave(24000, seed=11)
    assert audio.delta_lufs(w, w) == 0.0


def test_delta_lufs_gain_doubling():
    w = noise_wave(24000, seed=12, amp=0.2)
    two = Waveform(2.0 * w.samples, w.sample_rate_hz)
    assert audio.delta_lufs(two, w) == pytest.approx(6.02, abs=0.1)


def test_lufs_rejects_short_input():
    w = noise_wave(4000, rate=24000)  # 167 ms
    with pytest.raises(ValueError):
        audio.lufs(w)


def test_lufs_silence_hits_floor():
    w = Waveform(np.zeros(24000), 24000)
    assert audio.lufs(w) == -100.0


# ---------------------------------------------------------------------------
# Quality report
# ---------------------------------------------------------------------------

def test_quality_report_fields_finite():
    clean = noise_wave(24000, seed=20, amp=0.3)
    rt = Waveform(clean.samples + 0.01 * _rng(21).standard_normal(24000), 24000)
    adv = Waveform(clean.samples + 0.02 * _rng(22).standard_normal(24000), 24000)
    rep = audio.quality_report(clean, rt, adv)
    for name in ("snr_db", "snr_delta_db", "si_sdr_db", "lsd_db", "delta_lufs_db"):
        val = getattr(rep, name)
        assert np.isfinite(val)
        assert -100.0 <= val <= 100.0
    assert rep.lsd_db >= 0.0
