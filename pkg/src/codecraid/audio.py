"""Audio substrate: waveform and spectrogram types, WAV I/O, resampling,
and the distortion/quality metrics used by every other module.

All functions are pure and operate on immutable values, so they are safe to
call from any number of concurrent workers. Waveforms are mono float64 in
nominal [-1, 1]; values may exceed the nominal range during processing and
are only clamped when exported to 16-bit PCM.
"""

from __future__ import annotations

import math
import warnings
import wave
from dataclasses import dataclass
from math import gcd, pi, tan

import numpy as np
from scipy import signal as sps

DB_CLAMP = 100.0        # log-ratio metrics are clamped to [-100, +100] dB
LSD_WINDOW = 1024
LSD_HOP = 256
LSD_MAG_FLOOR = 1e-8
LUFS_BLOCK_S = 0.4      # gating block length
LUFS_STEP_S = 0.1       # 75% overlap
LUFS_ABS_GATE = -70.0   # absolute gate only; the relative gate is skipped
TRIM_TOLERANCE = 0.01   # length mismatch above 1% is an error


@dataclass
class Waveform:
    """Mono audio buffer with its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be 1-D mono, got shape %r" % (self.samples.shape,))
        if self.samples.size == 0:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if not isinstance(self.sample_rate_hz, (int, np.integer)) or self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be a positive integer")
        self.sample_rate_hz = int(self.sample_rate_hz)

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def copy(self) -> "Waveform":
        return Waveform(self.samples.copy(), self.sample_rate_hz)


@dataclass
class Spectrogram:
    """Complex STFT frames, (bins x frames), bins = window_len // 2 + 1."""

    frames: np.ndarray
    window_len: int
    hop: int
    sample_rate_hz: int

    def __post_init__(self):
        if self.frames.shape[0] != self.window_len // 2 + 1:
            raise ValueError("bin count does not match window length")


@dataclass
class AudioQualityReport:
    """Distortion summary for one adversarial example, all fields in dB."""

    snr_db: float
    snr_delta_db: float
    si_sdr_db: float
    lsd_db: float
    delta_lufs_db: float

    def as_dict(self) -> dict:
        return {
            "snr_db": self.snr_db,
            "snr_delta_db": self.snr_delta_db,
            "si_sdr_db": self.si_sdr_db,
            "lsd_db": self.lsd_db,
            "delta_lufs_db": self.delta_lufs_db,
        }


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, 16-bit PCM little-endian, mono)
# ---------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling int16 to [-1, 1] by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise ValueError("multichannel input: %d channels" % fh.getnchannels())
            if fh.getsampwidth() != 2:
                raise ValueError("unsupported encoding: only 16-bit PCM is supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError("unsupported encoding: %s" % exc) from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(w: Waveform, path) -> None:
    """Write a waveform as mono 16-bit PCM, clamping samples to [-1, 1] first."""
    clamped = np.clip(w.samples, -1.0, 1.0)
    quantized = np.clip(np.round(clamped * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(quantized.tobytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def design_resample_kernel(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.0) -> np.ndarray:
    """Linear-phase windowed-sinc low-pass for polyphase rate conversion.

    The kernel lives at the upsampled rate. Length is one short of
    taps_per_phase * up so the group delay is an integer sample there.
    """
    n_taps = taps_per_phase * up - 1
    m = np.arange(n_taps) - (n_taps - 1) // 2
    fc = 1.0 / (2.0 * max(up, down))  # cycles/sample at the upsampled rate
    return 2.0 * fc * np.sinc(2.0 * fc * m) * np.kaiser(n_taps, beta) * up


def resample(w: Waveform, target_rate_hz: int) -> Waveform:
    """Polyphase windowed-sinc resampling; identity when rates already match."""
    if target_rate_hz <= 0:
        raise ValueError("target rate must be positive")
    src = w.sample_rate_hz
    if target_rate_hz == src:
        return w.copy()
    g = gcd(src, target_rate_hz)
    up, down = target_rate_hz // g, src // g
    h = design_resample_kernel(up, down)
    delay = (len(h) - 1) // 2
    # prepend zeros so the group delay lands on a kept polyphase output index
    lead = (-delay) % down
    full = sps.upfirdn(np.concatenate([np.zeros(lead), h]), w.samples, up, down)
    skip = (delay + lead) // down
    out_len = int(round(w.samples.size * target_rate_hz / src))
    out = full[skip:skip + out_len]
    if out.size < out_len:
        out = np.pad(out, (0, out_len - out.size))
    return Waveform(out, target_rate_hz)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    n_frames = 1 + (x.size - window_len) // hop
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(w: Waveform, window_len: int = 1024, hop: int = 256, center: bool = True) -> Spectrogram:
    """Hann STFT. With center=True the signal is reflect-padded by half a
    window so istft can reconstruct the interior exactly."""
    x = w.samples
    if x.size < window_len:
        raise ValueError("signal shorter than one STFT window")
    if center:
        x = np.pad(x, (window_len // 2, window_len // 2), mode="reflect")
    win = _hann_periodic(window_len)
    frames = np.fft.rfft(_frame(x, window_len, hop) * win, axis=1)
    return Spectrogram(frames.T, window_len, hop, w.sample_rate_hz)


def istft(spec: Spectrogram, n_samples: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of stft(center=True).

    Reconstruction is exact (within float rounding) wherever the squared
    window overlap-add is constant, i.e. everywhere except the outermost
    window of samples.
    """
    window_len, hop = spec.window_len, spec.hop
    win = _hann_periodic(window_len)
    frames = np.fft.irfft(spec.frames.T, n=window_len, axis=1) * win
    n_frames = frames.shape[0]
    total = hop * (n_frames - 1) + window_len
    acc = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for k in range(n_frames):
        acc[k * hop:k * hop + window_len] += frames[k]
        norm[k * hop:k * hop + window_len] += wsq
    good = norm > 1e-10
    acc[good] /= norm[good]
    pad = window_len // 2
    out = acc[pad:total - pad]
    if n_samples is not None:
        if out.size < n_samples:
            out = np.pad(out, (0, n_samples - out.size))
        out = out[:n_samples]
    return Waveform(out, spec.sample_rate_hz)


# ---------------------------------------------------------------------------
# SNR family
# ---------------------------------------------------------------------------

def _aligned(reference: Waveform, test: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if reference.sample_rate_hz != test.sample_rate_hz:
        raise ValueError("sample rate mismatch: %d vs %d"
                         % (reference.sample_rate_hz, test.sample_rate_hz))
    a, b = reference.samples, test.samples
    if a.size != b.size:
        longer = max(a.size, b.size)
        if abs(a.size - b.size) > TRIM_TOLERANCE * longer:
            raise ValueError("length mismatch %d vs %d exceeds %.0f%%"
                             % (a.size, b.size, 100 * TRIM_TOLERANCE))
        warnings.warn("length mismatch %d vs %d, trimming to min" % (a.size, b.size))
        n = min(a.size, b.size)
        a, b = a[:n], b[:n]
    return a, b


def _clamped_db_ratio(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CLAMP
    if num <= 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * math.log10(num / den), -DB_CLAMP, DB_CLAMP))


def snr_db(reference: Waveform, test: Waveform) -> float:
    """10 log10(||ref||^2 / ||ref - test||^2), clamped to [-100, +100] dB."""
    a, b = _aligned(reference, test)
    if a.size == 0:
        raise ValueError("empty signals")
    return _clamped_db_ratio(float(np.dot(a, a)), float(np.dot(a - b, a - b)))


def snr_delta_db(clean_roundtrip: Waveform, adversarial: Waveform) -> float:
    """snr_db with the codec's clean continuous round-trip as the reference."""
    return snr_db(clean_roundtrip, adversarial)


def si_sdr_db(reference: Waveform, test: Waveform) -> float:
    """Scale-invariant SDR: project test onto reference, compare to residual."""
    a, b = _aligned(reference, test)
    a = a - a.mean()
    b = b - b.mean()
    ref_energy = float(np.dot(a, a))
    if ref_energy < 1e-30:
        raise ValueError("zero-energy reference")
    alpha = float(np.dot(b, a)) / ref_energy
    target = alpha * a
    residual = b - target
    return _clamped_db_ratio(float(np.dot(target, target)),
                             float(np.dot(residual, residual)))


# ---------------------------------------------------------------------------
# Log-spectral distance
# ---------------------------------------------------------------------------

def lsd_db(reference: Waveform, test: Waveform) -> float:
    """RMS over frames of the per-frame RMS over bins of the 20 log10
    magnitude difference. 1024-sample Hann window, 256 hop, floor 1e-8."""
    a, b = _aligned(reference, test)
    if a.size < LSD_WINDOW:
        raise ValueError("signal shorter than one STFT window")
    win = _hann_periodic(LSD_WINDOW)
    sa = np.maximum(np.abs(np.fft.rfft(_frame(a, LSD_WINDOW, LSD_HOP) * win, axis=1)), LSD_MAG_FLOOR)
    sb = np.maximum(np.abs(np.fft.rfft(_frame(b, LSD_WINDOW, LSD_HOP) * win, axis=1)), LSD_MAG_FLOOR)
    diff = 20.0 * (np.log10(sa) - np.log10(sb))
    per_frame = np.mean(diff * diff, axis=1)
    return float(np.sqrt(np.mean(per_frame)))


# ---------------------------------------------------------------------------
# Loudness (simplified integrated LUFS: K-weighting, 400 ms blocks,
# absolute -70 gate only, no relative gate)
# ---------------------------------------------------------------------------

def _k_weighting_sos(rate: int) -> np.ndarray:
    """Two-stage K-weighting designed at an arbitrary rate via the bilinear
    transform: a +4 dB high shelf followed by a high-pass."""
    f0, gain_db, q = 1681.9744509555319, 3.99984385397, 0.7071752369554196
    k = tan(pi * f0 / rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf = [
        (vh + vb * k / q + k * k) / a0,
        2.0 * (k * k - vh) / a0,
        (vh - vb * k / q + k * k) / a0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    f0, q = 38.13547087613982, 0.5003270373253953
    k = tan(pi * f0 / rate)
    a0 = 1.0 + k / q + k * k
    highpass = [
        1.0, -2.0, 1.0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    return np.array([shelf, highpass])


def lufs(w: Waveform) -> float:
    """Simplified integrated loudness of a mono signal.

    K-weight, take mean squares over 400 ms blocks with 75% overlap, drop
    blocks below the -70 LUFS absolute gate, and integrate the rest. Returns
    the -100 dB clamp floor when every block is gated out.
    """
    rate = w.sample_rate_hz
    block = int(round(LUFS_BLOCK_S * rate))
    step = int(round(LUFS_STEP_S * rate))
    if w.samples.size < block:
        raise ValueError("need at least %.0f ms of audio" % (1000 * LUFS_BLOCK_S))
    weighted = sps.sosfilt(_k_weighting_sos(rate), w.samples)
    starts = range(0, w.samples.size - block + 1, step)
    z = np.array([np.mean(weighted[s:s + block] ** 2) for s in starts])
    gate_z = 10.0 ** ((LUFS_ABS_GATE + 0.691) / 10.0)
    kept = z[z > gate_z]
    if kept.size == 0:
        return -DB_CLAMP
    return float(np.clip(-0.691 + 10.0 * math.log10(np.mean(kept)), -DB_CLAMP, DB_CLAMP))


def delta_lufs(a: Waveform, b: Waveform) -> float:
    return lufs(a) - lufs(b)


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------

def quality_report(clean: Waveform, clean_roundtrip: Waveform,
                   adversarial: Waveform) -> AudioQualityReport:
    """Standard distortion summary for an adversarial example.

    snr/si-sdr/lsd are measured against the original carrier, snr_delta
    against the codec's clean continuous round-trip, and delta_lufs is the
    loudness shift adversarial minus carrier.
    """
    return AudioQualityReport(
        snr_db=snr_db(clean, adversarial),
        snr_delta_db=snr_delta_db(clean_roundtrip, adversarial),
        si_sdr_db=si_sdr_db(clean, adversarial),
        lsd_db=lsd_db(clean, adversarial),
        delta_lufs_db=delta_lufs(adversarial, clean),
    )
