"""Lossy compression channels and their gradient plumbing.

Three kinds of channel live here: real external codecs driven through
command templates, a deterministic in-repo toy codec that reproduces the two
lossy mechanisms that matter (band truncation and magnitude quantization),
and an identity passthrough. All channels are non-differentiable as far as
autograd is concerned; ste_wrap puts a straight-through estimator around any
of them so the forward pass runs the real channel while the backward pass
treats it as the identity.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from . import audio
from .audio import Waveform

SUPPORTED_BITRATES = {
    "opus": frozenset({16, 24, 32, 64, 128, 192}),
    "mp3": frozenset({64, 96, 128, 192}),
    "aac_lc": frozenset({64, 96, 128, 192}),
}
TOY_MIN_BITRATE = 8
TOY_WINDOW = 512
TOY_HOP = 128
TOY_LOG_FLOOR_DB = -80.0
ALIGN_MAX_LAG = 64

TRANSCODER_DIR_ENV = "CODECRAID_TRANSCODER_DIR"


class ChannelError(RuntimeError):
    """A codec channel could not produce usable output."""


@dataclass(frozen=True)
class CodecChannelSpec:
    """One concrete channel: codec family plus bitrate."""

    family: str
    bitrate_kbps: int

    def __post_init__(self):
        if self.family in SUPPORTED_BITRATES:
            if self.bitrate_kbps not in SUPPORTED_BITRATES[self.family]:
                raise ValueError("bitrate %d not supported for %s (allowed: %s)"
                                 % (self.bitrate_kbps, self.family,
                                    sorted(SUPPORTED_BITRATES[self.family])))
        elif self.family == "toy":
            if self.bitrate_kbps < TOY_MIN_BITRATE:
                raise ValueError("toy codec bitrate must be >= %d kbps" % TOY_MIN_BITRATE)
        elif self.family == "identity":
            if self.bitrate_kbps <= 0:
                raise ValueError("bitrate must be positive")
        else:
            raise ValueError("unknown codec family %r" % self.family)

    @property
    def label(self) -> str:
        return "%s@%d" % (self.family, self.bitrate_kbps)


@dataclass(frozen=True)
class BitrateGrid:
    """Ordered set of bitrates used for EoT sampling and evaluation ladders."""

    bitrates: tuple

    def __post_init__(self):
        rates = tuple(int(b) for b in self.bitrates)
        if len(rates) == 0:
            raise ValueError("bitrate grid must be non-empty")
        if any(b2 <= b1 for b1, b2 in zip(rates, rates[1:])):
            raise ValueError("bitrate grid must be strictly increasing")
        object.__setattr__(self, "bitrates", rates)

    def __len__(self):
        return len(self.bitrates)


def sample_bitrate(grid: BitrateGrid, rng: np.random.Generator) -> int:
    """Draw one bitrate uniformly from the grid."""
    return int(grid.bitrates[rng.integers(len(grid.bitrates))])


# ---------------------------------------------------------------------------
# Toy lossy codec
# ---------------------------------------------------------------------------

def default_cutoff_fraction(bitrate_kbps: int) -> float:
    return min(1.0, bitrate_kbps / 96.0)


def default_quant_levels(bitrate_kbps: int) -> int:
    return 2 ** (4 + bitrate_kbps // 16)


@dataclass
class ToyLossyCodecParams:
    """Bitrate maps for the toy codec: fraction of the band kept and number
    of log-magnitude quantization levels."""

    cutoff_fraction: Callable[[int], float] = field(default=default_cutoff_fraction)
    quant_levels: Callable[[int], int] = field(default=default_quant_levels)


def _toy_lossy_roundtrip(w: Waveform, bitrate_kbps: int,
                         params: ToyLossyCodecParams) -> Waveform:
    """Deterministic stand-in for a real transcode: drop STFT bins above the
    bitrate-dependent cutoff, then uniformly quantize the retained magnitudes
    in the log domain (floor -80 dB, bins below it are muted). The hard
    rounding makes this non-differentiable on purpose."""
    cutoff = params.cutoff_fraction(bitrate_kbps)
    levels = params.quant_levels(bitrate_kbps)
    if not (0.0 < cutoff <= 1.0) or levels < 2:
        raise ValueError("invalid toy codec params at %d kbps" % bitrate_kbps)
    n = w.n_samples
    # pad so the original signal sits in the exactly-reconstructed interior
    padded = Waveform(np.pad(w.samples, (TOY_WINDOW, TOY_WINDOW)), w.sample_rate_hz)
    spec = audio.stft(padded, window_len=TOY_WINDOW, hop=TOY_HOP)
    frames = spec.frames.copy()

    freqs = np.fft.rfftfreq(TOY_WINDOW, 1.0 / w.sample_rate_hz)
    frames[freqs > cutoff * (w.sample_rate_hz / 2.0), :] = 0.0

    mag = np.abs(frames)
    floor_mag = 10.0 ** (TOY_LOG_FLOOR_DB / 20.0)
    audible = mag >= floor_mag
    if np.any(audible):
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(np.where(audible, mag, 1.0))
        hi = float(db[audible].max())
        lo = TOY_LOG_FLOOR_DB
        if hi > lo:
            step = (hi - lo) / (levels - 1)
            q = np.round((db - lo) / step)
            db_hat = lo + q * step
        else:
            db_hat = np.full_like(db, hi)
        new_mag = np.where(audible, 10.0 ** (db_hat / 20.0), 0.0)
    else:
        new_mag = np.zeros_like(mag)
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(mag > 0, frames / np.where(mag > 0, mag, 1.0), 0.0)
    spec.frames = phase * new_mag
    out = audio.istft(spec, n_samples=n + 2 * TOY_WINDOW)
    return Waveform(out.samples[TOY_WINDOW:TOY_WINDOW + n], w.sample_rate_hz)


# ---------------------------------------------------------------------------
# External transcoders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscoderTemplate:
    """Command templates for one codec family. Placeholders {in}, {out} and
    {bitrate_kbps} are substituted per call; encode writes the compressed
    temp file (suffix below), decode turns it back into a WAV."""

    encode_cmd: tuple
    decode_cmd: tuple
    suffix: str = ".bin"


# Templates for the ubiquitous ffmpeg CLI. Application mode / frame size are
# deliberately plain command tokens: edit the config file to pin them.
DEFAULT_TRANSCODERS = {
    "opus": TranscoderTemplate(
        encode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-c:a", "libopus", "-b:a", "{bitrate_kbps}k", "{out}"),
        decode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-ar", "24000", "-ac", "1", "{out}"),
        suffix=".opus",
    ),
    "mp3": TranscoderTemplate(
        encode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-c:a", "libmp3lame", "-b:a", "{bitrate_kbps}k", "{out}"),
        decode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-ar", "24000", "-ac", "1", "{out}"),
        suffix=".mp3",
    ),
    "aac_lc": TranscoderTemplate(
        encode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-c:a", "aac", "-b:a", "{bitrate_kbps}k", "{out}"),
        decode_cmd=("ffmpeg", "-y", "-loglevel", "error", "-i", "{in}",
                    "-ar", "24000", "-ac", "1", "{out}"),
        suffix=".m4a",
    ),
}


def load_transcoder_config(path) -> dict:
    """Read a per-family transcoder template mapping from a YAML file."""
    raw = yaml.safe_load(Path(path).read_text())
    registry = {}
    for family, entry in (raw or {}).items():
        registry[family] = TranscoderTemplate(
            encode_cmd=tuple(entry["encode_cmd"]),
            decode_cmd=tuple(entry["decode_cmd"]),
            suffix=entry.get("suffix", ".bin"),
        )
    return registry


def _resolve_executable(token: str) -> str:
    prefix = os.environ.get(TRANSCODER_DIR_ENV)
    if prefix:
        candidate = Path(prefix) / token
        if candidate.exists():
            return str(candidate)
    found = shutil.which(token)
    if found is None and not Path(token).exists():
        raise ChannelError("transcoder executable missing: %r" % token)
    return found or token


def _run_template(cmd_template: tuple, mapping: dict) -> None:
    argv = [tok.format_map(mapping) for tok in cmd_template]
    argv[0] = _resolve_executable(argv[0])
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ChannelError("transcoder failed (exit %d): %s\nstderr: %s"
                           % (proc.returncode, " ".join(argv), proc.stderr.strip()))


def _align_lag(reference: np.ndarray, decoded: np.ndarray, max_lag: int = ALIGN_MAX_LAG) -> int:
    """Lag (in samples) by which the decoded signal trails the reference,
    found by cross-correlation over a +-max_lag window."""
    n = min(reference.size, decoded.size)
    a, b = reference[:n], decoded[:n]
    best_lag, best_score = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            score = float(np.dot(a[:n - lag], b[lag:n]))
        else:
            score = float(np.dot(a[-lag:n], b[:n + lag]))
        if score > best_score:
            best_lag, best_score = lag, score
    return best_lag


def _external_roundtrip(w: Waveform, spec: CodecChannelSpec,
                        template: TranscoderTemplate) -> Waveform:
    with tempfile.TemporaryDirectory(prefix="codecraid-chan-") as td:
        wav_in = os.path.join(td, "in.wav")
        comp = os.path.join(td, "comp" + template.suffix)
        wav_out = os.path.join(td, "out.wav")
        audio.save_wav(w, wav_in)
        _run_template(template.encode_cmd,
                      {"in": wav_in, "out": comp, "bitrate_kbps": spec.bitrate_kbps})
        _run_template(template.decode_cmd,
                      {"in": comp, "out": wav_out, "bitrate_kbps": spec.bitrate_kbps})
        decoded = audio.load_wav(wav_out)
    if decoded.sample_rate_hz != w.sample_rate_hz:
        decoded = audio.resample(decoded, w.sample_rate_hz)
    if abs(decoded.n_samples - w.n_samples) > 0.01 * w.n_samples:
        raise ChannelError("decoded length %d deviates from input %d by more than 1%%"
                           % (decoded.n_samples, w.n_samples))
    lag = _align_lag(w.samples, decoded.samples)
    shifted = decoded.samples[lag:] if lag >= 0 else np.pad(decoded.samples, (-lag, 0))
    if shifted.size < w.n_samples:
        shifted = np.pad(shifted, (0, w.n_samples - shifted.size))
    return Waveform(shifted[:w.n_samples], w.sample_rate_hz)


# ---------------------------------------------------------------------------
# Channel dispatch
# ---------------------------------------------------------------------------

def apply_channel(w: Waveform, spec: CodecChannelSpec, transcoders: dict | None = None,
                  toy_params: ToyLossyCodecParams | None = None) -> Waveform:
    """Run one full encode/decode cycle through the channel.

    Output is at the input rate and exactly the input length (codec delay is
    undone by cross-correlation before trimming). Deterministic for toy and
    identity; external families are deterministic per transcoder version.
    """
    if spec.family == "identity":
        return w.copy()
    if spec.family == "toy":
        return _toy_lossy_roundtrip(w, spec.bitrate_kbps, toy_params or ToyLossyCodecParams())
    registry = transcoders or {}
    if spec.family not in registry:
        raise ChannelError("no transcoder configured for family %r" % spec.family)
    return _external_roundtrip(w, spec, registry[spec.family])


# ---------------------------------------------------------------------------
# Straight-through estimator
# ---------------------------------------------------------------------------

class _StraightThrough(torch.autograd.Function):
    """Forward: the real (non-differentiable) channel. Backward: identity."""

    @staticmethod
    def forward(ctx, x, run_channel):
        y = run_channel(x.detach().cpu().numpy())
        return torch.as_tensor(y, dtype=x.dtype, device=x.device)

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out, None


def ste_wrap(spec: CodecChannelSpec, sample_rate_hz: int,
             transcoders: dict | None = None,
             toy_params: ToyLossyCodecParams | None = None) -> Callable:
    """Differentiable-looking channel: value equals apply_channel exactly,
    gradient passes through unchanged (identity Jacobian)."""

    def run_channel(x_np: np.ndarray) -> np.ndarray:
        out = apply_channel(Waveform(x_np, sample_rate_hz), spec,
                            transcoders=transcoders, toy_params=toy_params)
        return out.samples

    def channel_fn(x: torch.Tensor) -> torch.Tensor:
        return _StraightThrough.apply(x, run_channel)

    return channel_fn
