"""Differentiable latent audio codec: the encoder/decoder interface the
attack optimizes through, a desk-scale trainable instantiation, latent scale
estimation, and budget transfer between codecs with different latent scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from . import ckpt, synth
from .audio import Waveform, snr_db


@dataclass
class LatentTensor:
    """Continuous latent, shape (d, frames). Carries both z and deltas."""

    values: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError("latent must be a (d, frames) matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent contains non-finite entries")


@dataclass
class BudgetSpec:
    """L-infinity bound on latent perturbation entries."""

    epsilon: float

    def __post_init__(self):
        if not (self.epsilon >= 0.0):
            raise ValueError("epsilon must be >= 0")


class LatentCodec:
    """Interface every latent codec implements.

    Required attributes: latent_dim, frame_rate_hz, native_sample_rate_hz.
    encode_tensor/decode_tensor run on torch tensors and support reverse-mode
    gradients; parameters are immutable during attacks (training owns the
    codec exclusively).
    """

    latent_dim: int
    frame_rate_hz: float
    native_sample_rate_hz: int

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


def _conv_geometry(stride: int) -> tuple:
    # kernel/padding pairs that make strided length division exact
    if stride % 2 == 0:
        return 2 * stride, stride // 2
    return 2 * stride + 1, (stride + 1) // 2


class ToyLatentCodec(nn.Module, LatentCodec):
    """Small convolutional analysis/synthesis codec, 16-dim latent at 75
    frames/s for 24 kHz input (downsample factor 320 = 2*4*5*8).

    The decoder carries no bias terms, so a zero latent decodes to exact
    silence (ELU fixes zero). Weight-normalized convolutions throughout.
    Construction is deterministic given the seed.
    """

    LATENT_DIM = 16
    STRIDES = (2, 4, 5, 8)
    CHANNELS = (16, 24, 32, 48, 64)

    def __init__(self, seed: int = 0, native_sample_rate_hz: int = 24000):
        super().__init__()
        self.seed = int(seed)
        self.latent_dim = self.LATENT_DIM
        self.native_sample_rate_hz = int(native_sample_rate_hz)
        self.downsample = int(np.prod(self.STRIDES))
        self.frame_rate_hz = self.native_sample_rate_hz / self.downsample

        torch.manual_seed(self.seed)
        ch = self.CHANNELS
        enc = [weight_norm(nn.Conv1d(1, ch[0], 7, padding=3))]
        for i, s in enumerate(self.STRIDES):
            k, p = _conv_geometry(s)
            enc += [nn.ELU(), weight_norm(nn.Conv1d(ch[i], ch[i + 1], k, stride=s, padding=p))]
        enc += [nn.ELU(), weight_norm(nn.Conv1d(ch[-1], self.LATENT_DIM, 3, padding=1))]
        self.encoder = nn.Sequential(*enc)

        dec = [weight_norm(nn.Conv1d(self.LATENT_DIM, ch[-1], 3, padding=1, bias=False))]
        rev = tuple(reversed(ch))
        for i, s in enumerate(reversed(self.STRIDES)):
            k, p = _conv_geometry(s)
            dec += [nn.ELU(), weight_norm(nn.ConvTranspose1d(rev[i], rev[i + 1], k,
                                                             stride=s, padding=p, bias=False))]
        dec += [nn.ELU(), weight_norm(nn.Conv1d(ch[0], 1, 7, padding=3, bias=False))]
        self.decoder = nn.Sequential(*dec)

    # -- tensor paths (differentiable) -------------------------------------

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 1:
            raise ValueError("encode_tensor expects a 1-D waveform tensor")
        short = (-x.shape[0]) % self.downsample
        if short:
            x = F.pad(x, (0, short))
        return self.encoder(x.view(1, 1, -1))[0]

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[0] != self.latent_dim:
            raise ValueError("latent shape mismatch: expected (%d, F), got %r"
                             % (self.latent_dim, tuple(z.shape)))
        return self.decoder(z.unsqueeze(0))[0, 0]

    def param_dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def param_checksum(self) -> str:
        return ckpt.param_checksum(self)

    def config(self) -> dict:
        return {
            "latent_dim": self.LATENT_DIM,
            "strides": list(self.STRIDES),
            "channels": list(self.CHANNELS),
            "native_sample_rate_hz": self.native_sample_rate_hz,
        }


# ---------------------------------------------------------------------------
# Domain-level encode/decode
# ---------------------------------------------------------------------------

def encode(codec, w: Waveform) -> LatentTensor:
    """Encode a carrier to its continuous latent (no gradient retained)."""
    if w.sample_rate_hz != codec.native_sample_rate_hz:
        raise ValueError("wrong sample rate: codec expects %d Hz, got %d Hz"
                         % (codec.native_sample_rate_hz, w.sample_rate_hz))
    with torch.no_grad():
        z = codec.encode_tensor(torch.as_tensor(w.samples, dtype=codec.param_dtype()))
    return LatentTensor(z.cpu().numpy(), codec.frame_rate_hz)


def decode(codec, z: LatentTensor) -> Waveform:
    """Decode a latent back to a waveform at the codec's native rate."""
    with torch.no_grad():
        x = codec.decode_tensor(torch.as_tensor(z.values, dtype=codec.param_dtype()))
    return Waveform(x.cpu().numpy(), codec.native_sample_rate_hz)


# ---------------------------------------------------------------------------
# Latent scale and budget transfer
# ---------------------------------------------------------------------------

def estimate_sigma(codec, calibration) -> float:
    """Standard deviation over all latent entries of the encoded clips."""
    clips = list(calibration)
    if not clips:
        raise ValueError("calibration set is empty")
    entries = [encode(codec, w).values.ravel() for w in clips]
    return float(np.std(np.concatenate(entries)))


def scale_budget(eps_src: float, sigma_src: float, sigma_tgt: float) -> float:
    """Transfer an L-infinity budget between latent spaces by sigma ratio."""
    if sigma_src <= 0:
        raise ValueError("sigma_src must be positive")
    return eps_src * sigma_tgt / sigma_src


# Reference latent scales reported for public pretrained codecs. Recorded as
# data only: the concrete cross-codec budget pairs reported alongside these
# scales do not satisfy scale_budget's linear rule (see README).
PRETRAINED_LATENT_SIGMA = {"encodec": 50.0, "mimi": 0.05, "dac": 0.5}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _multiscale_spectral_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    total = x.new_zeros(())
    for n_fft in (256, 512, 1024):
        win = torch.hann_window(n_fft, dtype=x.dtype)
        sx = torch.stft(x, n_fft, hop_length=n_fft // 4, window=win,
                        return_complex=True, center=True).abs()
        sy = torch.stft(y, n_fft, hop_length=n_fft // 4, window=win,
                        return_complex=True, center=True).abs()
        total = total + (sx - sy).abs().mean() \
            + 0.5 * (torch.log(sx + 1e-6) - torch.log(sy + 1e-6)).abs().mean()
    return total


def _mean_roundtrip_snr(codec, clips) -> float:
    vals = []
    for w in clips:
        out = decode(codec, encode(codec, w))
        vals.append(snr_db(w, Waveform(out.samples[:w.n_samples], w.sample_rate_hz)))
    return float(np.mean(vals))


def train_toy_codec(seed: int = 0, n_clips: int = 100, duration_s: float = 1.0,
                    steps: int = 600, batch_size: int = 8, lr: float = 3e-4,
                    native_sample_rate_hz: int = 24000, holdout: int = 10):
    """Train a ToyLatentCodec on the synthetic corpus with an L1 waveform plus
    multi-scale spectral loss. Returns (codec, history); history records the
    held-out round-trip SNR before and after training."""
    rate = native_sample_rate_hz
    clips = synth.codec_corpus(n_clips + holdout, rate, duration_s, seed=seed + 1)
    train_clips, val_clips = clips[:-holdout], clips[-holdout:]
    codec = ToyLatentCodec(seed=seed, native_sample_rate_hz=rate)

    snr_before = _mean_roundtrip_snr(codec, val_clips)
    data = torch.as_tensor(np.stack([c.samples for c in train_clips]), dtype=torch.float32)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed + 2)
    losses = []
    codec.train()
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        batch = data[idx]
        short = (-batch.shape[1]) % codec.downsample
        if short:
            batch = F.pad(batch, (0, short))
        z = codec.encoder(batch.unsqueeze(1))
        recon = codec.decoder(z).squeeze(1)[:, :batch.shape[1]]
        loss = (recon - batch).abs().mean() + _multiscale_spectral_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    snr_after = _mean_roundtrip_snr(codec, val_clips)
    history = {"loss": losses, "val_snr_untrained_db": snr_before,
               "val_snr_trained_db": snr_after}
    return codec, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CODEC_CHECKPOINT_KIND = "toy-latent-codec"


def save_toy_codec(codec: ToyLatentCodec, path, extra: dict | None = None) -> None:
    ckpt.save_checkpoint(path, CODEC_CHECKPOINT_KIND, codec.config(), codec.seed,
                         codec.state_dict(), extra=extra)


def load_toy_codec(path) -> ToyLatentCodec:
    payload = ckpt.load_checkpoint(path, CODEC_CHECKPOINT_KIND)
    codec = ToyLatentCodec(seed=payload["seed"],
                           native_sample_rate_hz=payload["config"]["native_sample_rate_hz"])
    if payload["config"] != codec.config():
        raise ValueError("checkpoint architecture differs from this build")
    codec.load_state_dict(payload["state_dict"])
    return codec
