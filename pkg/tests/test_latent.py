"""Tests for the latent codec: shapes, determinism, gradient correctness
against finite differences, scale estimation, budget transfer, checkpoints,
and a short training smoke run."""

import numpy as np
import pytest
import torch

from codecraid import latentcodec
from codecraid.audio import Waveform
from codecraid.latentcodec import (BudgetSpec, LatentTensor, ToyLatentCodec,
                                   estimate_sigma, scale_budget)


def noise_wave(n=24000, rate=24000, seed=0, amp=0.3):
    return Waveform(amp * np.random.default_rng(seed).standard_normal(n), rate)


@pytest.fixture(scope="module")
def codec():
    return ToyLatentCodec(seed=0)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def test_latent_tensor_validation():
    LatentTensor(np.zeros((16, 75)), 75.0)
    with pytest.raises(ValueError):
        LatentTensor(np.zeros(75), 75.0)
    with pytest.raises(ValueError):
        LatentTensor(np.full((2, 2), np.nan), 75.0)


def test_budget_spec_validation():
    BudgetSpec(0.0)
    BudgetSpec(1.5)
    with pytest.raises(ValueError):
        BudgetSpec(-0.1)


# ---------------------------------------------------------------------------
# Shapes and determinism
# ---------------------------------------------------------------------------

def test_encode_shape_one_second(codec):
    z = latentcodec.encode(codec, noise_wave(24000))
    assert z.values.shape == (16, 75)
    assert z.frame_rate_hz == pytest.approx(75.0)


def test_encode_shape_ceil(codec):
    assert latentcodec.encode(codec, noise_wave(24001)).values.shape == (16, 76)
    assert latentcodec.encode(codec, noise_wave(12000)).values.shape == (16, 38)


def test_roundtrip_duration_within_one_frame(codec):
    for n in (12000, 24000, 24001, 50007):
        w = noise_wave(n, seed=n)
        out = latentcodec.decode(codec, latentcodec.encode(codec, w))
        assert 0 <= out.n_samples - n < codec.downsample


def test_encode_deterministic_fixed_weights(codec):
    w = noise_wave(seed=1)
    z1 = latentcodec.encode(codec, w)
    z2 = latentcodec.encode(codec, w)
    np.testing.assert_array_equal(z1.values, z2.values)


def test_same_seed_same_weights():
    a, b = ToyLatentCodec(seed=7), ToyLatentCodec(seed=7)
    assert a.param_checksum() == b.param_checksum()
    assert a.param_checksum() != ToyLatentCodec(seed=8).param_checksum()


def test_encode_rejects_wrong_rate(codec):
    with pytest.raises(ValueError, match="sample rate"):
        latentcodec.encode(codec, noise_wave(16000, rate=16000))


def test_decode_rejects_wrong_dim(codec):
    with pytest.raises(ValueError, match="shape"):
        codec.decode_tensor(torch.zeros(8, 10))


def test_zero_latent_decodes_to_silence(codec):
    out = latentcodec.decode(codec, LatentTensor(np.zeros((16, 75)), 75.0))
    assert np.max(np.abs(out.samples)) < 1e-12


# ---------------------------------------------------------------------------
# Gradient correctness (finite-difference oracle)
# ---------------------------------------------------------------------------

def _fd_check(fn, x, n_coords, h, seed, rel_tol):
    """Compare autograd gradient of a random linear functional of fn(x)
    against central finite differences on sampled coordinates."""
    rng = np.random.default_rng(seed)
    x = x.clone().requires_grad_(True)
    out = fn(x)
    v = torch.as_tensor(rng.standard_normal(tuple(out.shape)), dtype=x.dtype)
    (out * v).sum().backward()
    grad = x.grad.detach().clone()
    flat = x.detach().view(-1)
    coords = rng.choice(flat.shape[0], size=n_coords, replace=False)
    worst = 0.0
    for c in coords:
        orig = flat[c].item()
        with torch.no_grad():
            flat[c] = orig + h
            plus = float((fn(x.detach()) * v).sum())
            flat[c] = orig - h
            minus = float((fn(x.detach()) * v).sum())
            flat[c] = orig
        fd = (plus - minus) / (2 * h)
        an = grad.view(-1)[c].item()
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def test_encode_gradient_matches_fd():
    codec = ToyLatentCodec(seed=2).double()
    x = torch.as_tensor(noise_wave(3200, seed=3).samples)
    worst = _fd_check(codec.encode_tensor, x, n_coords=10, h=1e-5, seed=4, rel_tol=1e-4)
    assert worst < 1e-4


def test_decode_gradient_matches_fd():
    codec = ToyLatentCodec(seed=2).double()
    z = torch.as_tensor(np.random.default_rng(5).standard_normal((16, 10)))
    worst = _fd_check(codec.decode_tensor, z, n_coords=10, h=1e-5, seed=6, rel_tol=1e-3)
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# Sigma estimation and budget transfer
# ---------------------------------------------------------------------------

class _StubCodec:
    latent_dim = 16
    frame_rate_hz = 75.0
    native_sample_rate_hz = 24000

    def __init__(self, mode):
        self.mode = mode

    def param_dtype(self):
        return torch.float64

    def encode_tensor(self, x):
        frames = int(np.ceil(x.shape[0] / 320))
        if self.mode == "dc":
            return torch.full((16, frames), 0.7, dtype=torch.float64)
        gen = torch.Generator().manual_seed(99)
        return torch.randn(16, frames, generator=gen, dtype=torch.float64)

    def decode_tensor(self, z):
        return torch.zeros(z.shape[1] * 320, dtype=torch.float64)


def test_estimate_sigma_constant_latent_zero():
    clip = Waveform(np.full(24000, 0.5), 24000)
    assert estimate_sigma(_StubCodec("dc"), [clip]) == 0.0


def test_estimate_sigma_unit_gaussian():
    # 16 x ceil(2_000_000/320) = 100_000 entries
    clip = noise_wave(2_000_000, seed=8)
    got = estimate_sigma(_StubCodec("gauss"), [clip])
    assert got == pytest.approx(1.0, abs=0.02)


def test_estimate_sigma_rejects_empty(codec):
    with pytest.raises(ValueError):
        estimate_sigma(codec, [])


def test_scale_budget_cases():
    assert scale_budget(1.0, 3.3, 3.3) == pytest.approx(1.0)
    assert scale_budget(1.0, 50.0, 0.5) == pytest.approx(0.01)
    assert scale_budget(2.0, 1.0, 3.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        scale_budget(1.0, 0.0, 1.0)


def test_reference_sigma_table():
    assert latentcodec.PRETRAINED_LATENT_SIGMA == {
        "encodec": 50.0, "mimi": 0.05, "dac": 0.5}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, codec):
    path = tmp_path / "codec.pt"
    latentcodec.save_toy_codec(codec, path)
    loaded = latentcodec.load_toy_codec(path)
    assert loaded.param_checksum() == codec.param_checksum()
    assert loaded.seed == codec.seed


def test_checkpoint_rejects_wrong_kind(tmp_path, codec):
    from codecraid import ckpt

    path = tmp_path / "other.pt"
    ckpt.save_checkpoint(path, "something-else", codec.config(), 0, codec.state_dict())
    with pytest.raises(ValueError, match="expected"):
        latentcodec.load_toy_codec(path)


# ---------------------------------------------------------------------------
# Training smoke (full-budget training is exercised by the acceptance suite)
# ---------------------------------------------------------------------------

def test_training_smoke_improves_reconstruction():
    codec, history = latentcodec.train_toy_codec(
        seed=1, n_clips=24, duration_s=0.5, steps=60, batch_size=4, holdout=4)
    assert np.mean(history["loss"][-10:]) < np.mean(history["loss"][:10])
    assert history["val_snr_trained_db"] > history["val_snr_untrained_db"]
