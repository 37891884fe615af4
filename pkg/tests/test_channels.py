"""Tests for lossy channels: the deterministic toy codec, channel specs,
the straight-through wrapper, the bitrate sampler, and the template-driven
external transcoder plumbing (exercised with a local fake transcoder)."""

import os
import stat
import sys
import textwrap

import numpy as np
import pytest
import torch

from codecraid import audio, channels
from codecraid.audio import Waveform
from codecraid.channels import BitrateGrid, CodecChannelSpec, TranscoderTemplate


def noise_wave(n=24000, rate=24000, seed=0, amp=0.3):
    return Waveform(amp * np.random.default_rng(seed).standard_normal(n), rate)


# ---------------------------------------------------------------------------
# Specs and grids
# ---------------------------------------------------------------------------

def test_spec_accepts_supported_bitrates():
    CodecChannelSpec("opus", 192)
    CodecChannelSpec("mp3", 96)
    CodecChannelSpec("aac_lc", 64)
    CodecChannelSpec("toy", 8)
    CodecChannelSpec("identity", 1)


def test_spec_rejects_unsupported_bitrates():
    with pytest.raises(ValueError):
        CodecChannelSpec("opus", 20)
    with pytest.raises(ValueError):
        CodecChannelSpec("mp3", 16)
    with pytest.raises(ValueError):
        CodecChannelSpec("toy", 7)
    with pytest.raises(ValueError):
        CodecChannelSpec("vorbis", 64)


def test_bitrate_grid_validation():
    g = BitrateGrid((16, 24, 32, 64, 128))
    assert g.bitrates == (16, 24, 32, 64, 128)
    with pytest.raises(ValueError):
        BitrateGrid(())
    with pytest.raises(ValueError):
        BitrateGrid((16, 16, 24))
    with pytest.raises(ValueError):
        BitrateGrid((24, 16))


def test_toy_param_maps_match_definition():
    p = channels.ToyLossyCodecParams()
    assert p.cutoff_fraction(16) == pytest.approx(16 / 96)
    assert p.cutoff_fraction(96) == 1.0
    assert p.cutoff_fraction(192) == 1.0
    assert p.quant_levels(16) == 2 ** 5
    assert p.quant_levels(64) == 2 ** 8
    assert p.quant_levels(176) == 2 ** 15


def test_toy_param_maps_monotone():
    p = channels.ToyLossyCodecParams()
    rates = range(8, 256, 4)
    cuts = [p.cutoff_fraction(b) for b in rates]
    levels = [p.quant_levels(b) for b in rates]
    assert all(b2 >= b1 for b1, b2 in zip(cuts, cuts[1:]))
    assert all(b2 >= b1 for b1, b2 in zip(levels, levels[1:]))
    assert all(0 < c <= 1 for c in cuts)
    assert all(lv >= 2 for lv in levels)


# ---------------------------------------------------------------------------
# apply_channel: identity and toy
# ---------------------------------------------------------------------------

def test_identity_channel_bit_identical():
    w = noise_wave()
    out = channels.apply_channel(w, CodecChannelSpec("identity", 64))
    np.testing.assert_array_equal(out.samples, w.samples)
    assert out.sample_rate_hz == w.sample_rate_hz


def test_toy_high_bitrate_near_transparent():
    # cutoff 1.0 and 2^15 quantization levels: quantization error alone,
    # which is bounded well under 1e-3 RMS
    w = noise_wave(seed=1)
    out = channels.apply_channel(w, CodecChannelSpec("toy", 176))
    rms = np.sqrt(np.mean((out.samples - w.samples) ** 2))
    assert rms < 1e-3


def test_toy_low_bitrate_removes_high_band():
    # FFT oracle: at 16 kbps the cutoff is (16/96) * Nyquist = 2 kHz at 24 kHz;
    # more than 99% of broadband-noise energy above the cutoff must be gone
    w = noise_wave(seed=2)
    out = channels.apply_channel(w, CodecChannelSpec("toy", 16))
    cutoff_hz = (16 / 96) * (24000 / 2)
    freqs = np.fft.rfftfreq(w.n_samples, 1 / 24000)
    above = freqs > cutoff_hz + 100.0
    e_in = np.sum(np.abs(np.fft.rfft(w.samples))[above] ** 2)
    e_out = np.sum(np.abs(np.fft.rfft(out.samples))[above] ** 2)
    assert e_out < 0.01 * e_in


def test_toy_deterministic():
    w = noise_wave(seed=3)
    spec = CodecChannelSpec("toy", 24)
    a = channels.apply_channel(w, spec)
    b = channels.apply_channel(w, spec)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_toy_preserves_length_odd_sizes():
    for n in (2399, 12001, 24000):
        w = noise_wave(n=n, seed=4)
        out = channels.apply_channel(w, CodecChannelSpec("toy", 32))
        assert out.n_samples == n


def test_toy_snr_monotone_in_bitrate():
    w = noise_wave(seed=5)
    snrs = [audio.snr_db(w, channels.apply_channel(w, CodecChannelSpec("toy", b)))
            for b in (16, 24, 32, 64, 128)]
    assert all(b >= a - 1e-9 for a, b in zip(snrs, snrs[1:]))


def test_toy_silence_stays_silent():
    w = Waveform(np.zeros(8000), 24000)
    out = channels.apply_channel(w, CodecChannelSpec("toy", 16))
    assert np.max(np.abs(out.samples)) < 1e-12


# ---------------------------------------------------------------------------
# Straight-through wrapper
# ---------------------------------------------------------------------------

def test_ste_forward_bit_exact_toy():
    w = noise_wave(n=6000, seed=6)
    spec = CodecChannelSpec("toy", 16)
    fn = channels.ste_wrap(spec, 24000)
    x = torch.tensor(w.samples, dtype=torch.float64)
    got = fn(x)
    want = channels.apply_channel(w, spec).samples
    assert np.array_equal(got.numpy(), want)


def test_ste_forward_bit_exact_identity():
    w = noise_wave(n=6000, seed=7)
    fn = channels.ste_wrap(CodecChannelSpec("identity", 64), 24000)
    x = torch.tensor(w.samples, dtype=torch.float64)
    assert np.array_equal(fn(x).numpy(), w.samples)


def test_ste_backward_all_ones():
    for family, bitrate in (("toy", 16), ("identity", 64)):
        fn = channels.ste_wrap(CodecChannelSpec(family, bitrate), 24000)
        x = torch.tensor(noise_wave(n=3000, seed=8).samples, requires_grad=True)
        fn(x).sum().backward()
        assert torch.equal(x.grad, torch.ones_like(x))


def test_ste_jvp_identity_property():
    fn = channels.ste_wrap(CodecChannelSpec("toy", 24), 24000)
    x = torch.tensor(noise_wave(n=3000, seed=9).samples, requires_grad=True)
    v = torch.tensor(np.random.default_rng(10).standard_normal(3000))
    (fn(x) * v).sum().backward()
    assert torch.equal(x.grad, v)


def test_ste_chain_rule_with_gain():
    # loss = sum(g * C(x)): d/dx = g (identity Jacobian), d/dg = sum(C(x))
    spec = CodecChannelSpec("toy", 16)
    fn = channels.ste_wrap(spec, 24000)
    w = noise_wave(n=3000, seed=11)
    x = torch.tensor(w.samples, requires_grad=True)
    g = torch.tensor(1.7, dtype=torch.float64, requires_grad=True)
    loss = (g * fn(x)).sum()
    loss.backward()
    assert torch.allclose(x.grad, torch.full_like(x, 1.7))
    hand = channels.apply_channel(w, spec).samples.sum()
    assert g.grad.item() == pytest.approx(hand, rel=1e-12)


# ---------------------------------------------------------------------------
# Bitrate sampler
# ---------------------------------------------------------------------------

def test_sample_bitrate_singleton():
    g = BitrateGrid((64,))
    rng = np.random.default_rng(0)
    assert all(channels.sample_bitrate(g, rng) == 64 for _ in range(20))


def test_sample_bitrate_uniform():
    g = BitrateGrid((16, 24, 32, 64, 128))
    rng = np.random.default_rng(123)
    draws = [channels.sample_bitrate(g, rng) for _ in range(100_000)]
    for b in g.bitrates:
        freq = draws.count(b) / len(draws)
        assert abs(freq - 0.2) < 0.01


def test_sample_bitrate_seed_reproducible():
    g = BitrateGrid((16, 24, 32, 64, 128))
    rng1, rng2 = np.random.default_rng(7), np.random.default_rng(7)
    s1 = [channels.sample_bitrate(g, rng1) for _ in range(200)]
    s2 = [channels.sample_bitrate(g, rng2) for _ in range(200)]
    assert s1 == s2


# ---------------------------------------------------------------------------
# External transcoders (fake transcoder script)
# ---------------------------------------------------------------------------

FAKE_TRANSCODER = textwrap.dedent("""\
    #!/usr/bin/env python3
    import argparse, shutil, struct, sys, wave

    p = argparse.ArgumentParser()
    p.add_argument("mode", choices=["encode", "decode"])
    p.add_argument("infile")
    p.add_argument("outfile")
    p.add_argument("--bitrate", default="0")
    p.add_argument("--delay", type=int, default=0)
    p.add_argument("--stretch", type=float, default=1.0)
    p.add_argument("--rate", type=int, default=0)
    p.add_argument("--fail", action="store_true")
    args = p.parse_args()
    if args.fail:
        print("synthetic failure", file=sys.stderr)
        sys.exit(3)
    if args.mode == "encode":
        shutil.copy(args.infile, args.outfile)
        sys.exit(0)
    with wave.open(args.infile, "rb") as fh:
        rate = fh.getframerate()
        frames = fh.readframes(fh.getnframes())
    data = list(struct.unpack("<%dh" % (len(frames) // 2), frames))
    data = [0] * args.delay + data
    if args.stretch != 1.0:
        data = data + [0] * int(len(data) * (args.stretch - 1.0))
    out_rate = args.rate or rate
    if out_rate != rate:
        # crude zero-order hold resample, good enough to test rate hiding
        ratio = out_rate / rate
        data = [data[min(int(i / ratio), len(data) - 1)] for i in range(int(len(data) * ratio))]
    with wave.open(args.outfile, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(out_rate)
        fh.writeframes(struct.pack("<%dh" % len(data), *data))
    """)


@pytest.fixture
def fake_transcoders(tmp_path):
    script = tmp_path / "fake_transcoder.py"
    script.write_text(FAKE_TRANSCODER)

    def template(*decode_extra):
        return TranscoderTemplate(
            encode_cmd=(sys.executable, str(script), "encode", "{in}", "{out}",
                        "--bitrate", "{bitrate_kbps}"),
            decode_cmd=(sys.executable, str(script), "decode", "{in}", "{out}") + decode_extra,
            suffix=".fake",
        )

    return template


def test_external_roundtrip_identity(fake_transcoders):
    w = noise_wave(n=12000, seed=20)
    reg = {"opus": fake_transcoders()}
    out = channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)
    assert out.n_samples == w.n_samples
    assert out.sample_rate_hz == 24000
    # only WAV 16-bit quantization separates output from input
    assert np.max(np.abs(out.samples - np.clip(w.samples, -1, 1))) <= 1.5 / 32768


def test_external_delay_compensated(fake_transcoders):
    w = noise_wave(n=12000, seed=21)
    reg = {"opus": fake_transcoders("--delay", "40")}
    out = channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)
    assert out.n_samples == w.n_samples
    core = slice(0, w.n_samples - 40)
    clipped = np.clip(w.samples, -1, 1)
    assert np.max(np.abs(out.samples[core] - clipped[core])) <= 1.5 / 32768


def test_external_rate_conversion_hidden(fake_transcoders):
    # bandlimited carrier: the fake decoder's crude 48 kHz upsampling only
    # damages content near Nyquist, which is not what this test is about
    t = np.arange(12000) / 24000
    w = Waveform(0.4 * np.sin(2 * np.pi * 220.0 * t), 24000)
    reg = {"opus": fake_transcoders("--rate", "48000")}
    out = channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)
    assert out.sample_rate_hz == 24000
    assert out.n_samples == w.n_samples
    assert audio.snr_db(w, out) > 25.0


def test_external_length_blowup_rejected(fake_transcoders):
    w = noise_wave(n=12000, seed=23)
    reg = {"opus": fake_transcoders("--stretch", "1.05")}
    with pytest.raises(channels.ChannelError, match="length"):
        channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)


def test_external_nonzero_exit_captures_stderr(fake_transcoders):
    w = noise_wave(n=12000, seed=24)
    tpl = fake_transcoders()
    broken = TranscoderTemplate(
        encode_cmd=tpl.encode_cmd + ("--fail",),
        decode_cmd=tpl.decode_cmd,
        suffix=".fake",
    )
    with pytest.raises(channels.ChannelError, match="synthetic failure"):
        channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders={"opus": broken})


def test_external_missing_executable():
    w = noise_wave(n=12000, seed=25)
    reg = {"opus": TranscoderTemplate(
        encode_cmd=("codecraid-no-such-binary", "{in}", "{out}"),
        decode_cmd=("codecraid-no-such-binary", "{in}", "{out}"),
    )}
    with pytest.raises(channels.ChannelError, match="missing"):
        channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)


def test_external_unconfigured_family():
    w = noise_wave(n=12000, seed=26)
    with pytest.raises(channels.ChannelError, match="configured"):
        channels.apply_channel(w, CodecChannelSpec("opus", 64))


def test_transcoder_dir_prefixes_lookup(tmp_path, monkeypatch):
    bindir = tmp_path / "bin"
    bindir.mkdir()
    script = bindir / "fakecodec"
    script.write_text("#!/bin/sh\ncp \"$1\" \"$2\"\n")
    script.chmod(script.stat().st_mode | stat.S_IXUSR)
    monkeypatch.setenv("CODECRAID_TRANSCODER_DIR", str(bindir))
    w = noise_wave(n=12000, seed=27)
    reg = {"opus": TranscoderTemplate(
        encode_cmd=("fakecodec", "{in}", "{out}"),
        decode_cmd=("fakecodec", "{in}", "{out}"),
        suffix=".wav",
    )}
    out = channels.apply_channel(w, CodecChannelSpec("opus", 64), transcoders=reg)
    assert out.n_samples == w.n_samples


def test_load_transcoder_config(tmp_path):
    cfg = tmp_path / "transcoders.yaml"
    cfg.write_text(textwrap.dedent("""\
        opus:
          encode_cmd: ["enc", "{in}", "{out}", "-b", "{bitrate_kbps}"]
          decode_cmd: ["dec", "{in}", "{out}"]
          suffix: ".opus"
        """))
    reg = channels.load_transcoder_config(cfg)
    assert reg["opus"].suffix == ".opus"
    assert "{bitrate_kbps}" in reg["opus"].encode_cmd
