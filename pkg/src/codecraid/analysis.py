"""Mechanism diagnostics: where perturbation energy lives and what survives.

Band-energy profiles on the Bark scale, per-region survival of a
perturbation through a lossy channel, decoder response envelopes probed
entry by entry, a three-trace comparison of perturbation sources, and the
normalized encoder drift ratio R.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import audio, victim as victim_mod
from .audio import Waveform
from .channels import CodecChannelSpec, ToyLossyCodecParams, apply_channel

# Always 24 bands / 25 edges regardless of sample rate: edges sit at equal
# steps on the Bark scale (Traunmueller's rational fit, which inverts in
# closed form) stretched so the top edge lands exactly on Nyquist. The
# tabulated critical-band boundaries stop at 15.5 kHz and cannot keep a
# fixed band count under lower Nyquists.
N_BARK_BANDS = 24


def hz_to_bark(freq_hz: float) -> float:
    return 26.81 * freq_hz / (1960.0 + freq_hz) - 0.53


def bark_to_hz(bark: float) -> float:
    shifted = bark + 0.53
    return 1960.0 * shifted / (26.81 - shifted)

# Frequency regions used by the survival diagnostics.
SURVIVAL_REGIONS = (("sub_400hz", 0.0, 400.0),
                    ("mid_400hz_4khz", 400.0, 4000.0),
                    ("above_4khz", 4000.0, math.inf))

PROFILE_SUM_TOL = 1e-6
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class BarkBands:
    """Ascending band edges in Hz; edges_hz[i]..edges_hz[i+1] is band i."""

    edges_hz: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges_hz)
        object.__setattr__(self, "edges_hz", edges)
        if len(edges) < 2:
            raise ValueError("need at least two band edges")
        if edges[0] != 0.0:
            raise ValueError("first band edge must be 0 Hz")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("band edges must be strictly increasing")

    @property
    def n_bands(self) -> int:
        return len(self.edges_hz) - 1

    @classmethod
    def for_rate(cls, sample_rate_hz: int) -> "BarkBands":
        """25 edges at equal Bark steps from DC to the Nyquist of the
        analyzed signal, so every rate gets 24 bands covering the whole
        spectrum."""
        nyquist = sample_rate_hz / 2.0
        if nyquist <= 0:
            raise ValueError("sample rate must be positive")
        steps = np.linspace(hz_to_bark(0.0), hz_to_bark(nyquist),
                            N_BARK_BANDS + 1)
        edges = [bark_to_hz(z) for z in steps]
        edges[0], edges[-1] = 0.0, nyquist    # pin endpoints exactly
        return cls(tuple(edges))

    def labels(self):
        return ["%g-%g" % (lo, hi)
                for lo, hi in zip(self.edges_hz, self.edges_hz[1:])]


@dataclass(frozen=True)
class BandEnergyProfile:
    """Fraction of signal energy per band; sums to one unless the input
    had no energy at all (then all-zero with the flag set)."""

    fractions: tuple
    zero_energy: bool = False

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr:
            raise ValueError("empty profile")
        if any(f < -1e-12 for f in fr):
            raise ValueError("negative band fraction")
        total = sum(fr)
        if self.zero_energy:
            if total != 0.0:
                raise ValueError("zero-energy profile must be all zeros")
        elif abs(total - 1.0) > PROFILE_SUM_TOL:
            raise ValueError("band fractions sum to %.9f, not 1" % total)

    @property
    def n_bands(self) -> int:
        return len(self.fractions)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.fractions, dtype=np.float64)


# ---------------------------------------------------------------------------
# Band energy
# ---------------------------------------------------------------------------

def _stft_bin_power(x: np.ndarray, sample_rate_hz: int, n_fft: int | None = None):
    """Hann-window STFT power summed over frames, one value per rfft bin."""
    x = np.asarray(x, dtype=np.float64)
    if n_fft is None:
        n_fft = 2048 if len(x) >= 2048 else max(64, 1 << int(len(x) - 1).bit_length())
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    hop = n_fft // 4
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    spectra = np.fft.rfft(frames * window, axis=1)
    power = np.sum(np.abs(spectra) ** 2, axis=0)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate_hz)
    return freqs, power


def _band_energies(freqs: np.ndarray, power: np.ndarray, bands: BarkBands) -> np.ndarray:
    edges = np.asarray(bands.edges_hz)
    if freqs[-1] > edges[-1] + 1e-6:
        raise ValueError("bands end at %g Hz but spectrum extends to %g Hz"
                         % (edges[-1], freqs[-1]))
    idx = np.searchsorted(edges, freqs, side="right") - 1
    idx = np.clip(idx, 0, bands.n_bands - 1)    # Nyquist bin joins the top band
    out = np.zeros(bands.n_bands)
    np.add.at(out, idx, power)
    return out


def bark_fractional_energy(delta_waveform: Waveform, bands: BarkBands) -> BandEnergyProfile:
    """Fraction of STFT power in each band, normalized by total power."""
    if delta_waveform.n_samples == 0:
        raise ValueError("empty waveform")
    nyquist = delta_waveform.sample_rate_hz / 2.0
    if bands.edges_hz[-1] > nyquist + 1e-6:
        raise ValueError("top band edge %g Hz exceeds Nyquist %g Hz"
                         % (bands.edges_hz[-1], nyquist))
    freqs, power = _stft_bin_power(delta_waveform.samples,
                                   delta_waveform.sample_rate_hz)
    per_band = _band_energies(freqs, power, bands)
    total = float(per_band.sum())
    if total <= 0.0:
        return BandEnergyProfile(tuple([0.0] * bands.n_bands), zero_energy=True)
    return BandEnergyProfile(tuple(per_band / total))


# ---------------------------------------------------------------------------
# Survival through a channel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalProfile:
    """Per-region similarity between a perturbation before and after one
    channel round trip. None marks a region with no energy to compare."""

    channel_label: str
    regions: tuple
    cosine: tuple
    magnitude_ratio: tuple

    def __post_init__(self):
        if not (len(self.regions) == len(self.cosine) == len(self.magnitude_ratio)):
            raise ValueError("region/metric length mismatch")
        for c in self.cosine:
            if c is not None and not -1.0 - 1e-9 <= c <= 1.0 + 1e-9:
                raise ValueError("cosine outside [-1, 1]")
        for r in self.magnitude_ratio:
            if r is not None and r < 0.0:
                raise ValueError("magnitude ratio must be >= 0")


def _region_components(x: np.ndarray, sample_rate_hz: int) -> list:
    """Split a signal into the three region components via an rfft bin mask.

    Every bin lands in exactly one region, so the components sum back to
    the signal and their energies sum to the total (partition of unity).
    """
    n = len(x)
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    parts = []
    for _, lo, hi in SURVIVAL_REGIONS:
        masked = np.where((freqs >= lo) & (freqs < hi), spectrum, 0.0)
        parts.append(np.fft.irfft(masked, n))
    return parts


def survival_profile(pre_delta: Waveform, channel: CodecChannelSpec,
                     carrier: Waveform, transcoders: dict | None = None,
                     toy_params: ToyLossyCodecParams | None = None) -> SurvivalProfile:
    """How much of a perturbation survives one channel round trip, split by
    frequency region.

    pre_delta is adversarial - carrier. The post-channel perturbation is
    channel(carrier + pre_delta) - channel(carrier); each region is compared
    by cosine similarity and magnitude ratio.
    """
    if pre_delta.sample_rate_hz != carrier.sample_rate_hz:
        raise ValueError("perturbation and carrier sample rates differ")
    if pre_delta.n_samples != carrier.n_samples:
        raise ValueError("perturbation and carrier lengths differ")
    if carrier.n_samples == 0:
        raise ValueError("empty carrier")
    attacked = Waveform(carrier.samples + pre_delta.samples, carrier.sample_rate_hz)
    post_atk = apply_channel(attacked, channel, transcoders, toy_params)
    post_ref = apply_channel(carrier, channel, transcoders, toy_params)
    post_delta = post_atk.samples - post_ref.samples

    pre_parts = _region_components(pre_delta.samples, carrier.sample_rate_hz)
    post_parts = _region_components(post_delta, carrier.sample_rate_hz)
    names, cosines, ratios = [], [], []
    for (name, _, _), a, b in zip(SURVIVAL_REGIONS, pre_parts, post_parts):
        names.append(name)
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na < _ZERO_NORM:
            cosines.append(None)
            ratios.append(None)
        else:
            ratios.append(nb / na)
            if nb < _ZERO_NORM:
                cosines.append(None)
            else:
                cosines.append(float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))
    return SurvivalProfile(channel_label=channel.label, regions=tuple(names),
                           cosine=tuple(cosines), magnitude_ratio=tuple(ratios))


# ---------------------------------------------------------------------------
# Decoder response envelope
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JacobianEnvelope:
    """Band profile of the decoder's response to each latent entry.

    rows is entry-major: row i * n_frames + j holds the profile for latent
    dimension i probed at frame j. entry_energy is the response energy per
    unit perturbation for the same ordering.
    """

    rows: tuple
    entry_energy: tuple
    latent_dim: int
    n_frames: int

    def __post_init__(self):
        if len(self.rows) != self.latent_dim * self.n_frames:
            raise ValueError("row count does not match latent_dim * n_frames")
        if len(self.entry_energy) != len(self.rows):
            raise ValueError("energy count does not match rows")

    def row(self, dim: int, frame: int) -> BandEnergyProfile:
        return self.rows[dim * self.n_frames + frame]

    def per_dimension(self) -> tuple:
        """Mean fractional profile over frames, one profile per dimension."""
        out = []
        for i in range(self.latent_dim):
            rows = [self.row(i, j) for j in range(self.n_frames)
                    if not self.row(i, j).zero_energy]
            if not rows:
                n = self.rows[0].n_bands
                out.append(BandEnergyProfile(tuple([0.0] * n), zero_energy=True))
                continue
            mean = np.mean([r.as_array() for r in rows], axis=0)
            out.append(BandEnergyProfile(tuple(mean / mean.sum())))
        return tuple(out)

    def aggregate(self) -> BandEnergyProfile:
        """Energy-weighted mean profile over all entries."""
        total = 0.0
        acc = np.zeros(self.rows[0].n_bands)
        for profile, energy in zip(self.rows, self.entry_energy):
            if profile.zero_energy:
                continue
            acc += energy * profile.as_array()
            total += energy
        if total <= 0.0:
            return BandEnergyProfile(tuple(acc), zero_energy=True)
        return BandEnergyProfile(tuple(acc / total))


def decoder_band_envelope(codec, probe_frames: int, bands: BarkBands,
                          sigma: float, check_linearity: bool = True) -> JacobianEnvelope:
    """Probe every latent entry with a small perturbation and record the
    band profile of the decoded response.

    The probe magnitude is 1e-2 * sigma; with check_linearity each profile
    is recomputed at half the magnitude and must agree within 0.01 per band,
    which catches probes large enough to leave the linear regime.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if probe_frames < 1:
        raise ValueError("need at least one probe frame")
    d = codec.latent_dim
    rate = codec.native_sample_rate_hz
    dtype = codec.param_dtype()
    u = 1e-2 * sigma

    def response(i, j, magnitude):
        z = torch.zeros((d, probe_frames), dtype=dtype)
        z[i, j] = magnitude
        with torch.no_grad():
            out = codec.decode_tensor(z) - base
        return out.cpu().numpy().astype(np.float64)

    with torch.no_grad():
        base = codec.decode_tensor(torch.zeros((d, probe_frames), dtype=dtype))

    rows, energies = [], []
    for i in range(d):
        for j in range(probe_frames):
            r = response(i, j, u)
            energy = float(np.sum(r * r)) / (u * u)
            if energy <= 0.0:
                rows.append(BandEnergyProfile(tuple([0.0] * bands.n_bands),
                                              zero_energy=True))
                energies.append(0.0)
                continue
            profile = bark_fractional_energy(Waveform(r, rate), bands)
            if check_linearity:
                half = bark_fractional_energy(Waveform(response(i, j, u / 2), rate),
                                              bands)
                drift = np.max(np.abs(profile.as_array() - half.as_array()))
                if drift > 0.01:
                    raise ValueError(
                        "probe at entry (%d, %d) is outside the linear regime "
                        "(profile moved %.4f when halved)" % (i, j, drift))
            rows.append(profile)
            energies.append(energy)
    return JacobianEnvelope(rows=tuple(rows), entry_energy=tuple(energies),
                            latent_dim=d, n_frames=probe_frames)


# ---------------------------------------------------------------------------
# Three-trace comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThreeTraceReport:
    trace_a: BandEnergyProfile     # decoder envelope, energy-weighted
    trace_b: BandEnergyProfile     # random sigma-matched latent draws
    trace_c: BandEnergyProfile     # the actual adversarial delta
    sigma: float
    n_draws: int
    band_edges_hz: tuple

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "n_draws": self.n_draws,
                "band_edges_hz": list(self.band_edges_hz),
                "trace_a": list(self.trace_a.fractions),
                "trace_b": list(self.trace_b.fractions),
                "trace_c": list(self.trace_c.fractions)}


def _as_latent_matrix(delta, dtype) -> torch.Tensor:
    values = getattr(delta, "values", delta)
    if isinstance(values, torch.Tensor):
        t = values.detach().to(dtype)
    else:
        t = torch.as_tensor(np.asarray(values), dtype=dtype)
    if t.dim() != 2:
        raise ValueError("latent delta must be a (d, frames) matrix")
    return t


def three_trace_report(codec, adversarial_delta, sigma: float, n_draws: int,
                       bands: BarkBands, base_z: torch.Tensor | None = None,
                       seed: int = 0) -> ThreeTraceReport:
    """Compare three perturbation sources in band-energy terms: the decoder
    envelope (A), sigma-matched random latent draws (B), and the actual
    adversarial delta (C). Draws are pooled by energy, so for a linear
    decoder B converges to A as draws accumulate.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if n_draws < 1:
        raise ValueError("need at least one draw")
    dtype = codec.param_dtype()
    delta = _as_latent_matrix(adversarial_delta, dtype)
    d, frames = delta.shape
    if d != codec.latent_dim:
        raise ValueError("delta has %d dims, codec expects %d" % (d, codec.latent_dim))
    if base_z is None:
        base_z = torch.zeros((d, frames), dtype=dtype)
    base_z = torch.as_tensor(base_z, dtype=dtype).detach()
    if tuple(base_z.shape) != (d, frames):
        raise ValueError("base latent shape does not match delta")

    rate = codec.native_sample_rate_hz
    envelope = decoder_band_envelope(codec, frames, bands, sigma)
    trace_a = envelope.aggregate()

    with torch.no_grad():
        base_out = codec.decode_tensor(base_z).cpu().numpy().astype(np.float64)

    rng = np.random.default_rng(seed)
    pooled = np.zeros(bands.n_bands)
    for _ in range(n_draws):
        eta = rng.normal(0.0, sigma, size=(d, frames))
        with torch.no_grad():
            out = codec.decode_tensor(base_z + torch.as_tensor(eta, dtype=dtype))
        resp = out.cpu().numpy().astype(np.float64) - base_out
        freqs, power = _stft_bin_power(resp, rate)
        pooled += _band_energies(freqs, power, bands)
    total = float(pooled.sum())
    if total <= 0.0:
        trace_b = BandEnergyProfile(tuple(pooled), zero_energy=True)
    else:
        trace_b = BandEnergyProfile(tuple(pooled / total))

    with torch.no_grad():
        adv_out = codec.decode_tensor(base_z + delta).cpu().numpy().astype(np.float64)
    trace_c = bark_fractional_energy(Waveform(adv_out - base_out, rate), bands)
    return ThreeTraceReport(trace_a=trace_a, trace_b=trace_b, trace_c=trace_c,
                            sigma=sigma, n_draws=n_draws,
                            band_edges_hz=bands.edges_hz)


# ---------------------------------------------------------------------------
# Encoder drift ratio
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderResidualReport:
    """R per channel label; None marks an undefined ratio (the attack moved
    the embedding by less than the tolerance)."""

    entries: tuple

    def as_dict(self) -> dict:
        return dict(self.entries)


def _embed_at_victim_rate(victim, w: Waveform) -> np.ndarray:
    if w.sample_rate_hz != victim.input_sample_rate_hz:
        w = audio.resample(w, victim.input_sample_rate_hz)
    return victim_mod.embed(victim, w).vector


def encoder_residual(victim, carrier: Waveform, adversarial: Waveform,
                     channel: CodecChannelSpec, transcoders: dict | None = None,
                     toy_params: ToyLossyCodecParams | None = None):
    """Channel-induced embedding drift over the attack-induced displacement.

    R = |h(channel(adv)) - h(adv)| / |h(adv) - h(carrier)|. Small R means
    the channel barely disturbs what the attack wrote into the embedding.
    Returns None when the denominator is below tolerance.
    """
    if carrier.sample_rate_hz != adversarial.sample_rate_hz:
        raise ValueError("carrier and adversarial sample rates differ")
    channeled = apply_channel(adversarial, channel, transcoders, toy_params)
    h_atk = _embed_at_victim_rate(victim, adversarial)
    h_chan = _embed_at_victim_rate(victim, channeled)
    h_clean = _embed_at_victim_rate(victim, carrier)
    denom = float(np.linalg.norm(h_atk - h_clean))
    if denom < 1e-9:
        return None
    return float(np.linalg.norm(h_chan - h_atk)) / denom


def encoder_residual_report(victim, carrier: Waveform, adversarial: Waveform,
                            channels, transcoders: dict | None = None,
                            toy_params: ToyLossyCodecParams | None = None) -> EncoderResidualReport:
    entries = []
    for spec in channels:
        entries.append((spec.label, encoder_residual(victim, carrier, adversarial,
                                                     spec, transcoders, toy_params)))
    return EncoderResidualReport(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Serialization and plots
# ---------------------------------------------------------------------------

def profiles_to_csv(path, bands: BarkBands, profiles: dict) -> None:
    """Long-format CSV: one row per (profile label, band)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "band_lo_hz", "band_hi_hz", "fraction"])
        for label, profile in profiles.items():
            for (lo, hi), frac in zip(zip(bands.edges_hz, bands.edges_hz[1:]),
                                      profile.fractions):
                writer.writerow([label, "%g" % lo, "%g" % hi, repr(frac)])


def survival_to_csv(path, profiles) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "region", "cosine", "magnitude_ratio"])
        for p in profiles:
            for name, cos, ratio in zip(p.regions, p.cosine, p.magnitude_ratio):
                writer.writerow([p.channel_label, name,
                                 "" if cos is None else repr(cos),
                                 "" if ratio is None else repr(ratio)])


def write_json_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_band_profiles(path, bands: BarkBands, profiles: dict, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    centers = np.arange(bands.n_bands)
    for label, profile in profiles.items():
        ax.step(centers, profile.as_array(), where="mid", label=label)
    ax.set_xticks(centers[::3])
    ax.set_xticklabels([bands.labels()[i] for i in range(0, bands.n_bands, 3)],
                       rotation=45, ha="right", fontsize=7)
    ax.set_xlabel("band (Hz)")
    ax.set_ylabel("fraction of energy")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_envelope_heatmap(path, envelope: JacobianEnvelope, bands: BarkBands,
                          title: str = "") -> None:
    plt = _pyplot()
    matrix = np.stack([p.as_array() for p in envelope.per_dimension()])
    fig, ax = plt.subplots(figsize=(8, 5))
    image = ax.imshow(matrix, aspect="auto", origin="lower", cmap="magma")
    ax.set_xlabel("band index")
    ax.set_ylabel("latent dimension")
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax, label="fraction of energy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_survival(path, profiles, title: str = "") -> None:
    """Cosine and magnitude-ratio curves per region across channels."""
    plt = _pyplot()
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no survival profiles to plot")
    labels = [p.channel_label for p in profiles]
    x = np.arange(len(profiles))
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for row, attr in zip(axes, ("cosine", "magnitude_ratio")):
        for r, name in enumerate(profiles[0].regions):
            ys = [getattr(p, attr)[r] for p in profiles]
            xs = [xi for xi, y in zip(x, ys) if y is not None]
            ys = [y for y in ys if y is not None]
            row.plot(xs, ys, marker="o", label=name)
        row.set_ylabel(attr)
        row.legend(fontsize=8)
    axes[1].set_xticks(x)
    axes[1].set_xticklabels(labels, rotation=30, ha="right")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
