"""Projected-gradient attacks against a frozen transcriber.

The latent attack optimizes a perturbation on the codec latent of a
carrier clip with a warmup-then-harden schedule: clean-path steps first,
then alternating steps that push the decoded audio through a straight-
through codec channel at a bitrate drawn fresh from a grid. A waveform
variant runs the identical machinery directly on PCM samples, and a
bisection calibrator matches its budget to a latent run by clean-channel
SNR so the two are comparable.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace, asdict
from math import gcd
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import audio, ckpt
from .audio import Waveform
from .channels import BitrateGrid, CodecChannelSpec, sample_bitrate, ste_wrap
from .victim import target_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_EOT_GRID = BitrateGrid((16, 24, 32, 64, 128))
CLEAN_STEP = 0              # bitrate_history entry for steps with no codec pass
COVERAGE_MIN_PER_BITRATE = 25   # lint only when the run is long enough to judge
BUDGET_SLACK = 1e-12


class AttackDivergedError(RuntimeError):
    """Non-finite loss; carries a diagnostic snapshot of the run state."""

    def __init__(self, message: str, state_dump: dict):
        super().__init__("%s\nstate dump: %s" % (message, json.dumps(state_dump)))
        self.state_dump = state_dump


class CoverageLintError(RuntimeError):
    """A long EoT run never sampled one of its grid bitrates."""


class CalibrationError(RuntimeError):
    """SNR-matched budget search failed (bracket or monotonicity)."""


# ---------------------------------------------------------------------------
# Config / state / result
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    """domain selects what the perturbation lives on; alpha=None applies
    the domain rule (0.2 for latent, epsilon/5 for waveform)."""

    domain: str = "latent"
    epsilon: float = 1.0
    alpha: float | None = None
    steps: int = 1000
    warmup_ratio: float = 0.3
    eot_grid: BitrateGrid = DEFAULT_EOT_GRID
    channel_family: str = "toy"
    seed: int = 0

    def __post_init__(self):
        if self.domain not in ("latent", "waveform"):
            raise ValueError("domain must be latent or waveform, got %r" % self.domain)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0 when given")

    def effective_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.domain == "waveform":
            # step size scales with the (much smaller) PCM budget
            return self.epsilon / 5.0 if self.epsilon > 0 else 1.0
        return 0.2


@dataclass
class AttackState:
    delta: torch.Tensor
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0
    loss_history: list = field(default_factory=list)
    bitrate_history: list = field(default_factory=list)


def init_attack_state(like: torch.Tensor) -> AttackState:
    zero = torch.zeros_like(like)
    return AttackState(delta=zero, m=zero.clone(), v=zero.clone())


@dataclass
class AttackResult:
    adversarial: Waveform
    final_delta: np.ndarray
    loss_history: list
    bitrate_history: list
    clean_channel_snr_db: float
    config: AttackConfig
    effective_alpha: float
    wall_time_s: float


# ---------------------------------------------------------------------------
# Schedule, optimizer, projection
# ---------------------------------------------------------------------------

def schedule_select(t: int, cfg: AttackConfig) -> str:
    """clean during the first floor(w*S) steps; afterwards codec_eot on
    odd steps and clean on even ones."""
    if not 1 <= t <= cfg.steps:
        raise ValueError("step %d outside 1..%d" % (t, cfg.steps))
    # +1e-9 absorbs float slop in w*S so intended integer boundaries hold
    warmup = math.floor(cfg.warmup_ratio * cfg.steps + 1e-9)
    if t <= warmup:
        return "clean"
    return "codec_eot" if t % 2 == 1 else "clean"


def optimizer_step(state: AttackState, gradient: torch.Tensor,
                   alpha: float) -> AttackState:
    """One adaptive-moment update on delta; the caller projects afterwards."""
    if gradient.shape != state.delta.shape:
        raise ValueError("gradient shape %r does not match delta shape %r"
                         % (tuple(gradient.shape), tuple(state.delta.shape)))
    if not bool(torch.isfinite(gradient).all()):
        raise ValueError("non-finite gradient")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * gradient
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * gradient * gradient
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    delta = state.delta - alpha * m_hat / (v_hat.sqrt() + ADAM_EPS)
    return replace(state, delta=delta, m=m, v=v, t=t)


def linf_project(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    # the bound must round toward zero in delta's dtype, otherwise clamping
    # a float32 delta to an unrepresentable epsilon can exceed the budget
    bound = torch.as_tensor(epsilon, dtype=delta.dtype)
    if float(bound) > epsilon:
        bound = torch.nextafter(bound, torch.zeros_like(bound))
    return delta.clamp(-float(bound), float(bound))


def check_eot_coverage(bitrate_history, grid: BitrateGrid,
                       min_per_bitrate: int = COVERAGE_MIN_PER_BITRATE) -> None:
    """Fail when a run long enough to make a miss astronomically unlikely
    still never sampled some grid bitrate."""
    eot = [b for b in bitrate_history if b != CLEAN_STEP]
    if len(eot) < min_per_bitrate * len(grid):
        return
    seen = set(eot)
    missing = [b for b in grid.bitrates if b not in seen]
    if missing:
        raise CoverageLintError(
            "grid bitrates never sampled over %d codec steps: %s"
            % (len(eot), missing))


# ---------------------------------------------------------------------------
# Differentiable resampling (torch mirror of audio.resample)
# ---------------------------------------------------------------------------

def resample_torch(x: torch.Tensor, src_rate: int, tgt_rate: int) -> torch.Tensor:
    """Same kernel and alignment as audio.resample, expressed with torch
    ops so gradients pass through; the filter is linear, so autograd is
    exact."""
    if x.dim() != 1:
        raise ValueError("expected a 1-D waveform tensor")
    if tgt_rate <= 0:
        raise ValueError("target rate must be positive")
    if src_rate == tgt_rate:
        return x
    g = gcd(src_rate, tgt_rate)
    up, down = tgt_rate // g, src_rate // g
    h = torch.as_tensor(audio.design_resample_kernel(up, down), dtype=x.dtype)
    delay = (h.shape[0] - 1) // 2
    stuffed = torch.zeros(x.shape[0] * up, dtype=x.dtype)
    stuffed[::up] = x
    full = F.conv1d(stuffed.view(1, 1, -1), h.flip(0).view(1, 1, -1),
                    padding=h.shape[0] - 1)[0, 0]
    out_len = int(round(x.shape[0] * tgt_rate / src_rate))
    last = delay + (out_len - 1) * down
    if last >= full.shape[0]:
        full = F.pad(full, (0, last - full.shape[0] + 1))
    return full[delay:delay + out_len * down:down]


# ---------------------------------------------------------------------------
# Attack engine
# ---------------------------------------------------------------------------

def _victim_dtype(victim) -> torch.dtype:
    return victim.param_dtype() if hasattr(victim, "param_dtype") else torch.float32


def _frozen_checksums(modules: dict) -> dict:
    return {name: ckpt.param_checksum(m) for name, m in modules.items()
            if isinstance(m, torch.nn.Module)}


def _run_attack(carrier, target, victim, cfg, render, param_like, frozen,
                transcoders, toy_params, on_step) -> AttackResult:
    rng = np.random.default_rng(cfg.seed)
    alpha = cfg.effective_alpha()
    victim_dtype = _victim_dtype(victim)
    checksums = _frozen_checksums(frozen)
    channels = {}
    state = init_attack_state(param_like)
    start = time.perf_counter()
    for t in range(1, cfg.steps + 1):
        stage = schedule_select(t, cfg)
        delta = state.delta.detach().clone().requires_grad_(True)
        y = render(delta)
        bitrate = CLEAN_STEP
        if stage == "codec_eot":
            bitrate = sample_bitrate(cfg.eot_grid, rng)
            if bitrate not in channels:
                channels[bitrate] = ste_wrap(
                    CodecChannelSpec(cfg.channel_family, bitrate),
                    carrier.sample_rate_hz, transcoders=transcoders,
                    toy_params=toy_params)
            y = channels[bitrate](y)
        y16 = resample_torch(y, carrier.sample_rate_hz,
                             victim.input_sample_rate_hz).to(victim_dtype)
        loss = target_loss(victim, y16, target)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            dump = {"t": t, "stage": stage, "bitrate_kbps": bitrate,
                    "loss": loss_val, "epsilon": cfg.epsilon, "alpha": alpha,
                    "delta_min": float(state.delta.min()),
                    "delta_max": float(state.delta.max()),
                    "delta_rms": float(state.delta.pow(2).mean().sqrt()),
                    "m_rms": float(state.m.pow(2).mean().sqrt()),
                    "v_rms": float(state.v.pow(2).mean().sqrt())}
            raise AttackDivergedError("non-finite loss at step %d" % t, dump)
        gradient, = torch.autograd.grad(loss, delta)
        state = optimizer_step(state, gradient.detach(), alpha)
        state = replace(state, delta=linf_project(state.delta, cfg.epsilon))
        assert float(state.delta.abs().max()) <= cfg.epsilon + BUDGET_SLACK
        state.loss_history.append(loss_val)
        state.bitrate_history.append(bitrate)
        if on_step is not None:
            on_step(state)
    check_eot_coverage(state.bitrate_history, cfg.eot_grid)
    for name, digest in checksums.items():
        if ckpt.param_checksum(frozen[name]) != digest:
            raise RuntimeError("frozen-parameter invariant violated: %s" % name)
    with torch.no_grad():
        adv = render(state.delta)
    wall = time.perf_counter() - start
    adv_w = Waveform(adv.detach().cpu().numpy().astype(np.float64),
                     carrier.sample_rate_hz)
    return AttackResult(
        adversarial=adv_w,
        final_delta=state.delta.detach().cpu().numpy(),
        loss_history=list(state.loss_history),
        bitrate_history=list(state.bitrate_history),
        clean_channel_snr_db=audio.snr_db(carrier, adv_w),
        config=cfg, effective_alpha=alpha, wall_time_s=wall)


def run_latent_attack(carrier: Waveform, target, codec, victim,
                      cfg: AttackConfig, transcoders=None, toy_params=None,
                      on_step=None) -> AttackResult:
    """Optimize a latent perturbation; the loss path is victim over
    resample over (optional codec channel) over decode(z + delta)."""
    if cfg.domain != "latent":
        raise ValueError("config domain is %r, expected latent" % cfg.domain)
    if carrier.sample_rate_hz != codec.native_sample_rate_hz:
        raise ValueError("carrier at %d Hz, codec native rate is %d Hz"
                         % (carrier.sample_rate_hz, codec.native_sample_rate_hz))
    x = torch.as_tensor(carrier.samples, dtype=codec.param_dtype())
    was_training = codec.training
    codec.train()   # keeps autograd state alive through weight-normed convs
    try:
        with torch.no_grad():
            z = codec.encode_tensor(x).detach()
        n = carrier.n_samples

        def render(delta):
            return codec.decode_tensor(z + delta)[:n]

        return _run_attack(carrier, target, victim, cfg, render,
                           param_like=z,
                           frozen={"codec": codec, "victim": victim},
                           transcoders=transcoders, toy_params=toy_params,
                           on_step=on_step)
    finally:
        codec.train(was_training)


def run_waveform_attack(carrier: Waveform, target, victim, cfg: AttackConfig,
                        transcoders=None, toy_params=None,
                        on_step=None) -> AttackResult:
    """Same schedule and optimizer on a PCM-domain perturbation; no codec
    encode/decode anywhere in the path."""
    if cfg.domain != "waveform":
        raise ValueError("config domain is %r, expected waveform" % cfg.domain)
    # float64 so a zero-budget run reproduces the carrier bit-exactly
    x = torch.as_tensor(carrier.samples, dtype=torch.float64)

    def render(delta):
        return x + delta

    return _run_attack(carrier, target, victim, cfg, render,
                       param_like=x,
                       frozen={"victim": victim},
                       transcoders=transcoders, toy_params=toy_params,
                       on_step=on_step)


# ---------------------------------------------------------------------------
# SNR-matched budget calibration
# ---------------------------------------------------------------------------

def snr_match_budget(reference_result: AttackResult, carrier, target, victim,
                     search_range, cfg: AttackConfig | None = None,
                     probe_steps: int | None = None, probe_fn=None,
                     tolerance_db: float = 1.0, max_iters: int = 12,
                     monotone_slack_db: float = 0.75,
                     transcoders=None, toy_params=None) -> float:
    """Bisect the waveform budget eps' until a short probe attack lands
    within tolerance_db of the reference run's clean-channel SNR.

    SNR(eps') must be decreasing over everything probed (within slack);
    the search range must bracket the reference SNR."""
    ref_snr = reference_result.clean_channel_snr_db
    lo, hi = float(search_range[0]), float(search_range[1])
    if lo > hi or lo < 0:
        raise ValueError("bad search range [%g, %g]" % (lo, hi))
    if cfg is None:
        cfg = AttackConfig(domain="waveform", epsilon=1.0, alpha=None,
                           steps=reference_result.config.steps,
                           warmup_ratio=reference_result.config.warmup_ratio,
                           eot_grid=reference_result.config.eot_grid,
                           channel_family=reference_result.config.channel_family,
                           seed=reference_result.config.seed)
    if probe_steps is None:
        probe_steps = max(1, cfg.steps // 4)
    if probe_fn is None:
        def probe_fn(eps):
            pcfg = replace(cfg, epsilon=eps, alpha=None, steps=probe_steps)
            probe = run_waveform_attack(carrier, target, victim, pcfg,
                                        transcoders=transcoders,
                                        toy_params=toy_params)
            return probe.clean_channel_snr_db

    seen = []

    def probe(eps):
        s = float(probe_fn(eps))
        seen.append((eps, s))
        ordered = sorted(seen)
        for (e1, s1), (e2, s2) in zip(ordered, ordered[1:]):
            if s2 > s1 + monotone_slack_db:
                raise CalibrationError(
                    "SNR(eps') is not decreasing: %.3f dB at eps'=%g but "
                    "%.3f dB at eps'=%g" % (s1, e1, s2, e2))
        return s

    if lo == hi:
        s = probe(lo)
        if abs(s - ref_snr) < tolerance_db:
            warnings.warn("degenerate search range, returning its endpoint")
            return lo
        raise CalibrationError(
            "degenerate range [%g, %g]: SNR %.2f dB vs reference %.2f dB"
            % (lo, hi, s, ref_snr))
    s_lo, s_hi = probe(lo), probe(hi)
    if abs(s_lo - ref_snr) < tolerance_db:
        return lo
    if abs(s_hi - ref_snr) < tolerance_db:
        return hi
    if not (s_lo >= ref_snr >= s_hi):
        raise CalibrationError(
            "range does not bracket the reference SNR: SNR(%g)=%.2f dB, "
            "SNR(%g)=%.2f dB, reference %.2f dB" % (lo, s_lo, hi, s_hi, ref_snr))
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        s = probe(mid)
        if abs(s - ref_snr) < tolerance_db:
            return mid
        if s > ref_snr:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("no eps' within %.2f dB of reference after %d "
                           "bisection steps" % (tolerance_db, max_iters))


# ---------------------------------------------------------------------------
# Manifests and result bundles
# ---------------------------------------------------------------------------

def config_to_dict(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    d["eot_grid"] = list(cfg.eot_grid.bitrates)
    return d


def config_from_dict(d: dict) -> AttackConfig:
    d = dict(d or {})
    grid = d.pop("eot_grid", None)
    if grid is not None:
        d["eot_grid"] = BitrateGrid(tuple(grid))
    unknown = set(d) - {f for f in AttackConfig.__dataclass_fields__}
    if unknown:
        raise ValueError("unknown attack config fields: %s" % sorted(unknown))
    return AttackConfig(**d)


def load_attack_manifest(path) -> dict:
    """Structured attack request: carrier path, target text, config."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError("attack manifest must be a mapping")
    for key in ("carrier", "target_text"):
        if key not in doc:
            raise ValueError("attack manifest missing %r" % key)
    return {"carrier_path": str(doc["carrier"]),
            "target_text": str(doc["target_text"]),
            "config": config_from_dict(doc.get("config", {}))}


def write_result_bundle(result: AttackResult, out_dir,
                        extra: dict | None = None) -> dict:
    """adversarial WAV + delta blob + loss-history CSV + config echo.

    extra entries (e.g. the carrier path) are merged into the config echo.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"adversarial": out / "adversarial.wav",
             "delta": out / "delta.npy",
             "loss_history": out / "loss_history.csv",
             "config": out / "config.json"}
    audio.save_wav(result.adversarial, paths["adversarial"])
    np.save(paths["delta"], result.final_delta)
    with open(paths["loss_history"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "bitrate_kbps"])
        for i, (loss, b) in enumerate(zip(result.loss_history,
                                          result.bitrate_history), start=1):
            writer.writerow([i, repr(loss), b])
    echo = {"config": config_to_dict(result.config),
            "effective_alpha": result.effective_alpha,
            "clean_channel_snr_db": result.clean_channel_snr_db,
            "final_loss": result.loss_history[-1],
            "wall_time_s": result.wall_time_s}
    echo.update(extra or {})
    with open(paths["config"], "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {k: str(v) for k, v in paths.items()}
