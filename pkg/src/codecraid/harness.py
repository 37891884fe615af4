"""Scenario and grid evaluation.

Turns attack results into the tables the rest of the tooling reports:
attack success rate over a channel grid with confidence intervals, the
EoT on/off ablation, target-length capacity sweeps, the latent-vs-waveform
comparison at matched SNR, audio quality aggregation, and run persistence.
"""

from __future__ import annotations

import csv
import datetime
import json
import subprocess
import warnings
from dataclasses import dataclass, replace

import numpy as np
import yaml
from scipy import stats

from . import __version__, audio, synth
from . import victim as victim_mod
from .attack import AttackConfig, run_latent_attack, run_waveform_attack, snr_match_budget
from .audio import AudioQualityReport, Waveform
from .channels import ChannelError, CodecChannelSpec, ToyLossyCodecParams, apply_channel
from .victim import make_target, substring_match, tokenize

CLEAN_LABEL = "clean"
CARRIER_CLASSES = ("speech", "music")


def cell_label(spec: CodecChannelSpec) -> str:
    return CLEAN_LABEL if spec.family == "identity" else spec.label


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CarrierSpec:
    """One carrier clip: either a file on disk or a synthesized clip."""

    name: str
    carrier_class: str
    path: str | None = None
    duration_s: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.carrier_class not in CARRIER_CLASSES:
            raise ValueError("carrier class must be one of %s" % (CARRIER_CLASSES,))
        if not self.name:
            raise ValueError("carrier needs a name")


@dataclass(frozen=True)
class ScenarioSpec:
    """A named set of carriers, each paired with one target string."""

    name: str
    carriers: tuple
    targets: dict
    victim_id: str = "toy-victim"
    codec_id: str = "toy-codec"

    def __post_init__(self):
        if not self.carriers:
            raise ValueError("scenario has no carriers")
        names = [c.name for c in self.carriers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate carrier names")
        if set(self.targets) != set(names):
            raise ValueError("targets must cover every carrier exactly once")


def load_scenario(path) -> ScenarioSpec:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_scenario(doc)


def parse_scenario(doc) -> ScenarioSpec:
    if not isinstance(doc, dict):
        raise ValueError("scenario manifest must be a mapping")
    try:
        raw_carriers = doc["carriers"]
        targets = dict(doc["targets"])
    except KeyError as missing:
        raise ValueError("scenario manifest missing %s" % missing) from None
    carriers = []
    for entry in raw_carriers:
        synth_block = entry.get("synthesize") or {}
        carriers.append(CarrierSpec(
            name=entry["name"], carrier_class=entry["class"],
            path=entry.get("path"),
            duration_s=float(synth_block.get("duration_s", 2.0)),
            seed=int(synth_block.get("seed", 0))))
    return ScenarioSpec(name=doc.get("name", "scenario"),
                        carriers=tuple(carriers), targets=targets,
                        victim_id=doc.get("victim", "toy-victim"),
                        codec_id=doc.get("codec", "toy-codec"))


def carrier_waveforms(scenario: ScenarioSpec, sample_rate_hz: int) -> dict:
    """Load or synthesize every carrier at the requested rate, by name."""
    out = {}
    for c in scenario.carriers:
        if c.path is not None:
            w = audio.load_wav(c.path)
            if w.sample_rate_hz != sample_rate_hz:
                w = audio.resample(w, sample_rate_hz)
        else:
            w = synth.carrier_clip(kind=c.carrier_class, rate=sample_rate_hz,
                                   duration_s=c.duration_s, seed=c.seed)
        out[c.name] = w
    return out


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalGrid:
    """Channel cells to evaluate on; exactly one is the clean (identity) cell."""

    cells: tuple

    def __post_init__(self):
        clean = [c for c in self.cells if c.family == "identity"]
        if len(clean) != 1:
            raise ValueError("grid needs exactly one clean cell")
        labels = [cell_label(c) for c in self.cells]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate grid cells")

    @property
    def labels(self) -> tuple:
        return tuple(cell_label(c) for c in self.cells)

    @classmethod
    def toy_grid(cls, bitrates=(16, 24, 32, 64, 128)) -> "EvalGrid":
        cells = [CodecChannelSpec("identity", 64)]
        cells += [CodecChannelSpec("toy", b) for b in bitrates]
        return cls(tuple(cells))

    @classmethod
    def paper_grid(cls) -> "EvalGrid":
        """Clean, the trained Opus ladder, held-out Opus, then MP3/AAC."""
        cells = [CodecChannelSpec("identity", 64)]
        cells += [CodecChannelSpec("opus", b) for b in (16, 24, 32, 64, 128, 192)]
        cells += [CodecChannelSpec("mp3", b) for b in (64, 96, 128, 192)]
        cells += [CodecChannelSpec("aac_lc", b) for b in (64, 96, 128, 192)]
        return cls(tuple(cells))


# ---------------------------------------------------------------------------
# Wilson interval and cells
# ---------------------------------------------------------------------------

def wilson_interval(successes: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2.0 * n)) / denom
    half = z * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    # the bound is exact at the endpoints; don't leak rounding residue
    low = 0.0 if successes == 0 else max(0.0, float(center - half))
    high = 1.0 if successes == n else min(1.0, float(center + half))
    return low, high


@dataclass(frozen=True)
class EvalCell:
    """Aggregated outcome for one channel cell."""

    label: str
    n: int
    successes: int
    excluded: int
    asr: float
    ci_low: float
    ci_high: float

    def __post_init__(self):
        if not 0 <= self.successes <= self.n:
            raise ValueError("successes must lie in [0, n]")
        if self.excluded < 0:
            raise ValueError("excluded count must be >= 0")
        expected = self.successes / self.n if self.n else 0.0
        if abs(self.asr - expected) > 1e-12:
            raise ValueError("asr must equal successes / n")
        if not self.ci_low <= self.asr <= self.ci_high:
            raise ValueError("interval must contain the point estimate")


def make_eval_cell(label: str, n: int, successes: int, excluded: int = 0,
                   confidence: float = 0.95) -> EvalCell:
    if n == 0:
        # every carrier was excluded; keep the cell with a vacuous interval
        return EvalCell(label, 0, 0, excluded, 0.0, 0.0, 1.0)
    low, high = wilson_interval(successes, n, confidence)
    return EvalCell(label, n, successes, excluded, successes / n, low, high)


@dataclass(frozen=True)
class GridEvaluation:
    cells: tuple
    outcomes: dict    # carrier -> {cell label -> "hit" | "miss" | "error:..."}


def evaluate_grid(results: dict, scenario: ScenarioSpec, grid: EvalGrid,
                  victim, transcoders: dict | None = None,
                  toy_params: ToyLossyCodecParams | None = None,
                  strict: bool = False, jobs: int = 1) -> GridEvaluation:
    """Score one AttackResult per carrier over every grid cell.

    Each adversarial waveform goes through the cell's channel, is resampled
    to the victim rate, transcribed, and checked for the target substring.
    Channel failures are excluded from n with a warning unless strict, which
    counts them as non-success. Cells are independent; jobs > 1 evaluates
    them on a thread pool, aggregated back in grid order.
    """
    names = [c.name for c in scenario.carriers]
    if set(results) != set(names):
        raise ValueError("need exactly one attack result per carrier")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")

    def one_cell(spec):
        label = cell_label(spec)
        n = successes = excluded = 0
        per_carrier = {}
        for name in names:
            adv = results[name].adversarial
            try:
                out = apply_channel(adv, spec, transcoders, toy_params)
            except ChannelError as err:
                warnings.warn("channel %s failed on %r: %s" % (label, name, err))
                per_carrier[name] = "error:%s" % err
                if strict:
                    n += 1
                else:
                    excluded += 1
                continue
            if out.sample_rate_hz != victim.input_sample_rate_hz:
                out = audio.resample(out, victim.input_sample_rate_hz)
            text = victim_mod.generate(victim, out)
            hit = substring_match(text, scenario.targets[name])
            per_carrier[name] = "hit" if hit else "miss"
            n += 1
            successes += int(hit)
        return make_eval_cell(label, n, successes, excluded), per_carrier

    if jobs == 1:
        scored = [one_cell(spec) for spec in grid.cells]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scored = list(pool.map(one_cell, grid.cells))
    outcomes = {name: {} for name in names}
    for cell, per_carrier in scored:
        for name, outcome in per_carrier.items():
            outcomes[name][cell.label] = outcome
    return GridEvaluation(cells=tuple(c for c, _ in scored), outcomes=outcomes)


def pair_cells(cells_a, cells_b):
    """Zip two cell lists; paired comparison requires identical grids."""
    if [c.label for c in cells_a] != [c.label for c in cells_b]:
        raise ValueError("paired comparison requires identical grids")
    return list(zip(cells_a, cells_b))


# ---------------------------------------------------------------------------
# Ablation: EoT on vs off
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationReport:
    rows: tuple         # (label, asr_full, asr_clean_only, delta)
    full: GridEvaluation
    ablated: GridEvaluation


def attack_scenario(waveforms: dict, scenario: ScenarioSpec, cfg: AttackConfig,
                    codec, victim, transcoders=None, toy_params=None) -> dict:
    """Attack every carrier in the scenario; carrier index offsets the seed
    so runs differ per carrier but stay reproducible end to end."""
    results = {}
    for index, c in enumerate(scenario.carriers):
        per_cfg = replace(cfg, seed=cfg.seed + index)
        target = make_target(scenario.targets[c.name])
        results[c.name] = run_latent_attack(
            waveforms[c.name], target, codec, victim, per_cfg,
            transcoders=transcoders, toy_params=toy_params)
    return results


def ablate_eot(scenario: ScenarioSpec, base_cfg: AttackConfig, codec, victim,
               grid: EvalGrid, waveforms: dict | None = None,
               transcoders: dict | None = None,
               toy_params: ToyLossyCodecParams | None = None) -> AblationReport:
    """Run the attack with and without the codec-EoT stage (same seeds) and
    evaluate both arms on the same grid."""
    if waveforms is None:
        waveforms = carrier_waveforms(scenario, codec.native_sample_rate_hz)
    clean_cfg = replace(base_cfg, warmup_ratio=1.0)
    full = attack_scenario(waveforms, scenario, base_cfg, codec, victim,
                       transcoders, toy_params)
    ablated = attack_scenario(waveforms, scenario, clean_cfg, codec, victim,
                          transcoders, toy_params)
    ev_full = evaluate_grid(full, scenario, grid, victim, transcoders, toy_params)
    ev_ablated = evaluate_grid(ablated, scenario, grid, victim, transcoders,
                               toy_params)
    rows = tuple((a.label, a.asr, b.asr, a.asr - b.asr)
                 for a, b in pair_cells(ev_full.cells, ev_ablated.cells))
    return AblationReport(rows=rows, full=ev_full, ablated=ev_ablated)


# ---------------------------------------------------------------------------
# Capacity sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CapacityRow:
    word_count: int
    target_text: str
    n_attacked: int
    structural_failures: int
    successes: dict          # cell label -> count
    mean_final_loss: float | None
    capacity_flag: bool


@dataclass(frozen=True)
class CapacityTable:
    cell_labels: tuple
    rows: tuple


def capacity_sweep(waveforms: dict, word_counts, cfg: AttackConfig, codec,
                   victim, grid: EvalGrid, pool_seed: int = 0,
                   transcoders: dict | None = None,
                   toy_params: ToyLossyCodecParams | None = None) -> CapacityTable:
    """Attack the same carriers with targets of increasing word count.

    Targets come from one seeded pseudo-word pool so longer targets extend
    shorter ones. A target that does not fit in a carrier's output frames is
    a structural failure for that carrier: recorded, not attacked.
    """
    word_counts = sorted(set(int(w) for w in word_counts))
    if not word_counts or word_counts[0] < 1:
        raise ValueError("word counts must be positive")
    rng = np.random.default_rng(pool_seed)
    pool = synth.random_words(rng, n_words=word_counts[-1]).split()

    rows = []
    names = sorted(waveforms)
    for count in word_counts:
        text = " ".join(pool[:count])
        token_count = len(tokenize(text))
        fits, structural = [], 0
        for name in names:
            w16 = audio.resample(waveforms[name], victim.input_sample_rate_hz)
            if token_count > victim.n_frames(w16.n_samples):
                structural += 1
            else:
                fits.append(name)
        if not fits:
            rows.append(CapacityRow(
                word_count=count, target_text=text, n_attacked=0,
                structural_failures=structural,
                successes={label: 0 for label in grid.labels},
                mean_final_loss=None, capacity_flag=True))
            continue
        sub_scenario = ScenarioSpec(
            name="capacity-%d" % count,
            carriers=tuple(CarrierSpec(name=n, carrier_class="speech")
                           for n in fits),
            targets={n: text for n in fits})
        results = attack_scenario({n: waveforms[n] for n in fits}, sub_scenario,
                              cfg, codec, victim, transcoders, toy_params)
        evaluation = evaluate_grid(results, sub_scenario, grid, victim,
                                   transcoders, toy_params)
        rows.append(CapacityRow(
            word_count=count, target_text=text, n_attacked=len(fits),
            structural_failures=structural,
            successes={c.label: c.successes for c in evaluation.cells},
            mean_final_loss=float(np.mean([results[n].loss_history[-1]
                                           for n in fits])),
            capacity_flag=structural > 0))
    losses = [r.mean_final_loss for r in rows if r.mean_final_loss is not None]
    if any(b < a - 1e-9 for a, b in zip(losses, losses[1:])):
        warnings.warn("final loss not monotone over word counts: %s" % losses)
    return CapacityTable(cell_labels=grid.labels, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Latent vs waveform at matched SNR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple          # (label, asr_latent, asr_waveform, winner)
    snr_pairs: tuple     # (carrier, snr_latent_db, snr_waveform_db)
    latent: GridEvaluation
    waveform: GridEvaluation


def compare_latent_waveform(scenario: ScenarioSpec, cfg: AttackConfig, codec,
                            victim, grid: EvalGrid, search_range,
                            waveforms: dict | None = None,
                            transcoders: dict | None = None,
                            toy_params: ToyLossyCodecParams | None = None,
                            match_kwargs: dict | None = None) -> ComparisonReport:
    """Latent attack vs waveform baseline at SNR-matched budgets.

    Per carrier: run the latent attack, bisect the waveform budget until the
    perturbation SNR matches, run the waveform attack, then evaluate both
    result sets on the same grid. Calibration failures abort with the
    calibration diagnostics.
    """
    if waveforms is None:
        waveforms = carrier_waveforms(scenario, codec.native_sample_rate_hz)
    match_kwargs = dict(match_kwargs or {})
    latent_results, waveform_results, snr_pairs = {}, {}, []
    for index, c in enumerate(scenario.carriers):
        per_cfg = replace(cfg, seed=cfg.seed + index)
        target = make_target(scenario.targets[c.name])
        carrier = waveforms[c.name]
        latent = run_latent_attack(carrier, target, codec, victim, per_cfg,
                                   transcoders=transcoders, toy_params=toy_params)
        eps_w = snr_match_budget(latent, carrier, target, victim, search_range,
                                 transcoders=transcoders, toy_params=toy_params,
                                 **match_kwargs)
        wf_cfg = replace(per_cfg, domain="waveform", epsilon=eps_w, alpha=None)
        wf = run_waveform_attack(carrier, target, victim, wf_cfg,
                                 transcoders=transcoders, toy_params=toy_params)
        latent_results[c.name] = latent
        waveform_results[c.name] = wf
        snr_pairs.append((c.name, latent.clean_channel_snr_db,
                          wf.clean_channel_snr_db))
    ev_latent = evaluate_grid(latent_results, scenario, grid, victim,
                              transcoders, toy_params)
    ev_waveform = evaluate_grid(waveform_results, scenario, grid, victim,
                                transcoders, toy_params)
    rows = []
    for a, b in pair_cells(ev_latent.cells, ev_waveform.cells):
        winner = "tie" if a.asr == b.asr else ("latent" if a.asr > b.asr
                                               else "waveform")
        rows.append((a.label, a.asr, b.asr, winner))
    return ComparisonReport(rows=tuple(rows), snr_pairs=tuple(snr_pairs),
                            latent=ev_latent, waveform=ev_waveform)


# ---------------------------------------------------------------------------
# Quality aggregation
# ---------------------------------------------------------------------------

def quality_table(reports) -> dict:
    """Mean and population std per metric over AudioQualityReports."""
    reports = list(reports)
    if not reports:
        raise ValueError("no quality reports to aggregate")
    keys = list(reports[0].as_dict())
    out = {}
    for key in keys:
        values = np.array([r.as_dict()[key] for r in reports], dtype=np.float64)
        out[key] = (float(values.mean()), float(values.std()))
    return out


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    run_id: str
    scenario_name: str
    config: dict
    grid_labels: tuple
    outcomes: dict
    cells: tuple
    quality: dict | None
    created_utc: str
    tool_version: str
    git_rev: str

    def __post_init__(self):
        for carrier, per_cell in self.outcomes.items():
            missing = [l for l in self.grid_labels if l not in per_cell]
            if missing:
                raise ValueError("carrier %r missing outcomes for %s"
                                 % (carrier, missing))


def _git_rev() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def make_run_record(run_id: str, scenario: ScenarioSpec, config: dict,
                    evaluation: GridEvaluation,
                    quality: dict | None = None) -> RunRecord:
    return RunRecord(
        run_id=run_id, scenario_name=scenario.name, config=dict(config),
        grid_labels=tuple(c.label for c in evaluation.cells),
        outcomes=evaluation.outcomes, cells=evaluation.cells, quality=quality,
        created_utc=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        tool_version=__version__, git_rev=_git_rev())


def cells_to_csv(path, cells) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "n", "successes", "excluded", "asr",
                         "ci_low", "ci_high"])
        for c in cells:
            writer.writerow([c.label, c.n, c.successes, c.excluded,
                             repr(c.asr), repr(c.ci_low), repr(c.ci_high)])


def ablation_to_csv(path, report: AblationReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "asr_full", "asr_clean_only", "delta"])
        for label, a, b, d in report.rows:
            writer.writerow([label, repr(a), repr(b), repr(d)])


def comparison_to_csv(path, report: ComparisonReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "asr_latent", "asr_waveform", "winner"])
        for label, a, b, winner in report.rows:
            writer.writerow([label, repr(a), repr(b), winner])


def capacity_to_csv(path, table: CapacityTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["word_count", "n_attacked", "structural_failures",
                         "capacity_flag", "mean_final_loss"]
                        + ["successes_%s" % l for l in table.cell_labels])
        for row in table.rows:
            loss = "" if row.mean_final_loss is None else repr(row.mean_final_loss)
            writer.writerow([row.word_count, row.n_attacked,
                             row.structural_failures, int(row.capacity_flag),
                             loss]
                            + [row.successes[l] for l in table.cell_labels])


def save_run_record(record: RunRecord, runs_root, adversarial: dict | None = None,
                    extra_tables: dict | None = None) -> dict:
    """Persist one run: record.json, tables/*.csv, optional audio/*.wav.

    extra_tables maps a table name to a writer callable taking the path.
    Returns the paths written.
    """
    import pathlib

    root = pathlib.Path(runs_root) / record.run_id
    (root / "tables").mkdir(parents=True, exist_ok=True)
    paths = {"record": root / "record.json"}
    payload = {
        "run_id": record.run_id, "scenario": record.scenario_name,
        "config": record.config, "grid": list(record.grid_labels),
        "outcomes": record.outcomes,
        "cells": [{"label": c.label, "n": c.n, "successes": c.successes,
                   "excluded": c.excluded, "asr": c.asr,
                   "ci_low": c.ci_low, "ci_high": c.ci_high}
                  for c in record.cells],
        "quality": record.quality, "created_utc": record.created_utc,
        "tool_version": record.tool_version, "git_rev": record.git_rev,
    }
    with open(paths["record"], "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["cells"] = root / "tables" / "cells.csv"
    cells_to_csv(paths["cells"], record.cells)
    for name, write in (extra_tables or {}).items():
        paths[name] = root / "tables" / ("%s.csv" % name)
        write(paths[name])
    if adversarial:
        (root / "audio").mkdir(exist_ok=True)
        for name, w in adversarial.items():
            paths["audio_%s" % name] = root / "audio" / ("%s.wav" % name)
            audio.save_wav(w, paths["audio_%s" % name])
    return paths


def load_run_record(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
