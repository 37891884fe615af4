"""Command-line front end.

One subcommand per experiment: train the toy stack, run a single attack,
evaluate over a channel grid, the two ablations, the latent-vs-waveform
comparison, post-hoc analyses on a saved attack bundle, and a markdown
report for a finished run. Every command honors --seed, --out-dir and
--no-external-codecs; config files are YAML with dotted-key --set
overrides. Exit codes: 0 success, 2 config or usage error, 3 runtime
failure.
"""

from __future__ import annotations

import json
import pathlib
import sys
import time
from dataclasses import replace

import click
import numpy as np
import torch
import yaml

from . import __version__, analysis, audio, harness, latentcodec, synth
from . import victim as victim_mod
from .attack import (AttackConfig, AttackDivergedError, CalibrationError,
                     config_from_dict, config_to_dict, run_latent_attack,
                     run_waveform_attack, write_result_bundle)
from .channels import (DEFAULT_TRANSCODERS, ChannelError, CodecChannelSpec,
                       load_transcoder_config)
from .harness import EvalGrid
from .victim import make_target

EXTERNAL_FAMILIES = tuple(sorted(DEFAULT_TRANSCODERS))
NO_EXTERNAL_NOTE = "external codec cells (%s) removed: --no-external-codecs" \
    % ", ".join(EXTERNAL_FAMILIES)
ANALYSES = ("bark", "survival", "envelope", "three-trace", "residual")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_doc(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise click.UsageError("config must be a YAML mapping: %s" % path)
    return doc


def _apply_overrides(doc: dict, pairs) -> dict:
    """Dotted-key overrides, e.g. --set attack.steps=10; values are parsed
    as YAML so numbers and lists come through typed."""
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise click.UsageError("--set expects KEY=VALUE, got %r" % pair)
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise click.UsageError("--set %s: %r is not a mapping" % (key, part))
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw) if raw else None
    return doc


def config_from_dict_or_usage(block) -> AttackConfig:
    try:
        return config_from_dict(block)
    except (ValueError, TypeError) as err:
        raise click.UsageError("bad attack config: %s" % err)


def _attack_config(doc: dict, seed: int | None) -> AttackConfig:
    cfg = config_from_dict_or_usage(doc.get("attack", {}))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _build_stack(doc: dict, no_external: bool):
    """Codec + victim from the checkpoints block (fresh seeded toys when
    absent), plus the transcoder registry."""
    ckpts = doc.get("checkpoints") or {}
    codec_path, victim_path = ckpts.get("codec"), ckpts.get("victim")
    for label, p in (("codec", codec_path), ("victim", victim_path)):
        if p is not None and not pathlib.Path(p).exists():
            raise click.UsageError("%s checkpoint not found: %s" % (label, p))
    if codec_path is not None:
        codec = latentcodec.load_toy_codec(codec_path)
    else:
        codec = latentcodec.ToyLatentCodec(seed=0)
    if victim_path is not None:
        victim = victim_mod.load_toy_victim(victim_path)
    else:
        victim = victim_mod.ToyTokenVictim(seed=1)
        victim.eval()
    if no_external:
        transcoders = {}
    elif doc.get("transcoders"):
        path = doc["transcoders"]
        if not pathlib.Path(path).exists():
            raise click.UsageError("transcoder config not found: %s" % path)
        transcoders = load_transcoder_config(path)
    else:
        transcoders = DEFAULT_TRANSCODERS
    return codec, victim, transcoders


def _build_grid(doc: dict, no_external: bool):
    """Grid from the config block; returns (grid, header notes)."""
    block = doc.get("grid") or {}
    kind = block.get("kind", "toy")
    try:
        if kind == "toy":
            grid = EvalGrid.toy_grid(tuple(block["bitrates"])
                                     if "bitrates" in block else (16, 24, 32, 64, 128))
        elif kind == "paper":
            grid = EvalGrid.paper_grid()
        else:
            raise click.UsageError("grid kind must be toy or paper, got %r" % kind)
    except ValueError as err:
        raise click.UsageError("bad grid: %s" % err)
    notes = []
    if no_external:
        kept = tuple(c for c in grid.cells if c.family not in EXTERNAL_FAMILIES)
        if len(kept) != len(grid.cells):
            grid = EvalGrid(kept)
            notes.append(NO_EXTERNAL_NOTE)
    return grid, notes


def _scenario_of(doc: dict) -> harness.ScenarioSpec:
    block = doc.get("scenario")
    if block is None:
        raise click.UsageError("config needs a scenario block or path")
    try:
        if isinstance(block, str):
            if not pathlib.Path(block).exists():
                raise click.UsageError("scenario file not found: %s" % block)
            return harness.load_scenario(block)
        return harness.parse_scenario(block)
    except ValueError as err:
        raise click.UsageError("bad scenario: %s" % err)


def _load_carriers(scenario, rate: int) -> dict:
    for c in scenario.carriers:
        if c.path is not None and not pathlib.Path(c.path).exists():
            raise click.UsageError("carrier file not found: %s" % c.path)
    return harness.carrier_waveforms(scenario, rate)


def _runtime_fail(err) -> None:
    click.echo("error: %s" % err, err=True)
    sys.exit(3)


def _markdown_table(headers, rows) -> str:
    lines = ["| " + " | ".join(str(h) for h in headers) + " |",
             "| " + " | ".join("---" for _ in headers) + " |"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _cells_markdown(cells) -> str:
    """One column per grid cell, metrics as rows (single-cell grids render
    as a single data column)."""
    headers = ["metric"] + [c.label for c in cells]
    rows = [["asr"] + ["%.3f" % c.asr for c in cells],
            ["successes"] + [c.successes for c in cells],
            ["n"] + [c.n for c in cells],
            ["excluded"] + [c.excluded for c in cells],
            ["ci95"] + ["[%.3f, %.3f]" % (c.ci_low, c.ci_high) for c in cells]]
    return _markdown_table(headers, rows)


def _write_doc(path, title: str, notes, body: str) -> str:
    text = "# %s\n\n" % title
    for note in notes:
        text += "%s\n" % note
    if notes:
        text += "\n"
    text += body + "\n"
    pathlib.Path(path).write_text(text)
    return text


def _run_root(out_dir, run_id: str) -> pathlib.Path:
    root = pathlib.Path(out_dir) / run_id
    (root / "tables").mkdir(parents=True, exist_ok=True)
    return root


def _quality_reports(codec, waveforms: dict, results: dict) -> dict:
    reports = []
    for name in sorted(waveforms):
        w = waveforms[name]
        rt = latentcodec.decode(codec, latentcodec.encode(codec, w))
        rt = audio.Waveform(rt.samples[:w.n_samples], rt.sample_rate_hz)
        reports.append(audio.quality_report(w, rt, results[name].adversarial))
    return harness.quality_table(reports)


def _common_options(fn):
    fn = click.option("--jobs", type=int, default=1, show_default=True,
                      help="Worker threads for grid evaluation.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted-key config override, repeatable.")(fn)
    fn = click.option("--no-external-codecs", is_flag=True,
                      help="Drop opus/mp3/aac cells from grids.")(fn)
    fn = click.option("--out-dir", default="runs", show_default=True,
                      type=click.Path(file_okay=False),
                      help="Root directory for run outputs.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    return fn


# ---------------------------------------------------------------------------
# Group
# ---------------------------------------------------------------------------

@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="codecraid")
def main():
    """Latent-space audio attacks that survive lossy codecs: training,
    attacks, grid evaluation, ablations and diagnostics."""


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@main.command("train-toycodec")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="runs", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--no-external-codecs", is_flag=True,
              help="Accepted everywhere; training never uses external codecs.")
@click.option("--steps", type=int, default=600, show_default=True)
@click.option("--clips", type=int, default=100, show_default=True)
def cmd_train_toycodec(seed, out_dir, no_external_codecs, steps, clips):
    """Train the toy latent codec and save its checkpoint."""
    t0 = time.perf_counter()
    codec, history = latentcodec.train_toy_codec(seed=seed, n_clips=clips,
                                                 steps=steps)
    path = pathlib.Path(out_dir) / "checkpoints" / "toy_codec.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    latentcodec.save_toy_codec(codec, path, extra={
        "val_snr_untrained_db": history["val_snr_untrained_db"],
        "val_snr_trained_db": history["val_snr_trained_db"]})
    click.echo("held-out round-trip SNR: %.2f dB untrained, %.2f dB trained"
               % (history["val_snr_untrained_db"], history["val_snr_trained_db"]))
    click.echo("checkpoint: %s (%.1f s)" % (path, time.perf_counter() - t0))


@main.command("train-victim")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="runs", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--no-external-codecs", is_flag=True,
              help="Accepted everywhere; training never uses external codecs.")
@click.option("--steps", type=int, default=600, show_default=True)
@click.option("--pairs", type=int, default=192, show_default=True)
def cmd_train_victim(seed, out_dir, no_external_codecs, steps, pairs):
    """Train the toy transcription victim and save its checkpoint."""
    t0 = time.perf_counter()
    victim, history = victim_mod.train_toy_victim(seed=seed, n_pairs=pairs,
                                                  steps=steps)
    path = pathlib.Path(out_dir) / "checkpoints" / "toy_victim.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    victim_mod.save_toy_victim(victim, path, extra={
        "val_token_acc_trained": history["val_token_acc_trained"],
        "val_exact_match": history["val_exact_match"]})
    click.echo("held-out token accuracy: %.3f untrained, %.3f trained; "
               "exact match %.3f"
               % (history["val_token_acc_untrained"],
                  history["val_token_acc_trained"],
                  history["val_exact_match"]))
    click.echo("checkpoint: %s (%.1f s)" % (path, time.perf_counter() - t0))


# ---------------------------------------------------------------------------
# Attack
# ---------------------------------------------------------------------------

def _attack_carrier(doc: dict, rate: int):
    """Carrier waveform for an attack manifest: a WAV path or an inline
    synthesize block. Returns (waveform, provenance dict for the bundle)."""
    path, block = doc.get("carrier"), doc.get("synthesize")
    if path is not None:
        if not pathlib.Path(path).exists():
            raise click.UsageError("carrier file not found: %s" % path)
        w = audio.load_wav(path)
        if w.sample_rate_hz != rate:
            w = audio.resample(w, rate)
        return w, {"carrier_path": str(path)}
    if block is not None:
        kind = block.get("class", "speech")
        try:
            w = synth.carrier_clip(kind=kind, rate=rate,
                                   duration_s=float(block.get("duration_s", 2.0)),
                                   seed=int(block.get("seed", 0)))
        except ValueError as err:
            raise click.UsageError("bad synthesize block: %s" % err)
        return w, {"synthesize": dict(block)}
    raise click.UsageError("attack config needs a carrier path or a "
                           "synthesize block")


@main.command("attack")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_common_options
def cmd_attack(config_path, seed, out_dir, no_external_codecs, overrides, jobs):
    """Run one attack from a manifest and save the result bundle."""
    doc = _apply_overrides(_load_doc(config_path), overrides)
    if "target_text" not in doc:
        raise click.UsageError("attack config needs target_text")
    try:
        target = make_target(str(doc["target_text"]))
    except ValueError as err:
        raise click.UsageError("bad target: %s" % err)
    cfg = config_from_dict_or_usage(doc.get("config", {}))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if no_external_codecs and cfg.channel_family in EXTERNAL_FAMILIES:
        raise click.UsageError("--no-external-codecs conflicts with channel "
                               "family %r" % cfg.channel_family)
    codec, victim, transcoders = _build_stack(doc, no_external_codecs)
    carrier, provenance = _attack_carrier(doc, codec.native_sample_rate_hz)
    run_id = doc.get("run_id") or "attack"
    root = pathlib.Path(out_dir) / str(run_id)

    t0 = time.perf_counter()
    try:
        if cfg.domain == "latent":
            result = run_latent_attack(carrier, target, codec, victim, cfg,
                                       transcoders=transcoders)
        else:
            result = run_waveform_attack(carrier, target, victim, cfg,
                                         transcoders=transcoders)
    except AttackDivergedError as err:
        root.mkdir(parents=True, exist_ok=True)
        dump_path = root / "state_dump.json"
        with open(dump_path, "w") as fh:
            json.dump(err.state_dump, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        click.echo("attack diverged: %s" % str(err).splitlines()[0], err=True)
        click.echo("state dump: %s" % dump_path, err=True)
        sys.exit(3)
    except (ChannelError, CalibrationError) as err:
        _runtime_fail(err)

    extra = dict(provenance)
    extra["target_text"] = target.target_text
    if doc.get("checkpoints"):
        extra["checkpoints"] = dict(doc["checkpoints"])
    write_result_bundle(result, root, extra=extra)
    click.echo("final loss %.6f | clean-channel SNR %.2f dB | %.1f s"
               % (result.loss_history[-1], result.clean_channel_snr_db,
                  time.perf_counter() - t0))
    click.echo("bundle: %s" % root)


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------

@main.command("eval")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--strict", is_flag=True,
              help="Count channel failures as misses instead of excluding them.")
@_common_options
def cmd_eval(config_path, seed, out_dir, no_external_codecs, overrides, jobs,
             strict):
    """Attack every scenario carrier and score the grid."""
    doc = _apply_overrides(_load_doc(config_path), overrides)
    scenario = _scenario_of(doc)
    cfg = _attack_config(doc, seed)
    grid, notes = _build_grid(doc, no_external_codecs)
    codec, victim, transcoders = _build_stack(doc, no_external_codecs)
    waveforms = _load_carriers(scenario, codec.native_sample_rate_hz)
    run_id = str(doc.get("run_id") or ("eval-%s" % scenario.name))

    t0 = time.perf_counter()
    try:
        results = harness.attack_scenario(waveforms, scenario, cfg, codec,
                                          victim, transcoders)
        evaluation = harness.evaluate_grid(results, scenario, grid, victim,
                                           transcoders, strict=strict,
                                           jobs=jobs)
    except (AttackDivergedError, ChannelError, CalibrationError) as err:
        _runtime_fail(err)

    quality = _quality_reports(codec, waveforms, results)
    record = harness.make_run_record(
        run_id, scenario, config={"attack": config_to_dict(cfg),
                                  "grid": list(grid.labels),
                                  "strict": strict,
                                  "no_external_codecs": no_external_codecs},
        evaluation=evaluation, quality=quality)
    paths = harness.save_run_record(
        record, out_dir,
        adversarial={n: r.adversarial for n, r in results.items()})
    root = pathlib.Path(paths["record"]).parent
    text = _write_doc(root / "tables" / "cells.md",
                      "Grid evaluation: %s" % run_id,
                      ["scenario: %s" % scenario.name] + notes,
                      _cells_markdown(evaluation.cells))
    click.echo(text)
    click.echo("run dir: %s (%.1f s)" % (root, time.perf_counter() - t0))


# ---------------------------------------------------------------------------
# Ablations and comparisons
# ---------------------------------------------------------------------------

@main.command("ablate-eot")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_common_options
def cmd_ablate_eot(config_path, seed, out_dir, no_external_codecs, overrides,
                   jobs):
    """Attack with and without the codec-EoT stage, same seeds."""
    doc = _apply_overrides(_load_doc(config_path), overrides)
    scenario = _scenario_of(doc)
    cfg = _attack_config(doc, seed)
    grid, notes = _build_grid(doc, no_external_codecs)
    codec, victim, transcoders = _build_stack(doc, no_external_codecs)
    waveforms = _load_carriers(scenario, codec.native_sample_rate_hz)
    run_id = str(doc.get("run_id") or ("ablate-eot-%s" % scenario.name))
    root = _run_root(out_dir, run_id)

    try:
        report = harness.ablate_eot(scenario, cfg, codec, victim, grid,
                                    waveforms=waveforms,
                                    transcoders=transcoders)
    except (AttackDivergedError, ChannelError, CalibrationError) as err:
        _runtime_fail(err)

    harness.ablation_to_csv(root / "tables" / "ablation.csv", report)
    harness.cells_to_csv(root / "tables" / "full_cells.csv", report.full.cells)
    harness.cells_to_csv(root / "tables" / "ablated_cells.csv",
                         report.ablated.cells)
    body = _markdown_table(
        ["cell", "asr full", "asr clean-only", "delta"],
        [(label, "%.3f" % a, "%.3f" % b, "%+.3f" % d)
         for label, a, b, d in report.rows])
    text = _write_doc(root / "tables" / "ablation.md",
                      "EoT ablation: %s" % run_id,
                      ["scenario: %s" % scenario.name] + notes, body)
    click.echo(text)
    click.echo("run dir: %s" % root)


@main.command("capacity")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_common_options
def cmd_capacity(config_path, seed, out_dir, no_external_codecs, overrides,
                 jobs):
    """Sweep target word counts against fixed carriers."""
    doc = _apply_overrides(_load_doc(config_path), overrides)
    scenario = _scenario_of(doc)
    cfg = _attack_config(doc, seed)
    grid, notes = _build_grid(doc, no_external_codecs)
    codec, victim, transcoders = _build_stack(doc, no_external_codecs)
    waveforms = _load_carriers(scenario, codec.native_sample_rate_hz)
    counts = (doc.get("capacity") or {}).get("word_counts", (1, 2, 4, 8))
    run_id = str(doc.get("run_id") or ("capacity-%s" % scenario.name))
    root = _run_root(out_dir, run_id)

    try:
        table = harness.capacity_sweep(waveforms, counts, cfg, codec, victim,
                                       grid, pool_seed=cfg.seed,
                                       transcoders=transcoders)
    except (AttackDivergedError, ChannelError, CalibrationError) as err:
        _runtime_fail(err)
    except ValueError as err:
        raise click.UsageError("bad capacity sweep: %s" % err)

    harness.capacity_to_csv(root / "tables" / "capacity.csv", table)
    headers = ["words", "attacked", "structural"] \
        + ["hits %s" % l for l in table.cell_labels]
    rows = [[r.word_count, r.n_attacked, r.structural_failures]
            + [r.successes[l] for l in table.cell_labels]
            for r in table.rows]
    text = _write_doc(root / "tables" / "capacity.md",
                      "Capacity sweep: %s" % run_id,
                      ["scenario: %s" % scenario.name] + notes,
                      _markdown_table(headers, rows))
    click.echo(text)
    click.echo("run dir: %s" % root)


@main.command("compare")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_common_options
def cmd_compare(config_path, seed, out_dir, no_external_codecs, overrides,
                jobs):
    """Latent attack vs the waveform baseline at SNR-matched budgets."""
    doc = _apply_overrides(_load_doc(config_path), overrides)
    scenario = _scenario_of(doc)
    cfg = _attack_config(doc, seed)
    grid, notes = _build_grid(doc, no_external_codecs)
    codec, victim, transcoders = _build_stack(doc, no_external_codecs)
    waveforms = _load_carriers(scenario, codec.native_sample_rate_hz)
    block = doc.get("compare") or {}
    search_range = tuple(block.get("search_range", (1e-4, 0.5)))
    match_kwargs = {k: block[k] for k in
                    ("tolerance_db", "max_iters", "probe_steps") if k in block}
    run_id = str(doc.get("run_id") or ("compare-%s" % scenario.name))
    root = _run_root(out_dir, run_id)

    try:
        report = harness.compare_latent_waveform(
            scenario, cfg, codec, victim, grid, search_range,
            waveforms=waveforms, transcoders=transcoders,
            match_kwargs=match_kwargs)
    except (AttackDivergedError, ChannelError, CalibrationError) as err:
        _runtime_fail(err)
    except ValueError as err:
        raise click.UsageError("bad comparison config: %s" % err)

    harness.comparison_to_csv(root / "tables" / "comparison.csv", report)
    harness.cells_to_csv(root / "tables" / "latent_cells.csv",
                         report.latent.cells)
    harness.cells_to_csv(root / "tables" / "waveform_cells.csv",
                         report.waveform.cells)
    # last column marks the higher ASR of each cell pair
    body = _markdown_table(
        ["cell", "asr latent", "asr waveform", "higher"],
        [(label, "%.3f" % a, "%.3f" % b, winner)
         for label, a, b, winner in report.rows])
    snr_lines = ["%s: latent %.2f dB, waveform %.2f dB" % pair
                 for pair in report.snr_pairs]
    text = _write_doc(root / "tables" / "comparison.md",
                      "Latent vs waveform: %s" % run_id,
                      ["scenario: %s" % scenario.name] + notes
                      + ["matched SNR " + line for line in snr_lines], body)
    click.echo(text)
    click.echo("run dir: %s" % root)


# ---------------------------------------------------------------------------
# Post-hoc analyses
# ---------------------------------------------------------------------------

def _bundle_carrier(echo: dict, rate: int, run: pathlib.Path):
    path, block = echo.get("carrier_path"), echo.get("synthesize")
    if path is not None:
        p = pathlib.Path(path)
        if not p.is_absolute() and not p.exists():
            p = run / p
        if not p.exists():
            raise click.UsageError("carrier file not found: %s" % path)
        w = audio.load_wav(p)
        return audio.resample(w, rate) if w.sample_rate_hz != rate else w
    if block is not None:
        return synth.carrier_clip(kind=block.get("class", "speech"), rate=rate,
                                  duration_s=float(block.get("duration_s", 2.0)),
                                  seed=int(block.get("seed", 0)))
    raise click.UsageError("bundle records no carrier; cannot rebuild it")


@main.command("analyze")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--analyses", "-a", multiple=True, type=click.Choice(ANALYSES),
              help="Which reports to emit; default all.")
@click.option("--draws", type=int, default=200, show_default=True,
              help="Random latent draws for the three-trace comparison.")
@click.option("--probe-frames", type=int, default=8, show_default=True,
              help="Latent frames to probe for the decoder envelope.")
@click.option("--sigma", type=float, default=None,
              help="Latent probe scale; default: std of the carrier latents.")
@click.option("--codec-ckpt", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Override the bundle's codec checkpoint.")
@click.option("--victim-ckpt", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Override the bundle's victim checkpoint.")
@click.option("--seed", type=int, default=None,
              help="Seed for the random draws (default: the bundle seed).")
@click.option("--out-dir", default=None, type=click.Path(file_okay=False),
              help="Default: <run_dir>/analysis.")
@click.option("--no-external-codecs", is_flag=True,
              help="Restrict survival/residual channels to the toy codec.")
def cmd_analyze(run_dir, analyses, draws, probe_frames, sigma, codec_ckpt,
                victim_ckpt, seed, out_dir, no_external_codecs):
    """Run the spectral diagnostics on a saved attack bundle."""
    run = pathlib.Path(run_dir)
    config_path = run / "config.json"
    if not config_path.exists():
        raise click.UsageError("not an attack bundle (no config.json): %s" % run)
    with open(config_path) as fh:
        echo = json.load(fh)
    cfg = config_from_dict_or_usage(echo.get("config", {}))
    selected = tuple(analyses) or ANALYSES

    ckpts = dict(echo.get("checkpoints") or {})
    if codec_ckpt:
        ckpts["codec"] = codec_ckpt
    if victim_ckpt:
        ckpts["victim"] = victim_ckpt
    codec, victim, transcoders = _build_stack(
        {"checkpoints": ckpts}, no_external_codecs)

    adversarial = audio.load_wav(run / "adversarial.wav")
    delta = np.load(run / "delta.npy")
    rate = codec.native_sample_rate_hz
    carrier = _bundle_carrier(echo, rate, run)
    bands = analysis.BarkBands.for_rate(rate)
    out = pathlib.Path(out_dir) if out_dir else run / "analysis"
    out.mkdir(parents=True, exist_ok=True)

    if cfg.domain == "latent":
        with torch.no_grad():
            x = torch.as_tensor(carrier.samples, dtype=codec.param_dtype())
            z = codec.encode_tensor(x)
            d = torch.as_tensor(delta, dtype=z.dtype)
            wave_delta = (codec.decode_tensor(z + d)
                          - codec.decode_tensor(z))[:carrier.n_samples]
        delta_wave = audio.Waveform(wave_delta.numpy().astype(np.float64), rate)
        probe_frames = min(probe_frames, int(z.shape[1]))
        if sigma is None:
            sigma = float(z.std())
    else:
        delta_wave = audio.Waveform(np.asarray(delta, dtype=np.float64), rate)
        z = None
        if sigma is None and {"envelope", "three-trace"} & set(selected):
            raise click.UsageError("waveform bundle: pass --sigma for latent "
                                   "probes")

    if cfg.channel_family in EXTERNAL_FAMILIES and no_external_codecs:
        family = "toy"
        click.echo("channel family %r needs external transcoders; using the "
                   "toy codec instead (--no-external-codecs)"
                   % cfg.channel_family)
    else:
        family = cfg.channel_family
    channel_specs = [CodecChannelSpec("identity", 64)]
    channel_specs += [CodecChannelSpec(family, b) for b in cfg.eot_grid.bitrates]

    try:
        if "bark" in selected:
            profile = analysis.bark_fractional_energy(delta_wave, bands)
            analysis.profiles_to_csv(out / "bark.csv", bands, {"delta": profile})
            analysis.write_json_report(out / "bark.json", {
                "band_edges_hz": list(bands.edges_hz),
                "fractions": list(profile.fractions),
                "zero_energy": profile.zero_energy})
            analysis.plot_band_profiles(out / "bark.png", bands,
                                        {"delta": profile},
                                        title="Perturbation energy by band")
            click.echo("bark: %d bands, sum %.6f"
                       % (bands.n_bands, sum(profile.fractions)))

        if "survival" in selected:
            profiles = [analysis.survival_profile(delta_wave, spec, carrier,
                                                  transcoders)
                        for spec in channel_specs]
            analysis.survival_to_csv(out / "survival.csv", profiles)
            analysis.plot_survival(out / "survival.png", profiles,
                                   title="Perturbation survival by region")
            click.echo("survival: %d channels" % len(profiles))

        if "envelope" in selected:
            envelope = analysis.decoder_band_envelope(codec, probe_frames,
                                                      bands, sigma)
            analysis.profiles_to_csv(
                out / "envelope.csv", bands,
                {"dim%02d" % i: p for i, p in
                 enumerate(envelope.per_dimension())})
            analysis.plot_envelope_heatmap(out / "envelope.png", envelope,
                                           bands,
                                           title="Decoder band envelope")
            click.echo("envelope: %d dimensions x %d bands"
                       % (envelope.latent_dim, bands.n_bands))

        if "three-trace" in selected:
            if cfg.domain != "latent":
                raise click.UsageError("three-trace needs a latent-domain "
                                       "bundle")
            report = analysis.three_trace_report(
                codec, delta, sigma, draws, bands, base_z=z,
                seed=cfg.seed if seed is None else seed)
            analysis.write_json_report(out / "three_trace.json",
                                       report.to_dict())
            traces = {"envelope_a": report.trace_a,
                      "random_b": report.trace_b,
                      "delta_c": report.trace_c}
            analysis.profiles_to_csv(out / "three_trace.csv", bands, traces)
            analysis.plot_band_profiles(out / "three_trace.png", bands, traces,
                                        title="Three-trace band comparison")
            gap = max(abs(a - b) for a, b in zip(report.trace_a.fractions,
                                                 report.trace_b.fractions))
            click.echo("three-trace: max |A - B| per band = %.4f (%s 0.02)"
                       % (gap, "within" if gap <= 0.02 else "OUTSIDE"))

        if "residual" in selected:
            rep = analysis.encoder_residual_report(victim, carrier,
                                                   adversarial, channel_specs,
                                                   transcoders)
            analysis.write_json_report(out / "residual.json",
                                       {"residuals": rep.as_dict()})
            click.echo("residual: " + ", ".join(
                "%s=%s" % (label, "n/a" if r is None else "%.4f" % r)
                for label, r in rep.entries))
    except (ChannelError, ValueError) as err:
        _runtime_fail(err)

    click.echo("analysis dir: %s" % out)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--seed", type=int, default=None, help="Unused; accepted "
              "for command-line symmetry.")
@click.option("--out-dir", default=None, type=click.Path(file_okay=False),
              help="Default: the run directory itself.")
@click.option("--no-external-codecs", is_flag=True,
              help="Unused; accepted for command-line symmetry.")
def cmd_report(run_dir, seed, out_dir, no_external_codecs):
    """Render a markdown report from a saved run record."""
    run = pathlib.Path(run_dir)
    record_path = run / "record.json"
    if not record_path.exists():
        raise click.UsageError("no record.json under %s" % run)
    record = harness.load_run_record(record_path)

    lines = ["# Run report: %s" % record["run_id"], "",
             "scenario: %s" % record["scenario"],
             "created: %s" % record["created_utc"],
             "tool: codecraid %s (%s)" % (record["tool_version"],
                                          record["git_rev"]), ""]
    cells = record["cells"]
    headers = ["metric"] + [c["label"] for c in cells]
    rows = [["asr"] + ["%.3f" % c["asr"] for c in cells],
            ["successes"] + [c["successes"] for c in cells],
            ["n"] + [c["n"] for c in cells],
            ["ci95"] + ["[%.3f, %.3f]" % (c["ci_low"], c["ci_high"])
                        for c in cells]]
    lines += ["## Grid", "", _markdown_table(headers, rows), ""]
    if record.get("quality"):
        qrows = [[metric, "%.3f" % mean, "%.3f" % std]
                 for metric, (mean, std) in sorted(record["quality"].items())]
        lines += ["## Audio quality", "",
                  _markdown_table(["metric", "mean", "std"], qrows), ""]
    out = pathlib.Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.md"
    path.write_text("\n".join(lines))
    click.echo("\n".join(lines))
    click.echo("report: %s" % path)


if __name__ == "__main__":
    main()
