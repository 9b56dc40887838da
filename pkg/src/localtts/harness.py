"""Experiment orchestration and deterministic reporting.

Four experiment kinds share one entry point:

  theory   closed-form patch-economy report, Monte Carlo cross-check, and
           the best-of-N saturation curve
  testbed  end-to-end localized refinement on defect-injected samples
  scaling  localized search versus best-of-N over a candidate-count grid
  maskgen  standalone mask generation from an attention interchange file

Per-trial randomness is derived from the master seed by spawn keys, trials
are sharded across workers in fixed chunks, and results are merged in trial
order, so report bodies are byte-identical for any worker count. Reports
carry no timestamps; CSV files use '.' decimals and a fixed column order.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import binomtest

from . import attention as attn
from .config import ConfigError, ExperimentConfig
from .resample import ResampleConfig, localized_resample
from .search import (
    SweepSettings,
    attention_mask_source,
    crossover_summary,
    defect_injecting_sampler,
    oracle_mask_source,
    summarize_sweep,
    sweep_trial,
)
from .testbed import CosineSchedule, NoisePredictor, PatchWorld, verifier_score
from .theory import (
    InfeasibleParameterError,
    bon_curve,
    budget_gains,
    classify_regime,
    dominance_check,
    expected_selection_stats,
    per_trial_gains,
    precision_floor,
    required_recall,
    simulate_patch_economy,
    sparse_dominance_approx,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

_TRIAL_STREAM = 0
_SIM_STREAM = 1
_BON_STREAM = 2


def trial_seed(master_seed: int, index: int, stream: int = _TRIAL_STREAM) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(stream, index))


def _trial_chunk(args):
    fn, payload, master_seed, stream, start, stop = args
    return start, [fn(payload, trial_seed(master_seed, idx, stream))
                   for idx in range(start, stop)]


def run_trials(fn: Callable, payload, trials: int, master_seed: int,
               workers: int = 1, stream: int = _TRIAL_STREAM) -> list:
    """Run fn(payload, seed_sequence) for each trial index, in order.

    Every trial gets its own counter-derived seed, so the result list does
    not depend on how the trials are sharded across workers.
    """
    if workers <= 1 or trials == 1:
        return [fn(payload, trial_seed(master_seed, idx, stream)) for idx in range(trials)]
    chunk = max(1, -(-trials // (workers * 4)))
    tasks = [(fn, payload, master_seed, stream, start, min(start + chunk, trials))
             for start in range(0, trials, chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_trial_chunk, tasks))
    results = []
    for _, rows in sorted(parts, key=lambda item: item[0]):
        results.extend(rows)
    return results


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    return mean, float(values.std(ddof=1) / np.sqrt(values.size))


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

def run_theory(cfg: ExperimentConfig) -> tuple[dict, dict]:
    econ, stats = cfg.economy, cfg.mask_stats
    opts = cfg.theory_options
    e_tp, e_sel, e_fp = expected_selection_stats(stats, econ.defects)
    gain_global, gain_local = per_trial_gains(econ, stats)
    bud_global, bud_local = budget_gains(econ, stats)
    holds, margin = dominance_check(econ, stats)
    flags = classify_regime(econ, stats)
    closed = {
        "expected_true_positives": e_tp,
        "expected_selected": e_sel,
        "expected_false_positives": e_fp,
        "per_trial_gain_global": gain_global,
        "per_trial_gain_local": gain_local,
        "budget_gain_global": bud_global,
        "budget_gain_local": bud_local,
        "dominance_holds": holds,
        "dominance_margin": margin,
        "precision_floor": precision_floor(
            econ.repair_prob_local, econ.repair_gain,
            econ.harm_prob_local, econ.harm_loss),
        "sparse_regime_approx_holds": sparse_dominance_approx(econ, stats),
        "regime_flags": {
            "dense_defects": flags.dense_defects,
            "low_precision": flags.low_precision,
            "weak_local_repair": flags.weak_local_repair,
        },
    }
    try:
        req = required_recall(econ, stats.precision)
        closed["required_recall"] = req.raw
        closed["required_recall_clamped"] = req.clamped
    except InfeasibleParameterError as exc:
        closed["required_recall"] = None
        closed["required_recall_error"] = str(exc)

    results = {"closed_form": closed}
    files: dict[str, str] = {}

    mc_trials = opts["mc_trials"]
    if mc_trials > 0:
        sim = simulate_patch_economy(
            econ, stats, mc_trials, trial_seed(cfg.master_seed, 0, _SIM_STREAM),
            repair_dist=opts["repair_dist"], harm_dist=opts["harm_dist"],
            workers=cfg.workers)
        results["monte_carlo"] = {
            "trials": sim.trials,
            "gain_global_mean": sim.gain_global_mean,
            "gain_global_se": sim.gain_global_se,
            "gain_local_mean": sim.gain_local_mean,
            "gain_local_se": sim.gain_local_se,
            "tp_mean": sim.tp_mean, "tp_se": sim.tp_se,
            "selected_mean": sim.selected_mean, "selected_se": sim.selected_se,
            "fp_mean": sim.fp_mean, "fp_se": sim.fp_se,
        }
        rows = [
            ("expected_true_positives", e_tp, sim.tp_mean, sim.tp_se),
            ("expected_selected", e_sel, sim.selected_mean, sim.selected_se),
            ("expected_false_positives", e_fp, sim.fp_mean, sim.fp_se),
            ("per_trial_gain_global", gain_global, sim.gain_global_mean, sim.gain_global_se),
            ("per_trial_gain_local", gain_local, sim.gain_local_mean, sim.gain_local_se),
        ]
        files["economy_mc.csv"] = render_csv(
            ["quantity", "closed_form", "estimate", "stderr"], rows)

    curve = bon_curve(opts["bon_repair_prob_one"], econ, opts["bon_n_max"])
    results["bon"] = {
        "repair_prob_one": opts["bon_repair_prob_one"],
        "first_decline": curve.first_decline,
    }
    files["bon_curve.csv"] = render_csv(
        ["n", "repair_prob", "normalized_gain"],
        [(p.n, p.repair_prob, p.normalized_gain) for p in curve.points])
    return results, files


# ---------------------------------------------------------------------------
# testbed
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestbedSettings:
    world: PatchWorld
    schedule: CosineSchedule
    resample: ResampleConfig
    defect_count: int
    defect_magnitude: float
    gain_pos: float
    gain_neg: float
    noise_sd: float
    mask_weight: float
    mask_ratio: float
    oracle_masks: bool
    randomize_defects: bool


def testbed_trial(settings: TestbedSettings, seed_seq: np.random.SeedSequence) -> tuple:
    """One refinement trial: sample, injure, mask, refine, score."""
    rng = np.random.default_rng(seed_seq)
    predictor = NoisePredictor(world=settings.world, schedule=settings.schedule)
    sampler = defect_injecting_sampler(settings.defect_count, settings.defect_magnitude,
                                       randomize=settings.randomize_defects)
    anchor, true_set = sampler(predictor, rng)
    if settings.oracle_masks:
        mask = oracle_mask_source(settings.world)(anchor, true_set, rng)
    else:
        source = attention_mask_source(
            settings.world, gain_pos=settings.gain_pos, gain_neg=settings.gain_neg,
            noise_sd=settings.noise_sd, weight=settings.mask_weight,
            ratio=settings.mask_ratio)
        mask = source(anchor, true_set, rng)
    anchor_score = float(verifier_score(settings.world, anchor))
    refined, refined_score = localized_resample(
        predictor, anchor, mask,
        settings.resample, lambda s: verifier_score(settings.world, s), rng)
    selected = set(mask.selected.tolist())
    truth = set(int(j) for j in true_set)
    tp = len(selected & truth)
    recall = tp / len(truth) if truth else 1.0
    precision = tp / len(selected) if selected else 0.0
    return (anchor_score, float(refined_score), float(refined_score) - anchor_score,
            recall, precision, predictor.nfe)


def run_testbed(cfg: ExperimentConfig) -> tuple[dict, dict]:
    settings = TestbedSettings(
        world=cfg.world, schedule=cfg.schedule, resample=cfg.resample,
        defect_count=cfg.defects[0], defect_magnitude=cfg.defects[1],
        gain_pos=cfg.attention["gain_pos"], gain_neg=cfg.attention["gain_neg"],
        noise_sd=cfg.attention["noise_sd"], mask_weight=cfg.attention["weight"],
        mask_ratio=cfg.attention["ratio"], oracle_masks=cfg.attention["oracle_masks"],
        randomize_defects=cfg.defects[2],
    )
    rows = run_trials(testbed_trial, settings, cfg.trials, cfg.master_seed, cfg.workers)
    improvements = np.array([row[2] for row in rows])
    mean, stderr = _mean_stderr(improvements)
    positives = int(np.sum(improvements > 0))
    sign_p = float(binomtest(positives, improvements.size, 0.5,
                             alternative="greater").pvalue)
    results = {
        "trials": cfg.trials,
        "mean_improvement": mean,
        "stderr_improvement": stderr,
        "positive_fraction": positives / improvements.size,
        "sign_test_p_greater": sign_p,
        "mean_mask_recall": float(np.mean([row[3] for row in rows])),
        "mean_mask_precision": float(np.mean([row[4] for row in rows])),
        "nfe_per_trial": rows[0][5],
    }
    csv_rows = [(idx, *row) for idx, row in enumerate(rows)]
    files = {"trials.csv": render_csv(
        ["trial", "anchor_score", "refined_score", "improvement",
         "mask_recall", "mask_precision", "nfe"], csv_rows)}
    return results, files


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def run_scaling(cfg: ExperimentConfig) -> tuple[dict, dict]:
    settings: SweepSettings = cfg.sweep
    trial_results = run_trials(sweep_trial, settings, cfg.trials,
                               cfg.master_seed, cfg.workers)
    rows = summarize_sweep(settings, trial_results)
    reference_n = cfg.resolved["search"]["reference_n"]
    summary = crossover_summary(settings, rows, reference_n)
    results = {
        "trials": cfg.trials,
        "crossover": summary,
        "rows": [
            {"method": r.method, "n": r.n, "nfe": r.nfe,
             "mean_score": r.mean_score, "stderr": r.stderr}
            for r in rows
        ],
    }
    files = {"scaling.csv": render_csv(
        ["method", "n", "nfe", "mean_score", "stderr", "trials"],
        [(r.method, r.n, r.nfe, r.mean_score, r.stderr, r.trials) for r in rows])}
    return results, files


# ---------------------------------------------------------------------------
# maskgen
# ---------------------------------------------------------------------------

def _load_json(path_text: str, base_dir: Optional[Path]) -> dict:
    path = Path(path_text)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"maskgen: file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"maskgen: invalid JSON in {path}: {exc}"])


def run_maskgen(cfg: ExperimentConfig, base_dir: Optional[Path] = None) -> tuple[dict, dict]:
    doc = cfg.maskgen
    try:
        if doc.get("bundle") is not None:
            bundle = attn.bundle_from_document(doc["bundle"])
        elif doc.get("bundle_path") is not None:
            bundle = attn.bundle_from_document(_load_json(doc["bundle_path"], base_dir))
        else:
            raw_docs = doc.get("raw")
            if raw_docs is None:
                raw_docs = {key: _load_json(path, base_dir)
                            for key, path in doc["raw_paths"].items()}
            missing = [key for key in ("orig", "pos", "neg") if key not in raw_docs]
            if missing:
                raise ConfigError([f"maskgen.raw: missing field(s) {missing}"])
            fields = {key: attn.field_from_raw_document(raw_docs[key])
                      for key in ("orig", "pos", "neg")}
            bundle = attn.AttentionBundle(**fields)
        queries = doc.get("queries")
        if queries is None and doc.get("queries_path") is not None:
            queries = _load_json(doc["queries_path"], base_dir)
        if queries is not None:
            mask = attn.mask_gen(bundle, np.asarray(queries, dtype=float),
                                 doc["weight"], doc["ratio"])
        else:
            # no queries: skip propagation (identity smoothing)
            quality = attn.reweight(attn.contrastive_difference(bundle),
                                    bundle.orig, doc["weight"])
            mask = attn.threshold_mask(quality, doc["ratio"])
    except ValueError as exc:
        raise ConfigError([f"maskgen: {exc}"])
    mask_doc = attn.mask_to_document(mask)
    results = {
        "grid": mask_doc["grid"],
        "ratio": mask_doc["ratio"],
        "selected": int(np.sum(mask.bits)),
    }
    files = {"mask.json": json.dumps(mask_doc, sort_keys=True, indent=2) + "\n"}
    return results, files


# ---------------------------------------------------------------------------
# dispatch and reporting
# ---------------------------------------------------------------------------

def render_csv(header: list[str], rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(cell) for cell in row])
    return buffer.getvalue()


def _csv_cell(cell):
    if isinstance(cell, (np.floating, np.integer)):
        cell = cell.item()
    return cell


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path,
                   overrides: Optional[list[str]] = None,
                   base_dir: Optional[Path] = None) -> dict:
    """Run the configured experiment and write its report files.

    Writes report.json (resolved config, warnings, results) plus the
    kind-specific CSV/JSON artifacts into out_dir; returns the report dict.
    """
    runners = {
        "theory": lambda: run_theory(cfg),
        "testbed": lambda: run_testbed(cfg),
        "scaling": lambda: run_scaling(cfg),
        "maskgen": lambda: run_maskgen(cfg, base_dir),
    }
    results, files = runners[cfg.kind]()
    report = {
        "kind": cfg.kind,
        "config": cfg.resolved,
        "overrides": list(overrides or []),
        "warnings": list(cfg.warnings),
        "results": results,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    for name, text in files.items():
        (out_dir / name).write_text(text)
    return report
