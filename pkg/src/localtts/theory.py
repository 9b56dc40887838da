"""Patch-economy analysis of localized versus global resampling.

Closed forms for the expected selection statistics of an imperfect mask,
the per-trial and budget-normalized quality gains of the two strategies,
the dominance condition and its recall/precision thresholds, the
saturation curve of global best-of-N, and a failure-regime classifier.
``simulate_patch_economy`` is the brute-force oracle: it samples masks
achieving the requested recall/precision in expectation, applies Bernoulli
repair/harm events, and reports empirical means with standard errors so
every formula can be checked to Monte Carlo accuracy.

Precision is the ratio-of-expectations E[TP]/E[|selected|]; the simulator's
clean-patch selection probability is derived to match it exactly, and
(recall, precision, defect count) combinations that would require a
selection probability above 1 are rejected as infeasible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

_CHUNK = 4096  # fixed simulation chunk so results never depend on worker count


class InfeasibleParameterError(ValueError):
    """A parameter combination with no realizable sampling process."""


@dataclass(frozen=True)
class MaskStats:
    """Mask quality: recall in [0, 1], precision in (0, 1].

    Precision 0 is rejected: it would force either zero true positives or an
    unbounded expected selection size.
    """

    recall: float
    precision: float

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError(f"recall must lie in [0, 1], got {self.recall}")
        if not 0.0 < self.precision <= 1.0:
            raise ValueError(
                f"precision must lie in (0, 1] (the degenerate 0 case is excluded), "
                f"got {self.precision}"
            )


@dataclass(frozen=True)
class PatchEconomy:
    """Abstract repair economy over m_patches patches with ``defects`` bad ones.

    repair_gain / harm_loss are the mean weighted per-patch gain of a repair
    and loss of a harmed clean patch. repair_prob_global / repair_prob_local
    are the chances one trial repairs a touched defective patch;
    harm_prob_global / harm_prob_local the chances it harms a touched clean
    patch. cost_global / cost_local price one trial of each strategy and
    ``budget`` is the total compute available.
    """

    m_patches: int
    defects: int
    repair_gain: float
    harm_loss: float
    repair_prob_global: float
    repair_prob_local: float
    harm_prob_global: float
    harm_prob_local: float
    cost_global: float = 1.0
    cost_local: float = 1.0
    budget: float = 1.0

    def __post_init__(self):
        if self.m_patches < 1:
            raise ValueError(f"m_patches must be at least 1, got {self.m_patches}")
        if not 1 <= self.defects <= self.m_patches:
            raise ValueError(
                f"defects must lie in [1, {self.m_patches}], got {self.defects}"
            )
        if self.repair_gain < 0 or self.harm_loss < 0:
            raise ValueError("repair_gain and harm_loss must be non-negative")
        for name in ("repair_prob_global", "repair_prob_local",
                     "harm_prob_global", "harm_prob_local"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.cost_global <= 0 or self.cost_local <= 0 or self.budget <= 0:
            raise ValueError("costs and budget must be positive")


def expected_selection_stats(stats: MaskStats, defects: int) -> tuple[float, float, float]:
    """Expected (true positives, selection size, false positives).

    E[TP] = recall * s, E[|selected|] = recall * s / precision,
    E[FP] = recall * s * (1/precision - 1).
    """
    if defects < 1:
        raise ValueError(f"defect count must be at least 1, got {defects}")
    e_tp = stats.recall * defects
    e_sel = e_tp / stats.precision
    return e_tp, e_sel, e_sel - e_tp


def per_trial_gains(econ: PatchEconomy, stats: MaskStats) -> tuple[float, float]:
    """Expected quality change of one global trial and one localized trial.

    global: s * theta_g * gain - (M - s) * h_g * loss
    local:  rho s q * gain - rho s (1/pi - 1) * h_l * loss
    """
    clean = econ.m_patches - econ.defects
    gain_global = (econ.defects * econ.repair_prob_global * econ.repair_gain
                   - clean * econ.harm_prob_global * econ.harm_loss)
    e_tp, _, e_fp = expected_selection_stats(stats, econ.defects)
    gain_local = (e_tp * econ.repair_prob_local * econ.repair_gain
                  - e_fp * econ.harm_prob_local * econ.harm_loss)
    return gain_global, gain_local


def budget_gains(econ: PatchEconomy, stats: MaskStats) -> tuple[float, float]:
    """Per-trial gains scaled by the affordable trial counts B/C."""
    gain_global, gain_local = per_trial_gains(econ, stats)
    return (econ.budget / econ.cost_global * gain_global,
            econ.budget / econ.cost_local * gain_local)


def dominance_check(econ: PatchEconomy, stats: MaskStats) -> tuple[bool, float]:
    """Does localized resampling beat global per unit compute?

    Returns (holds, margin) with margin = local_gain/C_l - global_gain/C_g;
    dominance holds iff the margin is strictly positive.
    """
    gain_global, gain_local = per_trial_gains(econ, stats)
    margin = gain_local / econ.cost_local - gain_global / econ.cost_global
    return margin > 0.0, margin


@dataclass(frozen=True)
class RecallRequirement:
    """Recall threshold beyond which localized resampling dominates.

    ``raw`` may be negative (any positive recall suffices) or exceed 1
    (no recall can achieve dominance); ``clamped`` is raw restricted to
    [0, 1] for convenience.
    """

    raw: float
    clamped: float


def required_recall(econ: PatchEconomy, precision: float) -> RecallRequirement:
    """Solve the dominance condition for recall at the given precision.

    Raises when the per-patch net benefit (denominator) is non-positive: in
    that regime each selected patch loses value in expectation and no recall
    helps.
    """
    denom = (econ.repair_prob_local * econ.repair_gain
             - (1.0 / precision - 1.0) * econ.harm_prob_local * econ.harm_loss)
    if denom <= 0.0:
        raise InfeasibleParameterError(
            "per-patch net benefit non-positive: precision is below the floor "
            "at which selected patches pay for themselves"
        )
    numer = (econ.repair_prob_global * econ.repair_gain
             - (econ.m_patches / econ.defects - 1.0)
             * econ.harm_prob_global * econ.harm_loss)
    raw = (econ.cost_local / econ.cost_global) * numer / denom
    return RecallRequirement(raw=raw, clamped=min(max(raw, 0.0), 1.0))


def precision_floor(repair_prob_local: float, repair_gain: float,
                    harm_prob_local: float, harm_loss: float) -> float:
    """Precision above which each selected patch has positive expected value.

    pi* = 1 / (1 + q*gain / (h_l*loss)); zero when local edits are harmless.
    """
    harm = harm_prob_local * harm_loss
    benefit = repair_prob_local * repair_gain
    if harm < 0:
        raise ValueError("harm term must be non-negative")
    if harm == 0.0:
        if benefit == 0.0:
            raise ValueError("precision floor undefined when both repair and harm terms vanish")
        return 0.0
    return 1.0 / (1.0 + benefit / harm)


@dataclass(frozen=True)
class BonPoint:
    n: int
    repair_prob: float
    normalized_gain: float


@dataclass(frozen=True)
class BonCurve:
    """Best-of-N saturation curve.

    repair_prob(N) = 1 - (1 - theta_1)^N rises with diminishing increments
    while the per-compute prefactor shrinks like 1/N, so the normalized gain
    eventually decreases; ``first_decline`` is the first N where it does.
    """

    points: tuple[BonPoint, ...]
    first_decline: Optional[int]


def bon_curve(repair_prob_one: float, econ: PatchEconomy, n_max: int) -> BonCurve:
    """Compute-normalized gain of global best-of-N for N = 1..n_max."""
    if not 0.0 < repair_prob_one < 1.0:
        raise ValueError(f"single-trial repair probability must lie in (0, 1), got {repair_prob_one}")
    if n_max < 1:
        raise ValueError(f"n_max must be at least 1, got {n_max}")
    clean = econ.m_patches - econ.defects
    harm_term = clean * econ.harm_prob_global * econ.harm_loss
    points = []
    first_decline = None
    prev_gain = None
    for n in range(1, n_max + 1):
        theta_n = 1.0 - (1.0 - repair_prob_one) ** n
        gain = (theta_n * econ.defects * econ.repair_gain - harm_term) / (n * econ.cost_global)
        points.append(BonPoint(n=n, repair_prob=theta_n, normalized_gain=gain))
        if prev_gain is not None and gain < prev_gain and first_decline is None:
            first_decline = n
        prev_gain = gain
    return BonCurve(points=tuple(points), first_decline=first_decline)


@dataclass(frozen=True)
class RegimeFlags:
    """Independent failure-regime indicators for localized resampling."""

    dense_defects: bool
    low_precision: bool
    weak_local_repair: bool


def classify_regime(econ: PatchEconomy, stats: MaskStats,
                    sparsity_cut: float = 0.5) -> RegimeFlags:
    """Flag the three regimes in which localized resampling loses its edge:
    dense defects, precision below the floor, and local repair strictly
    weaker than global (recall-weighted)."""
    floor = precision_floor(econ.repair_prob_local, econ.repair_gain,
                            econ.harm_prob_local, econ.harm_loss)
    return RegimeFlags(
        dense_defects=econ.defects / econ.m_patches > sparsity_cut,
        low_precision=stats.precision < floor,
        weak_local_repair=stats.recall * econ.repair_prob_local < econ.repair_prob_global,
    )


def sparse_dominance_approx(econ: PatchEconomy, stats: MaskStats) -> bool:
    """Simplified equal-cost dominance test for the sparse, benign-local regime:
    rho * q > theta_g - (M/s) * h_g * loss / gain.

    Obtained from the exact equal-cost condition by dropping the (small)
    local-harm term and rounding M/s - 1 up to M/s. Global resampling's harm
    scales with every clean patch, so the global-harm term is subtracted: it
    lowers the bar localized resampling has to clear.
    """
    threshold = (econ.repair_prob_global
                 - (econ.m_patches / econ.defects)
                 * econ.harm_prob_global * econ.harm_loss / econ.repair_gain)
    return stats.recall * econ.repair_prob_local > threshold


def clean_selection_probability(econ: PatchEconomy, stats: MaskStats) -> float:
    """Per-clean-patch selection probability that realizes the target
    precision in ratio-of-expectations form. Raises when no probability in
    [0, 1] can do so."""
    clean = econ.m_patches - econ.defects
    _, _, e_fp = expected_selection_stats(stats, econ.defects)
    if clean == 0:
        if e_fp > 1e-12:
            raise InfeasibleParameterError(
                "no clean patches available but the target precision implies "
                f"{e_fp:g} expected false positives"
            )
        return 0.0
    p_clean = e_fp / clean
    if p_clean > 1.0 + 1e-12:
        raise InfeasibleParameterError(
            f"(recall={stats.recall}, precision={stats.precision}, "
            f"defects={econ.defects}, m_patches={econ.m_patches}) implies a "
            f"clean-patch selection probability of {p_clean:g} > 1"
        )
    return min(p_clean, 1.0)


@dataclass(frozen=True)
class ValueDistribution:
    """Per-patch gain/loss values with a fixed mean, redrawn every trial.

    kind "constant" always yields the mean; "uniform" draws from
    [0, 2*mean]; "exponential" draws with the given mean. Means are
    preserved exactly, so the closed forms keep holding by linearity.
    """

    kind: str = "constant"
    mean: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "exponential"):
            raise ValueError(f"unknown value distribution kind {self.kind!r}")
        if self.mean < 0:
            raise ValueError(f"distribution mean must be non-negative, got {self.mean}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "constant":
            return np.full(shape, self.mean)
        if self.kind == "uniform":
            return rng.uniform(0.0, 2.0 * self.mean, size=shape)
        return rng.exponential(self.mean, size=shape)


@dataclass(frozen=True)
class EconomySimResult:
    """Empirical means and standard errors from the patch-economy simulator."""

    trials: int
    gain_global_mean: float
    gain_global_se: float
    gain_local_mean: float
    gain_local_se: float
    tp_mean: float
    tp_se: float
    selected_mean: float
    selected_se: float
    fp_mean: float
    fp_se: float


class _Accumulator:
    __slots__ = ("n", "total", "total_sq")

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, values: np.ndarray):
        self.n += values.size
        self.total += float(values.sum())
        self.total_sq += float(np.square(values).sum())

    def mean_se(self) -> tuple[float, float]:
        mean = self.total / self.n
        if self.n < 2:
            return mean, 0.0
        var = max(self.total_sq / self.n - mean * mean, 0.0) * self.n / (self.n - 1)
        return mean, math.sqrt(var / self.n)


def _simulate_chunk(econ: PatchEconomy, stats: MaskStats, p_clean: float,
                    n: int, rng: np.random.Generator,
                    repair_dist: ValueDistribution, harm_dist: ValueDistribution):
    s = econ.defects
    clean = econ.m_patches - econ.defects
    if repair_dist.kind == "constant" and harm_dist.kind == "constant":
        tp = rng.binomial(s, stats.recall, size=n)
        fp = rng.binomial(clean, p_clean, size=n) if clean else np.zeros(n, dtype=int)
        repaired = rng.binomial(tp, econ.repair_prob_local)
        harmed = rng.binomial(fp, econ.harm_prob_local)
        local = repair_dist.mean * repaired - harm_dist.mean * harmed
        rep_g = rng.binomial(s, econ.repair_prob_global, size=n)
        harm_g = rng.binomial(clean, econ.harm_prob_global, size=n) if clean else np.zeros(n, dtype=int)
        global_ = repair_dist.mean * rep_g - harm_dist.mean * harm_g
        return tp, fp, local, global_
    sel_def = rng.random((n, s)) < stats.recall
    sel_clean = rng.random((n, clean)) < p_clean if clean else np.zeros((n, 0), dtype=bool)
    tp = sel_def.sum(axis=1)
    fp = sel_clean.sum(axis=1)
    gains = repair_dist.sample(rng, (n, s))
    losses = harm_dist.sample(rng, (n, clean)) if clean else np.zeros((n, 0))
    rep_local = sel_def & (rng.random((n, s)) < econ.repair_prob_local)
    harm_local = sel_clean & (rng.random((n, clean)) < econ.harm_prob_local) if clean \
        else np.zeros((n, 0), dtype=bool)
    local = (gains * rep_local).sum(axis=1) - (losses * harm_local).sum(axis=1)
    rep_g = rng.random((n, s)) < econ.repair_prob_global
    harm_g = rng.random((n, clean)) < econ.harm_prob_global if clean \
        else np.zeros((n, 0), dtype=bool)
    global_ = (gains * rep_g).sum(axis=1) - (losses * harm_g).sum(axis=1)
    return tp, fp, local, global_


def _chunk_task(args) -> tuple[int, tuple]:
    """Sufficient statistics (count, sum, sum of squares per stream) for one
    chunk of trials; top-level so worker processes can receive it."""
    econ, stats, p_clean, repair_dist, harm_dist, entropy, spawn_key, chunk_idx, n = args
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=entropy, spawn_key=(*spawn_key, chunk_idx)))
    tp, fp, local, global_ = _simulate_chunk(econ, stats, p_clean, n, rng,
                                             repair_dist, harm_dist)

    def agg(values):
        values = np.asarray(values, dtype=float)
        return values.size, float(values.sum()), float(np.square(values).sum())

    return chunk_idx, (agg(tp), agg(tp + fp), agg(fp), agg(local), agg(global_))


def simulate_patch_economy(econ: PatchEconomy, stats: MaskStats, trials: int,
                           seed, repair_dist: Optional[ValueDistribution] = None,
                           harm_dist: Optional[ValueDistribution] = None,
                           workers: int = 1) -> EconomySimResult:
    """Brute-force oracle for the selection statistics and gain formulas.

    Per trial: each defective patch is selected with probability ``recall``
    and each clean patch with the probability that matches the target
    precision in expectation; selected patches then receive Bernoulli
    repair/harm events, and the global strategy touches every patch with
    its own probabilities. Trials are processed in fixed-size chunks with
    seed streams derived per chunk and merged in chunk order, so results
    are reproducible bit-for-bit regardless of the worker count.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    p_clean = clean_selection_probability(econ, stats)
    repair_dist = repair_dist or ValueDistribution(kind="constant", mean=econ.repair_gain)
    harm_dist = harm_dist or ValueDistribution(kind="constant", mean=econ.harm_loss)
    if not math.isclose(repair_dist.mean, econ.repair_gain, rel_tol=1e-12):
        raise ValueError("repair distribution mean must match the economy's repair_gain")
    if not math.isclose(harm_dist.mean, econ.harm_loss, rel_tol=1e-12):
        raise ValueError("harm distribution mean must match the economy's harm_loss")
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    n_chunks = (trials + _CHUNK - 1) // _CHUNK
    tasks = [
        (econ, stats, p_clean, repair_dist, harm_dist, base.entropy, base.spawn_key,
         idx, min(_CHUNK, trials - idx * _CHUNK))
        for idx in range(n_chunks)
    ]
    if workers == 1 or n_chunks == 1:
        results = [_chunk_task(task) for task in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, n_chunks)) as pool:
            results = list(pool.map(_chunk_task, tasks))
    accs = [_Accumulator() for _ in range(5)]
    for _, parts in sorted(results, key=lambda item: item[0]):
        for acc, (count, total, total_sq) in zip(accs, parts):
            acc.n += count
            acc.total += total
            acc.total_sq += total_sq
    acc_tp, acc_sel, acc_fp, acc_local, acc_global = accs
    tp_mean, tp_se = acc_tp.mean_se()
    sel_mean, sel_se = acc_sel.mean_se()
    fp_mean, fp_se = acc_fp.mean_se()
    local_mean, local_se = acc_local.mean_se()
    global_mean, global_se = acc_global.mean_se()
    return EconomySimResult(
        trials=trials,
        gain_global_mean=global_mean, gain_global_se=global_se,
        gain_local_mean=local_mean, gain_local_se=local_se,
        tp_mean=tp_mean, tp_se=tp_se,
        selected_mean=sel_mean, selected_se=sel_se,
        fp_mean=fp_mean, fp_se=fp_se,
    )


def simulate_bon_repair_frequency(repair_prob_one: float, n: int, trials: int,
                                  seed) -> tuple[float, float]:
    """Monte Carlo frequency with which best-of-N repairs one defect: a
    defect counts as repaired when any of the N independent global draws
    repairs it. Returns (frequency, standard error)."""
    if not 0.0 < repair_prob_one < 1.0:
        raise ValueError(f"single-trial repair probability must lie in (0, 1), got {repair_prob_one}")
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be at least 1")
    rng = np.random.default_rng(seed)
    hits = rng.binomial(n, repair_prob_one, size=trials) > 0
    freq = float(hits.mean())
    se = math.sqrt(max(freq * (1.0 - freq), 0.0) / trials)
    return freq, se
