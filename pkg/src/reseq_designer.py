"""Choosing which genotyped subjects to resequence after an association hit.

Strata are (outcome, marker class) cells, or (outcome, risk-index bin) when several
markers are combined. Yield is the carrier posterior Pr(G=1 | stratum). Joint
analysis of a stratified substudy needs every stratum sampled with nonzero
probability and the log sampling-fraction ratios added as logistic offsets; the
main-study mixture likelihood is not provided, only substudy inference.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from errors import NumericalError, ValidationError, require_probability
from genetic_model import (
    ALLELE_LABELS,
    CASE,
    CONTROL,
    MAJOR,
    MINOR,
    OUTCOME_LABELS,
    MarkerCausalModel,
    cell_table,
    model_from_d_prime,
)
from logistic import OffsetFit, offset_logistic_fit, plain_logistic_fit, with_intercept
from replicates import map_replicates, substream

PURPOSES = ("discovery", "joint")
# Stratum order used for ties: highest-yield cells of a positive association first.
STRATUM_ORDER = ((CASE, MINOR), (CONTROL, MINOR), (CASE, MAJOR), (CONTROL, MAJOR))
DEFAULT_GROUP_SIZE = 1000
DEFAULT_BINS = 5
MIN_JOINT_BUDGET = 4
FLAT_YIELD_TOLERANCE = 1e-12
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StratumYields:
    yields: dict[tuple[int, int], float]
    argmax: tuple[int, int]

    def ranked(self) -> list[tuple[int, int]]:
        position = {key: i for i, key in enumerate(STRATUM_ORDER)}
        return sorted(STRATUM_ORDER, key=lambda key: (-self.yields[key], position[key]))


@dataclass(frozen=True)
class Stratum:
    outcome: int
    marker_class: int
    population: int
    sampled: int
    carrier_yield: float

    @property
    def fraction(self) -> float:
        return self.sampled / self.population if self.population else 0.0

    @property
    def expected_carriers(self) -> float:
        return self.sampled * self.carrier_yield

    @property
    def label(self) -> str:
        return f"{OUTCOME_LABELS[self.outcome]}/{ALLELE_LABELS[self.marker_class]}"


@dataclass(frozen=True)
class SamplingPlan:
    strata: tuple[Stratum, ...]
    purpose: str

    def __post_init__(self) -> None:
        if self.purpose not in PURPOSES:
            raise ValidationError("purpose", self.purpose, f"expected one of {PURPOSES}")
        for stratum in self.strata:
            if not 0 <= stratum.sampled <= stratum.population:
                raise ValidationError(stratum.label, stratum.sampled, "sampled count outside [0, population]")
            if self.purpose == "joint" and stratum.sampled == 0:
                raise ValidationError(stratum.label, 0, "joint analysis needs every stratum sampled")

    def stratum(self, outcome: int, marker_class: int) -> Stratum:
        for stratum in self.strata:
            if (stratum.outcome, stratum.marker_class) == (outcome, marker_class):
                return stratum
        raise KeyError((outcome, marker_class))

    @property
    def budget(self) -> int:
        return sum(stratum.sampled for stratum in self.strata)


@dataclass(frozen=True)
class RiskIndex:
    intercept: float
    coefficients: np.ndarray

    def score(self, dosages: np.ndarray) -> np.ndarray:
        return np.asarray(dosages, dtype=float) @ self.coefficients


@dataclass(frozen=True)
class RiskIndexYields:
    edges: np.ndarray
    case_yield: np.ndarray
    control_yield: np.ndarray
    case_se: np.ndarray
    control_se: np.ndarray
    case_count: np.ndarray
    control_count: np.ndarray


@dataclass(frozen=True)
class OffsetRecovery:
    true_log_or: float
    coverage: float
    mean_offset_estimate: float
    offset_bias_se: float
    mean_plain_estimate: float
    plain_bias_se: float
    replicates: int

    @property
    def offset_bias(self) -> float:
        return self.mean_offset_estimate - self.true_log_or

    @property
    def plain_bias(self) -> float:
        return self.mean_plain_estimate - self.true_log_or


def stratum_yields(model: MarkerCausalModel) -> StratumYields:
    table = cell_table(model)
    yields = {key: table.carrier(*key) for key in STRATUM_ORDER}
    ranked = StratumYields(yields, STRATUM_ORDER[0]).ranked()
    return StratumYields(yields, ranked[0])


def expected_population(
    model: MarkerCausalModel,
    n_cases: int = DEFAULT_GROUP_SIZE,
    n_controls: int = DEFAULT_GROUP_SIZE,
) -> dict[tuple[int, int], int]:
    """Expected subjects per stratum; a minor-class subject carries at least one minor allele.

    These are subject counts, while stratum_yields gives per-gamete carrier probabilities.
    """
    table = cell_table(model)
    population: dict[tuple[int, int], int] = {}
    for outcome, size in ((CASE, n_cases), (CONTROL, n_controls)):
        minor_freq = table.marker_allele_freq(outcome)
        carriers = int(round(size * (1.0 - (1.0 - minor_freq) ** 2)))
        population[(outcome, MINOR)] = carriers
        population[(outcome, MAJOR)] = size - carriers
    return population


def _largest_remainder(shares: dict[tuple[int, int], float], total: int, order: list[tuple[int, int]]) -> dict[tuple[int, int], int]:
    weight = sum(shares.values())
    if weight <= 0.0:
        shares = {key: 1.0 for key in shares}
        weight = float(len(shares))
    exact = {key: total * shares[key] / weight for key in shares}
    counts = {key: int(math.floor(value)) for key, value in exact.items()}
    leftover = total - sum(counts.values())
    position = {key: i for i, key in enumerate(order)}
    by_remainder = sorted(shares, key=lambda key: (-(exact[key] - counts[key]), position[key]))
    for key in by_remainder[:leftover]:
        counts[key] += 1
    return counts


def _allocate_proportional(
    yields: StratumYields,
    budget: int,
    population: dict[tuple[int, int], int],
    floor: int = 1,
) -> dict[tuple[int, int], int]:
    order = yields.ranked()
    counts = {key: floor for key in order}
    remaining = budget - floor * len(order)
    open_keys = [key for key in order if population[key] > counts[key]]
    while remaining > 0 and open_keys:
        share = _largest_remainder({key: yields.yields[key] for key in open_keys}, remaining, order)
        remaining = 0
        for key in open_keys:
            room = population[key] - counts[key]
            take = min(room, share[key])
            counts[key] += take
            remaining += share[key] - take
        open_keys = [key for key in open_keys if population[key] > counts[key]]
    return counts


def _allocate_discovery(
    yields: StratumYields,
    budget: int,
    population: dict[tuple[int, int], int],
) -> dict[tuple[int, int], int]:
    values = list(yields.yields.values())
    if max(values) - min(values) <= FLAT_YIELD_TOLERANCE:
        logger.info("All strata have the same carrier yield; spreading the budget evenly.")
        return _allocate_proportional(yields, budget, population, floor=0)
    counts = {key: 0 for key in STRATUM_ORDER}
    remaining = budget
    for key in yields.ranked():
        take = min(remaining, population[key])
        counts[key] = take
        remaining -= take
        if take and remaining:
            logger.info("Stratum %s exhausted; %s subjects overflow to the next stratum.", key, remaining)
    return counts


def recommend_plan(
    model: MarkerCausalModel,
    budget: int,
    purpose: str,
    population: dict[tuple[int, int], int] | None = None,
) -> SamplingPlan:
    if purpose not in PURPOSES:
        raise ValidationError("purpose", purpose, f"expected one of {PURPOSES}")
    if purpose == "joint" and budget < MIN_JOINT_BUDGET:
        raise ValidationError("budget", budget, f"joint analysis needs at least {MIN_JOINT_BUDGET} subjects")
    if budget < 1:
        raise ValidationError("budget", budget, "must be >= 1")
    population = expected_population(model) if population is None else population
    missing = [key for key in STRATUM_ORDER if key not in population]
    if missing:
        raise ValidationError("population", missing, "population counts missing for strata")
    if purpose == "joint" and any(population[key] < 1 for key in STRATUM_ORDER):
        raise ValidationError("population", population, "joint analysis needs every stratum populated")
    available = sum(population[key] for key in STRATUM_ORDER)
    if budget > available:
        raise ValidationError("budget", budget, f"exceeds available population {available}")
    yields = stratum_yields(model)
    if purpose == "discovery":
        counts = _allocate_discovery(yields, budget, population)
    else:
        counts = _allocate_proportional(yields, budget, population)
    strata = tuple(
        Stratum(key[0], key[1], population[key], counts[key], yields.yields[key]) for key in STRATUM_ORDER
    )
    return SamplingPlan(strata, purpose)


def sampling_offsets(plan: SamplingPlan) -> dict[int, float]:
    """Offset per marker class: log of the case over control sampling fraction."""
    offsets: dict[int, float] = {}
    for marker_class in (MAJOR, MINOR):
        f_case = plan.stratum(CASE, marker_class).fraction
        f_control = plan.stratum(CONTROL, marker_class).fraction
        if f_case <= 0.0 or f_control <= 0.0:
            raise ValidationError(
                ALLELE_LABELS[marker_class],
                (f_case, f_control),
                "joint analysis needs nonzero sampling fractions in every stratum",
            )
        offsets[marker_class] = math.log(f_case / f_control)
    return offsets


def offsets_from_fractions(fractions: dict[tuple[int, int], float]) -> dict[int, float]:
    """Offsets for the marker classes sampled in both outcomes; missing strata count as unsampled."""
    for key, value in fractions.items():
        require_probability(f"fraction{key}", value, open_interval=False)
    offsets: dict[int, float] = {}
    for marker_class in (MAJOR, MINOR):
        f_case = fractions.get((CASE, marker_class), 0.0)
        f_control = fractions.get((CONTROL, marker_class), 0.0)
        if f_case > 0.0 and f_control > 0.0:
            offsets[marker_class] = math.log(f_case / f_control)
    return offsets


def plan_rows(plan: SamplingPlan) -> list[dict[str, object]]:
    offsets = sampling_offsets(plan) if plan.purpose == "joint" else {}
    return [
        {
            "stratum": stratum.label,
            "population": stratum.population,
            "sampled": stratum.sampled,
            "fraction": stratum.fraction,
            "carrier_yield": stratum.carrier_yield,
            "expected_carriers": stratum.expected_carriers,
            "offset": offsets.get(stratum.marker_class, float("nan")),
        }
        for stratum in plan.strata
    ]


def fit_risk_index(dosages: np.ndarray, phenotype: np.ndarray) -> RiskIndex:
    """Risk index from a logistic regression of case-control status on several markers."""
    d = np.asarray(dosages, dtype=float)
    fit = plain_logistic_fit(with_intercept(*d.T), phenotype)
    if not fit.converged:
        logger.warning("Risk-index regression did not converge; using last iterate.")
    return RiskIndex(float(fit.coefficients[0]), fit.coefficients[1:].copy())


def quantile_bins(scores: np.ndarray, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Monotone bin edges at score quantiles; duplicate edges of a discrete score are merged."""
    if n_bins < 1:
        raise ValidationError("n_bins", n_bins, "must be >= 1")
    inner = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, n_bins + 1)[1:-1]))
    return np.concatenate([[-np.inf], inner, [np.inf]])


def assign_bins(scores: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # Bins are half-open (lower, upper].
    return np.searchsorted(edges, scores, side="left") - 1


def _check_shared_causal(models: Sequence[MarkerCausalModel]) -> tuple[float, float]:
    if not models:
        raise ValidationError("models", 0, "at least one marker model is required")
    causal_freq, rr = models[0].causal_freq, models[0].rr_causal
    for model in models[1:]:
        if not math.isclose(model.causal_freq, causal_freq) or not math.isclose(model.rr_causal, rr):
            raise ValidationError("models", model, "all markers must describe the same causal variant")
    return causal_freq, rr


def _draw_scored_gametes(
    models: Sequence[MarkerCausalModel],
    coefficients: np.ndarray,
    count: int,
    carrier_prob: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    carriers = rng.random(count) < carrier_prob
    score = np.zeros(count)
    for model, coefficient in zip(models, coefficients):
        table = model.gamete_probabilities()
        # Pr(marker minor | causal allele); markers are conditionally independent given G.
        minor_given = table[MINOR] / table.sum(axis=0)
        alleles = rng.random(count) < np.where(carriers, minor_given[1], minor_given[0])
        score += coefficient * alleles
    return carriers, score


def risk_index_yields(
    models: Sequence[MarkerCausalModel],
    coefficients: Sequence[float],
    *,
    n_draws: int = 200_000,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
    edges: np.ndarray | None = None,
) -> RiskIndexYields:
    """Monte Carlo carrier probabilities per (outcome, risk-index bin) at the gamete level."""
    causal_freq, rr = _check_shared_causal(models)
    weights = np.asarray(coefficients, dtype=float)
    if weights.shape != (len(models),):
        raise ValidationError("coefficients", weights.shape, "need one coefficient per marker")
    case_carrier = causal_freq * rr / (1.0 - causal_freq + causal_freq * rr)
    g_case, s_case = _draw_scored_gametes(models, weights, n_draws, case_carrier, substream(seed, 0))
    g_ctrl, s_ctrl = _draw_scored_gametes(models, weights, n_draws, causal_freq, substream(seed, 1))
    if edges is None:
        edges = quantile_bins(s_ctrl, n_bins)
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0.0):
        raise ValidationError("edges", edges.tolist(), "bin edges must be strictly increasing")

    def per_bin(carriers: np.ndarray, score: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        bins = assign_bins(score, edges)
        n_edges = edges.size - 1
        counts = np.bincount(bins, minlength=n_edges)[:n_edges]
        hits = np.bincount(bins, weights=carriers.astype(float), minlength=n_edges)[:n_edges]
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(counts > 0, hits / counts, np.nan)
            se = np.where(counts > 0, np.sqrt(rate * (1.0 - rate) / counts), np.nan)
        for index in np.flatnonzero(counts == 0):
            logger.warning("Risk-index bin %s is empty for %s.", index, label)
        return rate, se, counts

    case_rate, case_se, case_n = per_bin(g_case, s_case, "cases")
    ctrl_rate, ctrl_se, ctrl_n = per_bin(g_ctrl, s_ctrl, "controls")
    return RiskIndexYields(edges, case_rate, ctrl_rate, case_se, ctrl_se, case_n, ctrl_n)


def risk_index_scenario() -> tuple[list[MarkerCausalModel], np.ndarray]:
    """Five markers in positive LD with one rare causal variant (frequency 0.05, RR 2)."""
    settings = ((0.10, 0.8), (0.15, 0.6), (0.20, 0.5), (0.25, 0.4), (0.30, 0.3))
    models = [model_from_d_prime(freq, 0.05, dp, 2.0) for freq, dp in settings]
    coefficients = np.array([math.log(cell_table(model).marker_rr) for model in models])
    return models, coefficients


def simulate_stratified_substudy(
    rng: np.random.Generator,
    fractions: dict[tuple[int, int], float],
    *,
    n_population: int = 5000,
    exposure_freq: float = 0.3,
    intercept: float = -1.0,
    log_or: float = math.log(2.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Population with a binary marker class, sampled by (outcome, class) fractions.

    Returns the sampled marker class, outcome and per-subject offsets. Strata missing
    from ``fractions`` are not sampled; a class sampled in only one outcome gets offset 0.
    """
    x = (rng.random(n_population) < exposure_freq).astype(np.uint8)
    y = (rng.random(n_population) < expit(intercept + log_or * x)).astype(np.uint8)
    keep_prob = np.zeros(n_population)
    for (outcome, marker_class), fraction in fractions.items():
        keep_prob[(y == outcome) & (x == marker_class)] = fraction
    keep = rng.random(n_population) < keep_prob
    offsets_by_class = offsets_from_fractions(fractions)
    offsets = np.where(x[keep] == MINOR, offsets_by_class.get(MINOR, 0.0), offsets_by_class.get(MAJOR, 0.0))
    return x[keep], y[keep], offsets


def offset_recovery_study(
    replicates: int,
    seed: int,
    fractions: dict[tuple[int, int], float] | None = None,
    *,
    n_population: int = 5000,
    log_or: float = math.log(2.0),
    threads: int = 1,
) -> OffsetRecovery:
    """Paired offset-corrected versus uncorrected fits over simulated stratified substudies."""
    fractions = fractions or {
        (CASE, MINOR): 0.8,
        (CONTROL, MINOR): 0.4,
        (CASE, MAJOR): 0.2,
        (CONTROL, MAJOR): 0.05,
    }

    def replicate(rng: np.random.Generator, index: int) -> tuple[float, bool, float]:
        x, y, offsets = simulate_stratified_substudy(rng, fractions, n_population=n_population, log_or=log_or)
        design = with_intercept(x)
        corrected: OffsetFit = offset_logistic_fit(design, y, offsets)
        plain = plain_logistic_fit(design, y)
        low, high = corrected.confidence_interval(1)
        return float(corrected.coefficients[1]), low <= log_or <= high, float(plain.coefficients[1])

    results = map_replicates(replicate, replicates, seed, stream=5, threads=threads)
    if not results:
        raise NumericalError("offset_recovery_study", "no replicates were run")
    corrected = np.array([r[0] for r in results])
    covered = np.array([r[1] for r in results])
    plain = np.array([r[2] for r in results])
    scale = math.sqrt(len(results))
    return OffsetRecovery(
        true_log_or=log_or,
        coverage=float(covered.mean()),
        mean_offset_estimate=float(corrected.mean()),
        offset_bias_se=float(corrected.std(ddof=1) / scale) if len(results) > 1 else float("inf"),
        mean_plain_estimate=float(plain.mean()),
        plain_bias_se=float(plain.std(ddof=1) / scale) if len(results) > 1 else float("inf"),
        replicates=len(results),
    )
