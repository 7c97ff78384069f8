"""Multiplicity-adjusted p-values for joint two-stage scans.

Every method scores markers with the same two-hurdle statistic: T = Z_joint**2 when
the marker clears the stage-I hurdle with a sign-consistent joint statistic, else 0.
A marker's adjusted p is the probability, under the complete null, that the maximum
T over all markers reaches its observed T.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from cohort_simulator import SimulatedCohort, split_stages, two_sided_p
from errors import NumericalError, UnsupportedDesignError, ValidationError, require_probability
from power_engine import TwoStageDesign, critical_value, two_hurdle_tail
from replicates import map_ordered, substream

MIN_DRAWS = 100
DRAW_CHUNK = 1000
RIDGE_WEIGHT = 1e-6
# Statistics closer than this relative gap count as tied.
TIE_REL_TOL = 1e-9
STAGE2_SAMPLINGS = ("case-control", "family")
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScorePanel:
    """Dosages and phenotypes centred within each stage; their products are the efficient-score contributions."""

    centred_dosages: np.ndarray
    centred_phenotype: np.ndarray
    stage1: np.ndarray

    @property
    def contributions(self) -> np.ndarray:
        return self.centred_phenotype[:, np.newaxis] * self.centred_dosages

    @property
    def stage1_dosages(self) -> np.ndarray:
        return self.centred_dosages[self.stage1]


@dataclass(frozen=True)
class ObservedStatistics:
    stage1_z: np.ndarray
    stage2_z: np.ndarray
    joint_z: np.ndarray
    statistic: np.ndarray
    stage1_fraction: float


@dataclass(frozen=True)
class AdjustedPValues:
    raw: np.ndarray
    adjusted: np.ndarray
    standard_error: np.ndarray
    replicates: int
    method: str

    def rows(self) -> list[dict[str, object]]:
        return [
            {
                "marker": j,
                "raw_p": float(self.raw[j]),
                "adjusted_p": float(self.adjusted[j]),
                "se": float(self.standard_error[j]),
                "method": self.method,
            }
            for j in range(self.raw.size)
        ]


@dataclass(frozen=True)
class ReferenceResult:
    adjusted: AdjustedPValues
    critical_statistic: float


def _centre(values: np.ndarray, axis: int) -> np.ndarray:
    return values - values.mean(axis=axis, keepdims=True)


def score_z(dosages: np.ndarray, phenotypes: np.ndarray) -> np.ndarray:
    """Score-test z per marker; phenotypes may be one vector or a (batch, n) matrix.

    The score is scaled by its exact variance under phenotype permutation, so z has
    unit variance at every sample size.
    """
    d = _centre(np.asarray(dosages, dtype=float), axis=0)
    y = np.atleast_2d(np.asarray(phenotypes, dtype=float))
    y = _centre(y, axis=1)
    n = d.shape[0]
    numerator = y @ d
    denominator = np.sqrt(np.outer((y * y).sum(axis=1), (d * d).sum(axis=0)) / (n - 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(denominator > 0.0, numerator / denominator, 0.0)
    return z if np.ndim(phenotypes) > 1 else z[0]


def score_panel(cohort: SimulatedCohort, stage1: np.ndarray) -> ScorePanel:
    stage1 = np.asarray(stage1, dtype=bool)
    dosages = np.zeros(cohort.dosages.shape)
    phenotype = np.zeros(cohort.n_subjects)
    for mask in (stage1, ~stage1):
        if not mask.any():
            continue
        dosages[mask] = _centre(cohort.dosages[mask].astype(float), axis=0)
        phenotype[mask] = _centre(cohort.phenotype[mask].astype(float), axis=0)
    return ScorePanel(dosages, phenotype, stage1)


def two_hurdle_statistic(stage1_z: np.ndarray, joint_z: np.ndarray, alpha1: float) -> np.ndarray:
    if alpha1 >= 1.0:
        return joint_z**2
    passing = (np.abs(stage1_z) > critical_value(alpha1)) & (np.sign(stage1_z) == np.sign(joint_z))
    return np.where(passing, joint_z**2, 0.0)


def _check_group(phenotype: np.ndarray, label: str) -> None:
    cases = int(phenotype.sum())
    if cases < 2 or phenotype.size - cases < 2:
        raise ValidationError(label, (cases, phenotype.size - cases), "needs at least 2 cases and 2 controls")


def observed_statistics(cohort: SimulatedCohort, stage1: np.ndarray, alpha1: float) -> ObservedStatistics:
    stage1 = np.asarray(stage1, dtype=bool)
    _check_group(cohort.phenotype[stage1], "stage1")
    z1 = score_z(cohort.dosages[stage1], cohort.phenotype[stage1])
    fraction = float(stage1.mean())
    if stage1.all():
        z2 = np.zeros_like(z1)
        zj = z1.copy()
    else:
        _check_group(cohort.phenotype[~stage1], "stage2")
        z2 = score_z(cohort.dosages[~stage1], cohort.phenotype[~stage1])
        zj = math.sqrt(fraction) * z1 + math.sqrt(1.0 - fraction) * z2
    return ObservedStatistics(z1, z2, zj, two_hurdle_statistic(z1, zj, alpha1), fraction)


def raw_p_values(observed: ObservedStatistics, alpha1: float) -> np.ndarray:
    raw = np.ones(observed.statistic.size)
    for j in np.flatnonzero(observed.statistic > 0.0):
        raw[j] = two_hurdle_tail(observed.stage1_fraction, alpha1, math.sqrt(observed.statistic[j]))
    return raw


def exceedance_counts(null_maxima: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Null maxima at or above each observed statistic, ties taken to TIE_REL_TOL."""
    ordered = np.sort(np.asarray(null_maxima, dtype=float))
    observed = np.asarray(observed, dtype=float)
    return ordered.size - np.searchsorted(ordered, observed - TIE_REL_TOL * np.abs(observed), side="left")


def permutation_p(null_maxima: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """(k + 1) / (n + 1) with k the null maxima at or above each observed statistic."""
    return (exceedance_counts(null_maxima, observed) + 1.0) / (np.size(null_maxima) + 1.0)


def _exceedance_fraction(null_maxima: np.ndarray, observed: np.ndarray) -> np.ndarray:
    return exceedance_counts(null_maxima, observed) / np.size(null_maxima)


def _finalize(
    raw: np.ndarray,
    estimated: np.ndarray,
    statistic: np.ndarray,
    replicates: int,
    method: str,
) -> AdjustedPValues:
    adjusted = np.where(statistic > 0.0, np.maximum(estimated, raw), 1.0)
    adjusted = np.clip(adjusted, 0.0, 1.0)
    se = np.sqrt(adjusted * (1.0 - adjusted) / replicates)
    return AdjustedPValues(raw, adjusted, se, replicates, method)


def _require_case_control(stage2_sampling: str) -> None:
    if stage2_sampling == "family":
        raise UnsupportedDesignError(
            "stage2_sampling",
            stage2_sampling,
            "case-control stage I with family-based stage II cannot be adjusted by these methods",
        )
    if stage2_sampling not in STAGE2_SAMPLINGS:
        raise ValidationError("stage2_sampling", stage2_sampling, f"expected one of {STAGE2_SAMPLINGS}")


def _resolve_stage1(cohort: SimulatedCohort, design: TwoStageDesign, seed: int, stage1: np.ndarray | None) -> np.ndarray:
    if stage1 is not None:
        mask = np.asarray(stage1, dtype=bool)
        if mask.shape != (cohort.n_subjects,):
            raise ValidationError("stage1", mask.shape, "stage labels must cover every subject")
        return mask
    return split_stages(cohort, design.stage1_fraction, substream(seed, 0))


def score_correlation(panel: ScorePanel) -> np.ndarray:
    """Null correlation of the stage-I scores, which is the correlation of the centred stage-I dosages.

    Zero-variance markers are made independent.
    """
    dosages = panel.stage1_dosages
    covariance = dosages.T @ dosages / dosages.shape[0]
    variance = np.diag(covariance).copy()
    degenerate = variance <= 0.0
    variance[degenerate] = 1.0
    scale = 1.0 / np.sqrt(variance)
    correlation = covariance * scale[:, np.newaxis] * scale[np.newaxis, :]
    correlation[degenerate, :] = 0.0
    correlation[:, degenerate] = 0.0
    np.fill_diagonal(correlation, 1.0)
    return correlation


def _cholesky(correlation: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(correlation)
    except np.linalg.LinAlgError:
        pass
    m = correlation.shape[0]
    ridge = RIDGE_WEIGHT * np.trace(correlation) / m
    logger.warning("Score covariance not positive definite; adding ridge %.3g to the diagonal.", ridge)
    try:
        return np.linalg.cholesky(correlation + ridge * np.eye(m))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("lin_adjusted_p", f"score covariance factorization failed after ridge {ridge:.3g}") from exc


def lin_adjusted_p(
    cohort: SimulatedCohort,
    design: TwoStageDesign,
    n_draws: int,
    seed: int,
    *,
    stage1: np.ndarray | None = None,
    stage2_sampling: str = "case-control",
    threads: int = 1,
) -> AdjustedPValues:
    """Monte Carlo over the asymptotic normal law of the scores, covariance from stage I."""
    _require_case_control(stage2_sampling)
    if n_draws < MIN_DRAWS:
        raise ValidationError("n_draws", n_draws, f"must be >= {MIN_DRAWS}")
    mask = _resolve_stage1(cohort, design, seed, stage1)
    observed = observed_statistics(cohort, mask, design.alpha1)
    factor = _cholesky(score_correlation(score_panel(cohort, mask)))
    m = factor.shape[0]
    fraction = observed.stage1_fraction

    def chunk_maxima(index: int) -> np.ndarray:
        size = min(DRAW_CHUNK, n_draws - index * DRAW_CHUNK)
        rng = substream(seed, 1, index)
        z1 = rng.standard_normal((size, m)) @ factor.T
        z2 = rng.standard_normal((size, m)) @ factor.T
        zj = math.sqrt(fraction) * z1 + math.sqrt(1.0 - fraction) * z2
        return two_hurdle_statistic(z1, zj, design.alpha1).max(axis=1)

    chunks = math.ceil(n_draws / DRAW_CHUNK)
    maxima = np.concatenate(map_ordered(chunk_maxima, range(chunks), threads))
    logger.info("[PERM] Monte Carlo adjustment: %s draws over %s markers", n_draws, m)
    raw = raw_p_values(observed, design.alpha1)
    estimated = _exceedance_fraction(maxima, observed.statistic)
    return _finalize(raw, estimated, observed.statistic, n_draws, "lin")


def dudbridge_adjusted_p(
    cohort: SimulatedCohort,
    design: TwoStageDesign,
    n_permutations: int,
    seed: int,
    *,
    stage1: np.ndarray | None = None,
    stage2_sampling: str = "case-control",
    threads: int = 1,
) -> AdjustedPValues:
    """Permutation within stage I: a stage-I subsample plays stage I, all of stage I plays the joint sample."""
    _require_case_control(stage2_sampling)
    if n_permutations < 1:
        raise ValidationError("n_permutations", n_permutations, "must be >= 1")
    mask = _resolve_stage1(cohort, design, seed, stage1)
    observed = observed_statistics(cohort, mask, design.alpha1)
    dosages = cohort.dosages[mask].astype(float)
    phenotype = cohort.phenotype[mask].astype(float)
    n1 = phenotype.size
    sub_size = int(round(design.stage1_fraction * n1))
    if sub_size < 4 or (design.stage1_fraction < 1.0 and n1 - sub_size < 4):
        raise ValidationError(
            "stage1",
            n1,
            f"too few stage-I subjects for an internal split at fraction {design.stage1_fraction}",
        )
    order = substream(seed, 2).permutation(n1)
    sub, rest = order[:sub_size], order[sub_size:]
    fraction = sub_size / n1

    def chunk_maxima(index: int) -> np.ndarray:
        size = min(DRAW_CHUNK, n_permutations - index * DRAW_CHUNK)
        rng = substream(seed, 3, index)
        permuted = np.stack([phenotype[rng.permutation(n1)] for _ in range(size)])
        z1 = score_z(dosages[sub], permuted[:, sub])
        if rest.size:
            z2 = score_z(dosages[rest], permuted[:, rest])
            zj = math.sqrt(fraction) * z1 + math.sqrt(1.0 - fraction) * z2
        else:
            zj = z1
        return two_hurdle_statistic(z1, zj, design.alpha1).max(axis=1)

    chunks = math.ceil(n_permutations / DRAW_CHUNK)
    maxima = np.concatenate(map_ordered(chunk_maxima, range(chunks), threads))
    logger.info("[PERM] stage-I permutation adjustment: %s permutations", n_permutations)
    raw = raw_p_values(observed, design.alpha1)
    estimated = permutation_p(maxima, observed.statistic)
    return _finalize(raw, estimated, observed.statistic, n_permutations, "dudbridge")


def max_statistic_reference(
    cohort: SimulatedCohort,
    n_permutations: int,
    seed: int,
    *,
    alpha: float = 0.05,
    threads: int = 1,
) -> ReferenceResult:
    """Single-stage max-|z| permutation adjustment over the full sample."""
    require_probability("alpha", alpha)
    if n_permutations < 1:
        raise ValidationError("n_permutations", n_permutations, "must be >= 1")
    _check_group(cohort.phenotype, "cohort")
    dosages = cohort.dosages.astype(float)
    phenotype = cohort.phenotype.astype(float)
    z = score_z(dosages, phenotype)

    def chunk_maxima(index: int) -> np.ndarray:
        size = min(DRAW_CHUNK, n_permutations - index * DRAW_CHUNK)
        rng = substream(seed, 4, index)
        permuted = np.stack([phenotype[rng.permutation(phenotype.size)] for _ in range(size)])
        return np.abs(score_z(dosages, permuted)).max(axis=1)

    chunks = math.ceil(n_permutations / DRAW_CHUNK)
    maxima = np.concatenate(map_ordered(chunk_maxima, range(chunks), threads))
    statistic = np.abs(z)
    raw = two_sided_p(statistic)
    adjusted = np.maximum(permutation_p(maxima, statistic), raw)
    se = np.sqrt(adjusted * (1.0 - adjusted) / n_permutations)
    critical = float(np.quantile(maxima, 1.0 - alpha))
    logger.info("[PERM] full-sample reference: critical max |z| %.4f at alpha %s", critical, alpha)
    return ReferenceResult(AdjustedPValues(raw, adjusted, se, n_permutations, "max-statistic"), critical)
