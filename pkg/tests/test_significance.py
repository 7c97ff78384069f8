from __future__ import annotations

import itertools
import logging
import math

import numpy as np
import pytest
from scipy.stats import kstest

from cohort_simulator import SimConfig, SimulatedCohort, null_panel, simulate_cohort, split_stages, two_sided_p
from errors import UnsupportedDesignError, ValidationError
from genetic_model import direct_causal_model
from power_engine import TwoStageDesign
from replicates import map_replicates, substream
from significance import (
    _cholesky,
    dudbridge_adjusted_p,
    exceedance_counts,
    lin_adjusted_p,
    max_statistic_reference,
    observed_statistics,
    permutation_p,
    score_correlation,
    score_panel,
    score_z,
)


def _cohort(seed: int, n: int = 200, n_null: int = 20, rr: float | None = None) -> SimulatedCohort:
    panel = null_panel(n_null)
    if rr is not None:
        panel = (direct_causal_model(0.3, rr), *panel)
    return simulate_cohort(SimConfig(seed, n, n, panel))


def _design(cohort: SimulatedCohort, pi: float = 0.5, alpha1: float = 0.1) -> TwoStageDesign:
    return TwoStageDesign(cohort.n_subjects, pi, alpha1, None, cohort.n_markers)


def _stage1_mask(cohort: SimulatedCohort, design: TwoStageDesign, seed: int) -> np.ndarray:
    return split_stages(cohort, design.stage1_fraction, substream(seed, 0))


def test_permutation_p_counts_exceedances() -> None:
    null_maxima = np.arange(999, dtype=float)
    observed = np.array([998.5, 990.0, -1.0])

    p = permutation_p(null_maxima, observed)

    assert p.tolist() == [1 / 1000, 10 / 1000, 1.0]


def test_exceedance_counts_treat_rounding_noise_as_ties() -> None:
    null_maxima = np.array([1.0, 2.0, 3.0])
    observed = np.array([2.0, np.nextafter(2.0, 3.0), np.nextafter(2.0, 1.0), 2.5])

    assert exceedance_counts(null_maxima, observed).tolist() == [2, 2, 2, 1]
    p = permutation_p(null_maxima, observed)
    assert p[0] == p[1] == p[2] == 3 / 4


def test_score_z_has_unit_variance_over_all_relabelings() -> None:
    dosages = np.array([[0], [1], [2], [1], [0], [2]], dtype=np.uint8)
    labellings = []
    for cases in itertools.combinations(range(6), 3):
        phenotype = np.zeros(6)
        phenotype[list(cases)] = 1.0
        labellings.append(phenotype)

    z = score_z(dosages, np.stack(labellings))[:, 0]

    assert z.mean() == pytest.approx(0.0, abs=1e-12)
    assert (z**2).mean() == pytest.approx(1.0, rel=1e-12)


def test_score_correlation_is_stage_one_dosage_correlation() -> None:
    cohort = _cohort(17, n=200, n_null=6)
    stage1 = np.zeros(cohort.n_subjects, dtype=bool)
    stage1[substream(17, 1).choice(cohort.n_subjects, size=150, replace=False)] = True

    panel = score_panel(cohort, stage1)
    correlation = score_correlation(panel)

    assert np.allclose(correlation, np.corrcoef(cohort.dosages[stage1].T.astype(float)), atol=1e-10)
    assert np.allclose(panel.stage1_dosages.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(panel.contributions, panel.centred_phenotype[:, np.newaxis] * panel.centred_dosages)


def test_score_z_handles_batches_of_phenotypes() -> None:
    cohort = _cohort(1)
    phenotypes = np.stack([cohort.phenotype, cohort.phenotype[::-1]])

    batched = score_z(cohort.dosages, phenotypes)

    assert batched.shape == (2, cohort.n_markers)
    assert np.allclose(batched[0], score_z(cohort.dosages, cohort.phenotype))


def test_single_marker_adjustment_equals_raw_p() -> None:
    full = _cohort(2, n=500, n_null=0, rr=1.25)
    design = _design(full, alpha1=0.5)

    result = lin_adjusted_p(full, design, 5000, seed=2)

    assert abs(result.adjusted[0] - result.raw[0]) <= 4.0 * result.standard_error[0] + 1e-12


def test_duplicated_markers_count_once() -> None:
    base = _cohort(3, n=500, n_null=0, rr=1.25)
    column = base.dosages[:, 0]
    duplicated = SimulatedCohort(np.column_stack([column, column]), base.phenotype)
    design = _design(duplicated, alpha1=0.5)

    result = lin_adjusted_p(duplicated, design, 5000, seed=3)

    assert result.adjusted[0] == pytest.approx(result.adjusted[1], abs=1e-12)
    assert abs(result.adjusted[0] - result.raw[0]) <= 4.0 * result.standard_error[0] + 1e-12


def test_singular_score_correlation_gets_ridge(caplog: pytest.LogCaptureFixture) -> None:
    singular = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    with caplog.at_level(logging.WARNING):
        factor = _cholesky(singular)

    assert factor.shape == (3, 3)
    assert "not positive definite" in caplog.text


def test_adjusted_p_is_monotone_and_never_below_raw() -> None:
    cohort = _cohort(4, n_null=30, rr=1.4)
    design = _design(cohort, alpha1=0.3)

    result = lin_adjusted_p(cohort, design, 2000, seed=4)
    observed = observed_statistics(cohort, _stage1_mask(cohort, design, 4), design.alpha1)

    assert np.all(result.adjusted >= result.raw)
    order = np.argsort(-observed.statistic, kind="stable")
    assert np.all(np.diff(result.adjusted[order]) >= -1e-12)
    assert np.all(result.adjusted[observed.statistic == 0.0] == 1.0)


def test_lin_adjustment_does_not_depend_on_threads() -> None:
    cohort = _cohort(5)
    design = _design(cohort)

    serial = lin_adjusted_p(cohort, design, 2500, seed=5, threads=1)
    parallel = lin_adjusted_p(cohort, design, 2500, seed=5, threads=3)

    assert np.array_equal(serial.adjusted, parallel.adjusted)


def test_strong_signal_survives_permutation_adjustment() -> None:
    cohort = _cohort(6, n=500, n_null=20, rr=2.0)
    design = _design(cohort)

    result = dudbridge_adjusted_p(cohort, design, 1999, seed=6)

    assert result.adjusted[0] < 0.001
    assert result.method == "dudbridge"


def test_family_based_second_stage_is_unsupported() -> None:
    cohort = _cohort(7)
    design = _design(cohort)

    with pytest.raises(UnsupportedDesignError):
        lin_adjusted_p(cohort, design, 1000, seed=7, stage2_sampling="family")
    with pytest.raises(UnsupportedDesignError):
        dudbridge_adjusted_p(cohort, design, 100, seed=7, stage2_sampling="family")


def test_too_few_draws_are_rejected() -> None:
    cohort = _cohort(8)

    with pytest.raises(ValidationError) as excinfo:
        lin_adjusted_p(cohort, _design(cohort), 10, seed=8)

    assert excinfo.value.key == "n_draws"


def test_permutation_split_needs_enough_subjects() -> None:
    cohort = _cohort(9, n=4, n_null=3)

    with pytest.raises(ValidationError):
        dudbridge_adjusted_p(cohort, _design(cohort), 100, seed=9)


def test_reference_single_marker_matches_raw_p() -> None:
    cohort = _cohort(10, n=500, n_null=0, rr=1.2)

    reference = max_statistic_reference(cohort, 2000, seed=10)
    adjusted = reference.adjusted

    assert abs(adjusted.adjusted[0] - adjusted.raw[0]) <= 4.0 * adjusted.standard_error[0] + 1.0 / 2001


def test_reference_matches_sidak_for_independent_markers() -> None:
    cohort = _cohort(11, n=500, n_null=20)

    adjusted = max_statistic_reference(cohort, 5000, seed=11).adjusted
    sidak = 1.0 - (1.0 - adjusted.raw) ** 20

    assert np.all(np.abs(adjusted.adjusted - sidak) < 0.02 + 4.0 * adjusted.standard_error)


def test_reference_gives_duplicates_identical_p_values() -> None:
    base = _cohort(12, n=300, n_null=5)
    dosages = np.column_stack([base.dosages, base.dosages[:, 2]])
    cohort = SimulatedCohort(dosages, base.phenotype)

    adjusted = max_statistic_reference(cohort, 500, seed=12).adjusted.adjusted

    assert adjusted[2] == pytest.approx(adjusted[-1], abs=1e-12)


def test_permutation_gives_duplicated_markers_identical_p_values() -> None:
    base = _cohort(18, n=200, n_null=10)
    cohort = SimulatedCohort(np.column_stack([base.dosages, base.dosages[:, 0]]), base.phenotype)
    design = _design(cohort, alpha1=0.5)

    result = dudbridge_adjusted_p(cohort, design, 500, seed=18)

    assert result.adjusted[0] == pytest.approx(result.adjusted[-1], rel=1e-9, abs=1e-12)


def test_reference_critical_statistic_exceeds_single_test_cutoff() -> None:
    cohort = _cohort(13, n=300, n_null=20)

    reference = max_statistic_reference(cohort, 1000, seed=13, alpha=0.05)

    assert reference.critical_statistic > 1.96


@pytest.mark.slow
@pytest.mark.parametrize("rr", [None, 1.6])
def test_lin_and_permutation_methods_agree_at_two_hundred_subjects(rr: float | None) -> None:
    cohort = _cohort(14, n=100, n_null=50 if rr is None else 49, rr=rr)
    design = _design(cohort)

    lin = lin_adjusted_p(cohort, design, 20_000, seed=14)
    permuted = dudbridge_adjusted_p(cohort, design, 20_000, seed=14)
    tolerance = 0.02 + 4.0 * np.sqrt(lin.standard_error**2 + permuted.standard_error**2)

    assert cohort.n_markers == 50 and cohort.n_subjects == 200
    assert np.all(np.abs(lin.adjusted - permuted.adjusted) < tolerance)


@pytest.mark.slow
def test_permutation_min_adjusted_p_is_uniform_under_null() -> None:
    datasets = 500

    def replicate(rng: np.random.Generator, index: int) -> float:
        cohort = simulate_cohort(SimConfig(index, 100, 100, null_panel(20)), rng)
        result = dudbridge_adjusted_p(cohort, _design(cohort, alpha1=0.5), 500, seed=2000 + index)
        return float(result.adjusted.min())

    p_values = np.array(map_replicates(replicate, datasets, 19, stream=9))

    assert kstest(p_values, "uniform").pvalue > 0.01


@pytest.mark.slow
@pytest.mark.parametrize("method", ["lin", "dudbridge"])
def test_min_adjusted_p_is_calibrated_under_null(method: str) -> None:
    datasets = 500

    def replicate(rng: np.random.Generator, index: int) -> float:
        cohort = simulate_cohort(SimConfig(index, 200, 200, null_panel(20)), rng)
        design = _design(cohort)
        if method == "lin":
            result = lin_adjusted_p(cohort, design, 500, seed=1000 + index)
        else:
            result = dudbridge_adjusted_p(cohort, design, 500, seed=1000 + index)
        return float(result.adjusted.min() <= 0.05)

    hits = np.array(map_replicates(replicate, datasets, 15, stream=9))
    se = math.sqrt(0.05 * 0.95 / datasets)

    assert abs(hits.mean() - 0.05) < 4.0 * se


def test_raw_p_uses_two_hurdle_tail_without_hurdle() -> None:
    cohort = _cohort(16)
    design = _design(cohort, alpha1=1.0)

    result = lin_adjusted_p(cohort, design, 500, seed=16)
    observed = observed_statistics(cohort, _stage1_mask(cohort, design, 16), 1.0)

    assert np.allclose(result.raw, two_sided_p(observed.joint_z))
