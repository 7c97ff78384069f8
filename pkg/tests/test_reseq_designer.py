from __future__ import annotations

import logging
import math

import numpy as np
import pytest
import statsmodels.api as sm

from cohort_simulator import SimConfig, null_panel, simulate_cohort
from errors import ValidationError
from genetic_model import (
    CASE,
    CONTROL,
    MAJOR,
    MINOR,
    MarkerCausalModel,
    cell_table,
    direct_causal_model,
    model_from_d_prime,
    null_model,
)
from replicates import substream
from reseq_designer import (
    SamplingPlan,
    Stratum,
    assign_bins,
    expected_population,
    fit_risk_index,
    offset_recovery_study,
    offsets_from_fractions,
    plan_rows,
    quantile_bins,
    recommend_plan,
    risk_index_scenario,
    risk_index_yields,
    sampling_offsets,
    simulate_stratified_substudy,
    stratum_yields,
)

BLOCK1 = MarkerCausalModel(0.2, 0.05, 0.036, 2.0)
BLOCK2 = MarkerCausalModel(0.2, 0.05, -0.010, 0.0)
BLOCK4 = MarkerCausalModel(0.2, 0.05, 0.036, 0.5)


def _sampled(plan: SamplingPlan) -> dict[tuple[int, int], int]:
    return {(s.outcome, s.marker_class): s.sampled for s in plan.strata}


def test_case_minor_stratum_has_highest_yield_for_positive_association() -> None:
    yields = stratum_yields(BLOCK1)

    assert yields.argmax == (CASE, MINOR)
    assert yields.yields[(CASE, MINOR)] == pytest.approx(0.374, abs=5e-4)


def test_control_major_stratum_wins_for_protective_variant_in_negative_ld() -> None:
    yields = stratum_yields(BLOCK2)

    assert yields.argmax == (CONTROL, MAJOR)
    assert yields.yields[(CONTROL, MAJOR)] == pytest.approx(0.0625, abs=1e-12)


def test_null_model_yields_equal_causal_frequency_everywhere() -> None:
    yields = stratum_yields(MarkerCausalModel(0.2, 0.05, 0.0, 1.0))

    assert all(value == pytest.approx(0.05, abs=1e-12) for value in yields.yields.values())


def test_argmax_is_the_largest_yield_for_random_models() -> None:
    rng = np.random.default_rng(3)
    for _ in range(40):
        model = model_from_d_prime(
            float(rng.uniform(0.05, 0.5)),
            float(rng.uniform(0.01, 0.3)),
            float(rng.uniform(-1.0, 1.0)),
            float(rng.uniform(0.0, 4.0)),
        )
        yields = stratum_yields(model)
        assert yields.yields[yields.argmax] == max(yields.yields.values())


def test_discovery_plan_spends_everything_on_the_best_stratum() -> None:
    plan = recommend_plan(BLOCK1, 96, "discovery")

    assert _sampled(plan) == {(CASE, MINOR): 96, (CONTROL, MINOR): 0, (CASE, MAJOR): 0, (CONTROL, MAJOR): 0}
    assert plan.budget == 96


def test_discovery_plan_overflows_exhausted_stratum(caplog: pytest.LogCaptureFixture) -> None:
    population = {(CASE, MINOR): 10, (CONTROL, MINOR): 50, (CASE, MAJOR): 50, (CONTROL, MAJOR): 50}

    with caplog.at_level(logging.INFO):
        plan = recommend_plan(BLOCK1, 30, "discovery", population)

    assert _sampled(plan)[(CASE, MINOR)] == 10
    assert _sampled(plan)[(CONTROL, MINOR)] == 20
    assert "exhausted" in caplog.text


def test_discovery_plan_spreads_evenly_when_yields_are_flat() -> None:
    plan = recommend_plan(null_model(0.2, 0.05), 96, "discovery")

    assert set(_sampled(plan).values()) == {24}


def test_joint_plan_follows_yield_ordering_for_negative_association() -> None:
    plan = recommend_plan(BLOCK4, 96, "joint")
    sampled = _sampled(plan)

    assert sum(sampled.values()) == 96
    assert all(count > 0 for count in sampled.values())
    assert sampled[(CONTROL, MINOR)] >= sampled[(CASE, MINOR)]
    assert sampled[(CASE, MINOR)] >= sampled[(CONTROL, MAJOR)]
    assert sampled[(CONTROL, MAJOR)] >= sampled[(CASE, MAJOR)]


def test_joint_plan_is_even_under_the_null() -> None:
    plan = recommend_plan(null_model(0.2, 0.05), 96, "joint")

    assert set(_sampled(plan).values()) == {24}


def test_joint_plan_needs_four_subjects_and_populated_strata() -> None:
    with pytest.raises(ValidationError) as excinfo:
        recommend_plan(BLOCK1, 3, "joint")
    assert excinfo.value.key == "budget"

    population = {(CASE, MINOR): 10, (CONTROL, MINOR): 10, (CASE, MAJOR): 0, (CONTROL, MAJOR): 10}
    with pytest.raises(ValidationError) as excinfo:
        recommend_plan(BLOCK1, 8, "joint", population)
    assert excinfo.value.key == "population"


def test_budget_above_population_and_unknown_purpose_are_rejected() -> None:
    with pytest.raises(ValidationError):
        recommend_plan(BLOCK1, 5000, "discovery")
    with pytest.raises(ValidationError) as excinfo:
        recommend_plan(BLOCK1, 10, "screening")
    assert excinfo.value.key == "purpose"


def test_expected_population_splits_each_group() -> None:
    population = expected_population(BLOCK1, 1000, 800)

    assert population[(CASE, MINOR)] + population[(CASE, MAJOR)] == 1000
    assert population[(CONTROL, MINOR)] + population[(CONTROL, MAJOR)] == 800
    assert population[(CONTROL, MINOR)] == round(800 * (1.0 - 0.8**2))


def test_sampling_offsets_are_log_fraction_ratios() -> None:
    plan = SamplingPlan(
        (
            Stratum(CASE, MINOR, 100, 100, 0.3),
            Stratum(CONTROL, MINOR, 100, 25, 0.2),
            Stratum(CASE, MAJOR, 200, 20, 0.01),
            Stratum(CONTROL, MAJOR, 400, 40, 0.005),
        ),
        "joint",
    )

    offsets = sampling_offsets(plan)

    assert offsets[MINOR] == pytest.approx(math.log(4.0))
    assert offsets[MAJOR] == pytest.approx(0.0, abs=1e-15)
    rows = plan_rows(plan)
    assert [row["offset"] for row in rows] == [offsets[MINOR], offsets[MINOR], offsets[MAJOR], offsets[MAJOR]]


def test_offsets_do_not_change_when_all_fractions_scale_together() -> None:
    fractions = {(CASE, MINOR): 0.8, (CONTROL, MINOR): 0.4, (CASE, MAJOR): 0.2, (CONTROL, MAJOR): 0.05}
    halved = {key: value / 2.0 for key, value in fractions.items()}

    original = offsets_from_fractions(fractions)
    scaled = offsets_from_fractions(halved)

    assert scaled == pytest.approx(original)
    assert original[MINOR] == pytest.approx(math.log(2.0))
    assert original[MAJOR] == pytest.approx(math.log(4.0))


def test_discovery_plan_rows_have_no_offsets() -> None:
    rows = plan_rows(recommend_plan(BLOCK1, 96, "discovery"))

    assert len(rows) == 4
    assert all(math.isnan(row["offset"]) for row in rows)
    assert rows[0]["expected_carriers"] == pytest.approx(96 * rows[0]["carrier_yield"])


def test_single_marker_risk_index_reproduces_stratum_yields() -> None:
    coefficient = math.log(cell_table(BLOCK1).marker_rr)
    edges = np.array([-np.inf, coefficient / 2.0, np.inf])

    result = risk_index_yields([BLOCK1], [coefficient], n_draws=200_000, seed=4, edges=edges)
    table = cell_table(BLOCK1)

    for bin_index, marker_class in ((0, MAJOR), (1, MINOR)):
        expected_case = table.carrier(CASE, marker_class)
        expected_control = table.carrier(CONTROL, marker_class)
        assert abs(result.case_yield[bin_index] - expected_case) < 4.0 * result.case_se[bin_index] + 1e-9
        assert abs(result.control_yield[bin_index] - expected_control) < 4.0 * result.control_se[bin_index] + 1e-9


def test_risk_index_yields_are_flat_without_ld() -> None:
    models = [MarkerCausalModel(0.2, 0.05, 0.0, 2.0), MarkerCausalModel(0.3, 0.05, 0.0, 2.0)]
    case_carrier = 0.05 * 2.0 / (0.95 + 0.05 * 2.0)

    result = risk_index_yields(models, [0.5, 0.3], n_draws=100_000, seed=5, n_bins=3)
    filled = result.case_count > 0

    assert np.all(np.abs(result.case_yield[filled] - case_carrier) < 4.0 * result.case_se[filled] + 1e-9)
    filled = result.control_count > 0
    assert np.all(np.abs(result.control_yield[filled] - 0.05) < 4.0 * result.control_se[filled] + 1e-9)


def test_five_marker_index_concentrates_carriers_in_top_bin() -> None:
    models, coefficients = risk_index_scenario()

    result = risk_index_yields(models, coefficients, n_draws=200_000, seed=6)
    spread = 4.0 * np.hypot(result.case_se[-1], result.case_se[0])

    assert len(models) == 5
    assert result.edges[0] == -np.inf and result.edges[-1] == np.inf
    assert result.case_yield[-1] > result.case_yield[0] + spread
    combined = 4.0 * np.hypot(result.case_se, result.control_se)
    assert np.all(result.case_yield > result.control_yield - combined)


def test_five_marker_yield_curves_are_nondecreasing_in_score() -> None:
    models, coefficients = risk_index_scenario()

    result = risk_index_yields(models, coefficients, n_draws=200_000, seed=11)

    for rates, se in ((result.case_yield, result.case_se), (result.control_yield, result.control_se)):
        allowance = 4.0 * np.hypot(se[:-1], se[1:])
        assert np.all(np.diff(rates) > -allowance)


def test_risk_index_rejects_markers_of_different_variants() -> None:
    with pytest.raises(ValidationError) as excinfo:
        risk_index_yields([BLOCK1, MarkerCausalModel(0.2, 0.1, 0.0, 2.0)], [0.1, 0.1], n_draws=100, seed=0)

    assert excinfo.value.key == "models"


def test_unsampled_substudy_keeps_everyone_with_zero_offsets() -> None:
    fractions = {(CASE, MINOR): 1.0, (CONTROL, MINOR): 1.0, (CASE, MAJOR): 1.0, (CONTROL, MAJOR): 1.0}

    x, y, offsets = simulate_stratified_substudy(substream(7, 0), fractions, n_population=500)

    assert x.size == y.size == 500
    assert np.all(offsets == 0.0)


def test_unlisted_and_one_sided_strata_are_left_out_of_offsets() -> None:
    fractions = {(CASE, MINOR): 1.0, (CONTROL, MINOR): 0.5, (CONTROL, MAJOR): 0.5}

    x, y, offsets = simulate_stratified_substudy(substream(12, 0), fractions, n_population=2000)

    assert not np.any((x == MAJOR) & (y == CASE))
    assert np.all(offsets[x == MINOR] == math.log(2.0))
    assert np.all(offsets[x == MAJOR] == 0.0)
    assert offsets_from_fractions(fractions) == {MINOR: math.log(2.0)}


@pytest.mark.slow
def test_offsets_recover_the_population_odds_ratio() -> None:
    study = offset_recovery_study(500, seed=8)

    assert study.coverage >= 0.91
    assert abs(study.offset_bias) < 4.0 * study.offset_bias_se + 0.01
    assert study.plain_bias == pytest.approx(-math.log(2.0), abs=4.0 * study.plain_bias_se + 0.01)
    assert abs(study.plain_bias) > 3.0 * study.plain_bias_se


def test_fitted_risk_index_matches_statsmodels_logit() -> None:
    panel = (direct_causal_model(0.3, 2.0), *null_panel(2))
    cohort = simulate_cohort(SimConfig(9, 800, 800, panel))
    design = sm.add_constant(cohort.dosages.astype(float), has_constant="add")

    index = fit_risk_index(cohort.dosages, cohort.phenotype)
    reference = sm.GLM(cohort.phenotype.astype(float), design, family=sm.families.Binomial()).fit()

    assert index.intercept == pytest.approx(reference.params[0], abs=1e-6)
    assert np.allclose(index.coefficients, reference.params[1:], atol=1e-6)
    assert np.allclose(index.score(cohort.dosages), cohort.dosages @ index.coefficients)


def test_quantile_bins_cover_every_score() -> None:
    scores = substream(10, 0).normal(size=1000)

    edges = quantile_bins(scores, 4)
    bins = assign_bins(scores, edges)

    assert edges[0] == -np.inf and edges[-1] == np.inf
    assert np.all(np.diff(edges) > 0.0)
    assert bins.min() == 0 and bins.max() == 3
    assert np.all(np.bincount(bins) == 250)


def test_discrete_scores_merge_duplicate_edges() -> None:
    scores = np.repeat([0.0, 1.0], [900, 100])

    edges = quantile_bins(scores, 5)

    assert edges.tolist() == [-np.inf, 0.0, np.inf]
    assert np.bincount(assign_bins(scores, edges)).tolist() == [900, 100]
