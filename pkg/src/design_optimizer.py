"""Cost model and grid search over two-stage allocations (stage-I fraction, alpha1, n)."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from errors import NumericalError, ValidationError, require_probability
from genetic_model import direct_causal_model
from power_engine import (
    EffectSpec,
    TwoStageDesign,
    bonferroni_alpha,
    joint_two_stage_power,
    required_lambda,
    single_stage_lambda,
    single_stage_power,
    solve_joint_threshold,
    two_hurdle_null_rate,
)
from replicates import map_ordered

PI_GRID = tuple(round(0.05 + 0.01 * i, 2) for i in range(96))
ALPHA1_GRID = tuple(float(a) for a in np.logspace(-5.0, -1.0, 60))
REFINE_FACTOR = 10
GENOME_WIDE_MARKERS = 500_000
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModel:
    cost_ratio: float
    stage1_unit_cost: float = 1.0
    flanking_per_hit: int = 0

    def __post_init__(self) -> None:
        if not self.cost_ratio > 0.0:
            raise ValidationError("cost_ratio", self.cost_ratio, "must be > 0")
        if not self.stage1_unit_cost > 0.0:
            raise ValidationError("stage1_unit_cost", self.stage1_unit_cost, "must be > 0")
        if self.flanking_per_hit < 0:
            raise ValidationError("flanking_per_hit", self.flanking_per_hit, "must be >= 0")


@dataclass(frozen=True)
class DesignConstraints:
    fwer_target: float
    power_target: float | None
    effect: EffectSpec
    n_markers: int
    n_max: int | None = None
    case_fraction: float = 0.5
    effective_tests: int | None = None

    def __post_init__(self) -> None:
        require_probability("fwer_target", self.fwer_target)
        if self.power_target is not None:
            require_probability("power_target", self.power_target)
        if self.n_markers < 1:
            raise ValidationError("n_markers", self.n_markers, "must be >= 1")
        if self.n_max is not None and self.n_max < 2:
            raise ValidationError("n_max", self.n_max, "must be >= 2")

    def require_power_target(self) -> float:
        if self.power_target is None:
            raise ValidationError("power_target", None, "a power target is required")
        return self.power_target


@dataclass(frozen=True)
class GridCell:
    stage1_fraction: float
    alpha1: float
    alpha_joint: float | None
    n_total: int | None
    total_cost: float | None
    stage1_cost_share: float | None
    power: float | None
    feasible: bool


@dataclass(frozen=True)
class OptimizedDesign:
    design: TwoStageDesign
    total_cost: float
    stage1_cost_share: float
    cost_vs_one_stage: float
    power: float
    null_rate: float
    one_stage_n: int
    one_stage_cost: float
    # Ratio against a one-stage design genotyping the same number of subjects.
    cost_vs_one_stage_equal_n: float
    grid: tuple[GridCell, ...] = ()


def stage_costs(
    n_total: float,
    stage1_fraction: float,
    alpha1: float,
    n_markers: int,
    cost: CostModel,
) -> tuple[float, float]:
    """Stage-I cost and expected stage-II cost (null-dominant hit count m * alpha1)."""
    stage1 = cost.stage1_unit_cost * n_markers * stage1_fraction * n_total
    hits = n_markers * alpha1 * (1 + cost.flanking_per_hit)
    stage2 = cost.stage1_unit_cost * cost.cost_ratio * hits * (1.0 - stage1_fraction) * n_total
    return stage1, stage2


def expected_cost(design: TwoStageDesign, cost: CostModel) -> tuple[float, float]:
    stage1, stage2 = stage_costs(
        design.n_total, design.stage1_fraction, design.alpha1, design.n_markers, cost
    )
    total = stage1 + stage2
    return total, (stage1 / total if total > 0.0 else 1.0)


def stage2_marker_count(design: TwoStageDesign, cost: CostModel) -> float:
    return design.n_markers * design.alpha1 * (1 + cost.flanking_per_hit)


def _cost_per_subject(stage1_fraction: float, alpha1: float, n_markers: int, cost: CostModel) -> float:
    stage1, stage2 = stage_costs(1.0, stage1_fraction, alpha1, n_markers, cost)
    return stage1 + stage2


def _smallest_n(lambda_needed: float, lambda_per_subject: float, power_ok) -> int:
    n = max(2, math.ceil(lambda_needed / lambda_per_subject - 1e-9))
    while not power_ok(n):
        n += 1
    return n


def one_stage_equivalent(constraints: DesignConstraints, cost: CostModel) -> tuple[int, float]:
    power_target = constraints.require_power_target()
    alpha = bonferroni_alpha(constraints.fwer_target, constraints.n_markers, constraints.effective_tests)
    if constraints.effect.is_null or power_target <= alpha:
        raise NumericalError("one_stage_equivalent", "unattainable: null effect cannot reach the power target")

    lam = single_stage_lambda(alpha, power_target)
    per_subject = constraints.effect.lambda_per_subject
    n = _smallest_n(lam, per_subject, lambda k: single_stage_power(per_subject * k, alpha) >= power_target)
    if constraints.n_max is not None and n > constraints.n_max:
        raise NumericalError("one_stage_equivalent", f"unattainable: needs n={n} > n_max={constraints.n_max}")
    return n, cost.stage1_unit_cost * constraints.n_markers * n


@functools.lru_cache(maxsize=None)
def _solved_threshold(stage1_fraction: float, alpha1: float, fwer: float, n_markers: int) -> float | None:
    draft = TwoStageDesign(1, stage1_fraction, alpha1, None, n_markers)
    try:
        return solve_joint_threshold(draft, fwer, n_markers)
    except NumericalError:
        return None


@functools.lru_cache(maxsize=None)
def _required_lambda(
    stage1_fraction: float,
    alpha1: float,
    fwer: float,
    n_markers: int,
    power_target: float,
) -> tuple[float, float] | None:
    alpha_joint = _solved_threshold(stage1_fraction, alpha1, fwer, n_markers)
    if alpha_joint is None:
        return None
    design = TwoStageDesign(1, stage1_fraction, alpha1, alpha_joint, n_markers)
    return alpha_joint, required_lambda(design, power_target)


def _design_for(constraints: DesignConstraints, stage1_fraction: float, alpha1: float, alpha_joint: float, n: int) -> TwoStageDesign:
    return TwoStageDesign(
        n_total=n,
        stage1_fraction=stage1_fraction,
        alpha1=alpha1,
        alpha_joint=alpha_joint,
        n_markers=constraints.n_markers,
        effective_tests=constraints.effective_tests,
        case_fraction=constraints.case_fraction,
    )


def _min_cost_cell(constraints: DesignConstraints, cost: CostModel, stage1_fraction: float, alpha1: float) -> GridCell:
    power_target = constraints.require_power_target()
    solved = _required_lambda(stage1_fraction, alpha1, constraints.fwer_target, constraints.n_markers, power_target)
    infeasible = GridCell(stage1_fraction, alpha1, None, None, None, None, None, False)
    if solved is None:
        return infeasible
    alpha_joint, lambda_needed = solved
    per_subject = constraints.effect.lambda_per_subject
    draft = _design_for(constraints, stage1_fraction, alpha1, alpha_joint, 1)
    n = _smallest_n(
        lambda_needed,
        per_subject,
        lambda k: joint_two_stage_power(draft, per_subject * k) >= power_target,
    )
    if constraints.n_max is not None and n > constraints.n_max:
        return replace(infeasible, alpha_joint=alpha_joint, n_total=n)
    design = draft.with_n_total(n)
    total, share = expected_cost(design, cost)
    return GridCell(
        stage1_fraction,
        alpha1,
        alpha_joint,
        n,
        total,
        share,
        joint_two_stage_power(design, per_subject * n),
        True,
    )


def _refined_axes(
    best: GridCell,
    pi_grid: Sequence[float],
    alpha1_grid: Sequence[float],
) -> tuple[list[float], list[float]]:
    pi_step = (max(pi_grid) - min(pi_grid)) / max(1, len(pi_grid) - 1)
    log_step = (math.log(max(alpha1_grid)) - math.log(min(alpha1_grid))) / max(1, len(alpha1_grid) - 1)
    fine_pi = sorted(
        {
            round(best.stage1_fraction + pi_step * k / REFINE_FACTOR, 6)
            for k in range(-REFINE_FACTOR, REFINE_FACTOR + 1)
            if min(pi_grid) <= best.stage1_fraction + pi_step * k / REFINE_FACTOR <= 1.0
        }
    )
    center = math.log(best.alpha1)
    fine_alpha = sorted(
        {
            math.exp(center + log_step * k / REFINE_FACTOR)
            for k in range(-REFINE_FACTOR, REFINE_FACTOR + 1)
            if center + log_step * k / REFINE_FACTOR <= 0.0
        }
    )
    return fine_pi, fine_alpha


def _cheapest(cells: Sequence[GridCell]) -> GridCell | None:
    feasible = [cell for cell in cells if cell.feasible]
    if not feasible:
        return None
    return min(feasible, key=lambda cell: (cell.total_cost, cell.stage1_fraction, cell.alpha1))


def _evaluate_grid(fn, pi_values: Sequence[float], alpha_values: Sequence[float], threads: int) -> list[GridCell]:
    pairs = [(pi, alpha1) for pi in pi_values for alpha1 in alpha_values]
    logger.info("[GRID] evaluating %s cells", len(pairs))
    return map_ordered(lambda pair: fn(*pair), pairs, threads)


def _finish(
    best: GridCell,
    constraints: DesignConstraints,
    cost: CostModel,
    grid: Sequence[GridCell],
) -> OptimizedDesign:
    assert best.alpha_joint is not None and best.n_total is not None and best.total_cost is not None
    design = _design_for(constraints, best.stage1_fraction, best.alpha1, best.alpha_joint, best.n_total)
    power = joint_two_stage_power(design, constraints.effect.noncentrality(best.n_total))
    comparison = replace(constraints, power_target=min(power, 1.0 - 1e-9), n_max=None)
    one_stage_n, one_stage_cost = one_stage_equivalent(comparison, cost)
    equal_n_cost = cost.stage1_unit_cost * constraints.n_markers * best.n_total
    return OptimizedDesign(
        design=design,
        total_cost=best.total_cost,
        stage1_cost_share=float(best.stage1_cost_share),
        cost_vs_one_stage=best.total_cost / one_stage_cost,
        power=power,
        null_rate=two_hurdle_null_rate(design),
        one_stage_n=one_stage_n,
        one_stage_cost=one_stage_cost,
        cost_vs_one_stage_equal_n=best.total_cost / equal_n_cost,
        grid=tuple(grid),
    )


def optimize_min_cost(
    constraints: DesignConstraints,
    cost: CostModel,
    *,
    pi_grid: Sequence[float] = PI_GRID,
    alpha1_grid: Sequence[float] = ALPHA1_GRID,
    refine: bool = True,
    threads: int = 1,
) -> OptimizedDesign:
    constraints.require_power_target()
    if constraints.effect.is_null:
        raise NumericalError("optimize_min_cost", "infeasible: null effect")

    def evaluate(pi: float, alpha1: float) -> GridCell:
        return _min_cost_cell(constraints, cost, pi, alpha1)

    grid = _evaluate_grid(evaluate, pi_grid, alpha1_grid, threads)
    best = _cheapest(grid)
    if best is None:
        raise NumericalError("optimize_min_cost", "infeasible: no design meets the power target under n_max")
    if refine:
        fine_pi, fine_alpha = _refined_axes(best, pi_grid, alpha1_grid)
        refined = _cheapest([best, *_evaluate_grid(evaluate, fine_pi, fine_alpha, threads)])
        best = refined or best
    logger.info(
        "[GRID] incumbent pi=%.3f alpha1=%.3g n=%s cost=%.4g",
        best.stage1_fraction,
        best.alpha1,
        best.n_total,
        best.total_cost,
    )
    return _finish(best, constraints, cost, grid)


def _max_power_cell(
    constraints: DesignConstraints,
    cost: CostModel,
    budget: float,
    stage1_fraction: float,
    alpha1: float,
) -> GridCell:
    infeasible = GridCell(stage1_fraction, alpha1, None, None, None, None, None, False)
    alpha_joint = _solved_threshold(stage1_fraction, alpha1, constraints.fwer_target, constraints.n_markers)
    if alpha_joint is None:
        return infeasible
    per_subject_cost = _cost_per_subject(stage1_fraction, alpha1, constraints.n_markers, cost)
    n = math.floor(budget / per_subject_cost * (1.0 + 1e-12))
    if constraints.n_max is not None:
        n = min(n, constraints.n_max)
    if n < 2:
        return replace(infeasible, alpha_joint=alpha_joint)
    design = _design_for(constraints, stage1_fraction, alpha1, alpha_joint, n)
    total, share = expected_cost(design, cost)
    power = joint_two_stage_power(design, constraints.effect.noncentrality(n))
    return GridCell(stage1_fraction, alpha1, alpha_joint, n, total, share, power, True)


def optimize_max_power(
    budget: float,
    cost: CostModel,
    constraints: DesignConstraints,
    *,
    pi_grid: Sequence[float] = PI_GRID,
    alpha1_grid: Sequence[float] = ALPHA1_GRID,
    threads: int = 1,
) -> OptimizedDesign:
    if not budget > 0.0:
        raise ValidationError("budget", budget, "must be > 0")

    def evaluate(pi: float, alpha1: float) -> GridCell:
        return _max_power_cell(constraints, cost, budget, pi, alpha1)

    grid = _evaluate_grid(evaluate, pi_grid, alpha1_grid, threads)
    feasible = [cell for cell in grid if cell.feasible]
    if not feasible:
        raise NumericalError("optimize_max_power", f"budget {budget:.4g} is below every feasible design")
    best = min(
        feasible,
        key=lambda cell: (-cell.power, cell.total_cost, cell.stage1_fraction, cell.alpha1),
    )
    logger.info("[GRID] max-power incumbent pi=%.3f alpha1=%.3g power=%.4f", best.stage1_fraction, best.alpha1, best.power)
    achieved = min(max(best.power, 1e-9), 1.0 - 1e-9)
    return _finish(best, replace(constraints, power_target=achieved), cost, grid)


def default_effect(case_fraction: float = 0.5) -> EffectSpec:
    """Per-allele RR 1.5 at a causal marker with minor allele frequency 0.2."""
    return EffectSpec.from_model(direct_causal_model(0.2, 1.5), case_fraction)


def genome_wide_constraints(n_markers: int = GENOME_WIDE_MARKERS, fwer: float = 0.05, power_target: float = 0.80) -> DesignConstraints:
    return DesignConstraints(
        fwer_target=fwer,
        power_target=power_target,
        effect=default_effect(),
        n_markers=n_markers,
    )


def grid_rows(result: OptimizedDesign) -> list[dict[str, object]]:
    return [
        {
            "pi": cell.stage1_fraction,
            "alpha1": cell.alpha1,
            "alpha_joint": cell.alpha_joint,
            "n_total": cell.n_total,
            "total_cost": cell.total_cost,
            "stage1_cost_share": cell.stage1_cost_share,
            "power": cell.power,
            "feasible": cell.feasible,
        }
        for cell in result.grid
    ]
