"""Analytic size and power for one-stage and joint two-stage association scans.

The joint statistic is Z_joint = sqrt(pi) * Z1 + sqrt(1 - pi) * Z2, with pi the
stage-I fraction, so Corr(Z1, Z_joint) = sqrt(pi). A marker is discovered when it
passes the stage-I hurdle |Z1| > z(alpha1/2), the joint statistic has the same sign
as Z1, and |Z_joint| > z(alpha_joint/2). All tests are two-sided.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from errors import NumericalError, ValidationError, require_probability
from genetic_model import CASE, CONTROL, MarkerCausalModel, cell_table

# Absolute accuracy required from every bivariate-normal evaluation.
ORTHANT_ABS_TOL = 1e-10
# Half-width (in standard deviations) of the window the orthant integral is taken over.
ORTHANT_WINDOW = 12.0
THRESHOLD_REL_TOL = 1e-6
DEFAULT_FWER = 0.05
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwoStageDesign:
    n_total: int
    stage1_fraction: float
    alpha1: float
    alpha_joint: float | None
    n_markers: int
    effective_tests: int | None = None
    case_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.n_total < 1:
            raise ValidationError("n_total", self.n_total, "must be >= 1")
        if not 0.0 < self.stage1_fraction <= 1.0:
            raise ValidationError("stage1_fraction", self.stage1_fraction, "must lie in (0, 1]")
        if not 0.0 < self.alpha1 <= 1.0:
            raise ValidationError("alpha1", self.alpha1, "must lie in (0, 1]")
        if self.alpha_joint is not None and not 0.0 < self.alpha_joint <= self.alpha1:
            raise ValidationError("alpha_joint", self.alpha_joint, "must lie in (0, alpha1]")
        if self.n_markers < 1:
            raise ValidationError("n_markers", self.n_markers, "must be >= 1")
        if self.effective_tests is not None and self.effective_tests < 1:
            raise ValidationError("effective_tests", self.effective_tests, "must be >= 1")
        require_probability("case_fraction", self.case_fraction)

    @property
    def sign_consistency(self) -> bool:
        # Without a stage-I hurdle the rule collapses to a plain joint scan.
        return self.alpha1 < 1.0

    @property
    def bonferroni_tests(self) -> int:
        return self.effective_tests or self.n_markers

    def with_alpha_joint(self, alpha_joint: float) -> TwoStageDesign:
        return replace(self, alpha_joint=alpha_joint)

    def with_n_total(self, n_total: int) -> TwoStageDesign:
        return replace(self, n_total=n_total)

    def require_alpha_joint(self) -> float:
        if self.alpha_joint is None:
            raise ValidationError("alpha_joint", None, "joint threshold has not been solved")
        return self.alpha_joint


@dataclass(frozen=True)
class EffectSpec:
    """Noncentrality per subject for the allele-count test."""

    lambda_per_subject: float
    model: MarkerCausalModel | None = None
    case_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not self.lambda_per_subject >= 0.0:
            raise ValidationError("lambda_per_subject", self.lambda_per_subject, "must be >= 0")

    @classmethod
    def from_model(cls, model: MarkerCausalModel, case_fraction: float = 0.5) -> EffectSpec:
        return cls(noncentrality_per_subject(model, case_fraction), model, case_fraction)

    @property
    def is_null(self) -> bool:
        return self.lambda_per_subject == 0.0

    def noncentrality(self, n_total: int) -> float:
        return self.lambda_per_subject * n_total


@dataclass(frozen=True)
class CoverageDistribution:
    r2: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.r2) != len(self.weights) or not self.r2:
            raise ValidationError("coverage", len(self.r2), "r2 and weights must be non-empty and aligned")
        for value in self.r2:
            if not 0.0 <= value <= 1.0:
                raise ValidationError("coverage.r2", value, "must lie in [0, 1]")
        for weight in self.weights:
            if weight < 0.0:
                raise ValidationError("coverage.weights", weight, "must be >= 0")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValidationError("coverage.weights", sum(self.weights), "must sum to 1")

    @classmethod
    def point_mass(cls, r2: float) -> CoverageDistribution:
        return cls((r2,), (1.0,))

    @property
    def mean_r2(self) -> float:
        return sum(r * w for r, w in zip(self.r2, self.weights))


@dataclass(frozen=True)
class TypePrior:
    pi1: float
    pi2: float
    pi3: float
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        for key in ("pi1", "pi2", "pi3"):
            if getattr(self, key) < 0.0:
                raise ValidationError(key, getattr(self, key), "must be >= 0")
        if abs(self.pi1 + self.pi2 + self.pi3 - 1.0) > 1e-9:
            raise ValidationError("pi", (self.pi1, self.pi2, self.pi3), "must sum to 1")
        require_probability("beta1", self.beta1, open_interval=False)
        require_probability("beta2", self.beta2, open_interval=False)


def critical_value(alpha: float) -> float:
    """Two-sided standard normal critical value z(alpha/2)."""
    if alpha >= 1.0:
        return 0.0
    return float(-ndtri(alpha / 2.0))


def _upper_tail(z: float) -> float:
    return float(ndtr(-z))


def bivariate_upper_orthant(a: float, b: float, rho: float) -> float:
    """P(X > a, Y > b) for standard bivariate normal (X, Y) with correlation rho."""
    if not -1.0 <= rho <= 1.0:
        raise ValidationError("rho", rho, "must lie in [-1, 1]")
    if a == -math.inf:
        return _upper_tail(b)
    if b == -math.inf:
        return _upper_tail(a)
    if a == math.inf or b == math.inf:
        return 0.0
    if rho == 0.0:
        return _upper_tail(a) * _upper_tail(b)
    if rho >= 1.0 - 1e-15:
        return _upper_tail(max(a, b))
    if rho <= -1.0 + 1e-15:
        return max(0.0, float(ndtr(-b) - ndtr(a)))

    scale = math.sqrt((1.0 - rho) * (1.0 + rho))
    lower = max(a, -ORTHANT_WINDOW)
    upper = max(lower, 0.0) + ORTHANT_WINDOW

    def integrand(x: float) -> float:
        density = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return density * float(ndtr((rho * x - b) / scale))

    # Conditional mode of X given Y near b helps the adaptive rule find the mass.
    hint = rho * b
    points = [hint] if lower < hint < upper else None
    result = quad(
        integrand,
        lower,
        upper,
        points=points,
        epsabs=ORTHANT_ABS_TOL * 1e-3,
        epsrel=1e-10,
        limit=200,
        full_output=1,
    )
    value, abserr = float(result[0]), float(result[1])
    if len(result) > 3 and abserr > ORTHANT_ABS_TOL:
        raise NumericalError(
            "bivariate_upper_orthant",
            f"quadrature did not converge (a={a}, b={b}, rho={rho}, abserr={abserr:.3g}): {result[3]}",
        )
    return min(max(value, 0.0), 1.0)


def single_stage_power(lam: float, alpha: float) -> float:
    if lam < 0.0:
        raise ValidationError("lambda", lam, "must be >= 0")
    require_probability("alpha", alpha)
    shift = math.sqrt(lam)
    c = critical_value(alpha)
    return float(ndtr(shift - c) + ndtr(-c - shift))


def joint_two_stage_power(design: TwoStageDesign, lam: float) -> float:
    if lam < 0.0:
        raise ValidationError("lambda", lam, "must be >= 0")
    alpha_joint = design.require_alpha_joint()
    if not design.sign_consistency:
        return single_stage_power(lam, alpha_joint)
    pi = design.stage1_fraction
    rho = math.sqrt(pi)
    mean_stage1 = math.sqrt(pi * lam)
    mean_joint = math.sqrt(lam)
    c1 = critical_value(design.alpha1)
    cj = critical_value(alpha_joint)
    upper = bivariate_upper_orthant(c1 - mean_stage1, cj - mean_joint, rho)
    lower = bivariate_upper_orthant(c1 + mean_stage1, cj + mean_joint, rho)
    return min(1.0, upper + lower)


def two_hurdle_null_rate(design: TwoStageDesign) -> float:
    """Per-marker type-I error of the two-hurdle rule."""
    return joint_two_stage_power(design, 0.0)


def two_hurdle_tail(stage1_fraction: float, alpha1: float, joint_statistic: float) -> float:
    """Null probability that the two-hurdle rule passes with |Z_joint| at least joint_statistic."""
    t = abs(joint_statistic)
    if alpha1 >= 1.0:
        return float(2.0 * ndtr(-t))
    rho = math.sqrt(stage1_fraction)
    return min(1.0, 2.0 * bivariate_upper_orthant(critical_value(alpha1), t, rho))


def bonferroni_alpha(fwer: float, n_markers: int, effective_tests: int | None = None) -> float:
    require_probability("fwer", fwer)
    tests = effective_tests or n_markers
    if tests < 1:
        raise ValidationError("n_markers", tests, "must be >= 1")
    return fwer / tests


def noncentrality(model: MarkerCausalModel, n_total: float, case_fraction: float) -> float:
    """Noncentrality of the case/control allele-frequency z-test (2n alleles per group)."""
    require_probability("case_fraction", case_fraction)
    if n_total <= 0:
        raise ValidationError("n_total", n_total, "must be > 0")
    table = cell_table(model)
    p_case = table.marker_allele_freq(CASE)
    p_control = table.marker_allele_freq(CONTROL)
    variance = p_case * (1.0 - p_case) / (2.0 * n_total * case_fraction) + p_control * (
        1.0 - p_control
    ) / (2.0 * n_total * (1.0 - case_fraction))
    if variance <= 0.0:
        raise ValidationError("marker_freq", model.marker_freq, "degenerate marker allele frequencies")
    return (p_case - p_control) ** 2 / variance


def noncentrality_per_subject(model: MarkerCausalModel, case_fraction: float = 0.5) -> float:
    return noncentrality(model, 1, case_fraction)


def max_family_rate(stage1_fraction: float, alpha1: float, n_markers: int) -> float:
    """Family-wise null rate at the loosest joint threshold, alpha_joint = alpha1."""
    design = TwoStageDesign(1, stage1_fraction, alpha1, alpha1, n_markers)
    if not design.sign_consistency or design.stage1_fraction >= 1.0:
        return n_markers * alpha1
    return n_markers * two_hurdle_null_rate(design)


def require_attainable_threshold(key: str, stage1_fraction: float, alpha1: float, fwer: float, n_markers: int) -> None:
    """Reject stage-I settings under which no joint threshold in (0, alpha1] spends the whole fwer."""
    reachable = max_family_rate(stage1_fraction, alpha1, n_markers)
    if reachable < fwer:
        raise ValidationError(
            key,
            alpha1,
            f"family-wise rate is at most {reachable:.3g} < fwer {fwer} with stage1_fraction={stage1_fraction} "
            f"and {n_markers} markers; raise alpha1 or stage1_fraction",
        )


def solve_joint_threshold(
    design: TwoStageDesign,
    fwer_target: float = DEFAULT_FWER,
    n_markers: int | None = None,
) -> float:
    """Per-marker alpha_joint so that n_markers * null rate of the two-hurdle rule = fwer_target."""
    require_probability("fwer_target", fwer_target)
    markers = n_markers or design.n_markers
    target = fwer_target / markers
    if not design.sign_consistency or design.stage1_fraction >= 1.0:
        if target > design.alpha1:
            raise NumericalError("solve_joint_threshold", f"target rate {target:.3g} exceeds alpha1")
        return target

    def rate_excess(alpha_joint: float) -> float:
        return two_hurdle_null_rate(design.with_alpha_joint(alpha_joint)) - target

    def excess(log_alpha: float) -> float:
        return rate_excess(min(design.alpha1, math.exp(log_alpha)))

    if rate_excess(design.alpha1) < 0.0:
        raise NumericalError(
            "solve_joint_threshold",
            f"no root in (0, alpha1]: null rate at alpha_joint=alpha1 is below {target:.3g} "
            f"(alpha1={design.alpha1}, stage1_fraction={design.stage1_fraction})",
        )
    lo, hi = math.log(target), math.log(design.alpha1)
    if excess(lo) >= 0.0:
        return target
    # Bisection on log(alpha_joint); lo always keeps the rate at or below target.
    while hi - lo > THRESHOLD_REL_TOL:
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
    return min(design.alpha1, max(target, math.exp(lo)))


def required_lambda(design: TwoStageDesign, power_target: float) -> float:
    """Smallest noncentrality at which the design reaches power_target."""
    require_probability("power_target", power_target)
    size = two_hurdle_null_rate(design)
    if power_target <= size:
        return 0.0

    def shortfall(lam: float) -> float:
        return joint_two_stage_power(design, lam) - power_target

    # Both hurdles must be cleared, so each single-test requirement bounds lambda from below.
    lo = max(
        single_stage_lambda(design.require_alpha_joint(), power_target),
        single_stage_lambda(design.alpha1, power_target) / design.stage1_fraction,
    )
    hi = max(lo * 1.25, 1e-6)
    while shortfall(hi) < 0.0:
        lo, hi = hi, hi * 1.5
        if hi > 1e7:
            raise NumericalError("required_lambda", f"power {power_target} not reachable")
    if shortfall(lo) >= 0.0:
        return lo
    return float(brentq(shortfall, lo, hi, xtol=1e-10, rtol=1e-12))


def single_stage_lambda(alpha: float, power_target: float) -> float:
    """Noncentrality at which the two-sided single-stage test reaches power_target."""
    if alpha >= 1.0 or power_target <= alpha:
        return 0.0

    def shortfall(lam: float) -> float:
        return single_stage_power(lam, alpha) - power_target

    guess = (critical_value(alpha) + float(ndtri(power_target))) ** 2
    hi = max(guess, 1.0)
    while shortfall(hi) < 0.0:
        hi *= 2.0
    return float(brentq(shortfall, 0.0, hi, xtol=1e-12, rtol=1e-14))


PowerFunction = Callable[[float], float]


def power_function(test: TwoStageDesign | float) -> PowerFunction:
    """Power as a function of lambda for a two-stage design or a single-stage level."""
    if isinstance(test, TwoStageDesign):
        return lambda lam: joint_two_stage_power(test, lam)
    alpha = float(test)
    return lambda lam: single_stage_power(lam, alpha)


def coverage_averaged_power(
    test: TwoStageDesign | float,
    lambda_causal: float,
    coverage: CoverageDistribution,
) -> float:
    power = power_function(test)
    return sum(w * power(lambda_causal * r2) for r2, w in zip(coverage.r2, coverage.weights))


def power_at_mean_r2(
    test: TwoStageDesign | float,
    lambda_causal: float,
    coverage: CoverageDistribution,
) -> float:
    return power_function(test)(lambda_causal * coverage.mean_r2)


def posterior_type2(prior: TypePrior, alpha1: float) -> float:
    require_probability("alpha1", alpha1)
    detect1 = (1.0 - prior.beta1) * prior.pi1
    detect2 = (1.0 - prior.beta2) * prior.pi2
    denominator = detect1 + detect2 + alpha1 * prior.pi3
    if denominator <= 0.0:
        raise NumericalError("posterior_type2", "prior places no mass on detectable configurations")
    return detect2 / denominator


def power_grid_rows(
    designs: Sequence[TwoStageDesign],
    lambdas: Sequence[float],
) -> list[dict[str, float]]:
    rows: list[dict[str, float]] = []
    for design, lam in zip(designs, lambdas):
        rows.append(
            {
                "pi": design.stage1_fraction,
                "alpha1": design.alpha1,
                "alpha_joint": design.require_alpha_joint(),
                "lambda": lam,
                "power": joint_two_stage_power(design, lam),
                "null_rate": two_hurdle_null_rate(design),
            }
        )
    logger.debug("Evaluated %s power rows", len(rows))
    return rows
