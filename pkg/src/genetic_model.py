"""Exact gamete-level algebra for a biallelic marker in LD with a biallelic causal variant.

Disease risk is multiplicative in the causal allele (risk 1 for G=0, ``rr_causal``
for G=1). Controls follow the population gamete distribution in the rare-disease
limit; an optional baseline risk relaxes that approximation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import ValidationError, require_probability

CONTROL = 0
CASE = 1
MAJOR = 0
MINOR = 1
OUTCOME_LABELS = ("control", "case")
ALLELE_LABELS = ("major", "minor")
FEASIBILITY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class MarkerCausalModel:
    marker_freq: float
    causal_freq: float
    delta: float
    rr_causal: float

    def __post_init__(self) -> None:
        require_probability("marker_freq", self.marker_freq)
        require_probability("causal_freq", self.causal_freq)
        if not self.rr_causal >= 0.0:
            raise ValidationError("rr_causal", self.rr_causal, "must be >= 0")
        low, high = delta_bounds(self.marker_freq, self.causal_freq)
        if not (low - FEASIBILITY_TOLERANCE <= self.delta <= high + FEASIBILITY_TOLERANCE):
            raise ValidationError(
                "delta",
                self.delta,
                f"outside feasible interval [{low:.6g}, {high:.6g}]",
            )

    @property
    def has_causal_effect(self) -> bool:
        return self.rr_causal != 1.0

    @property
    def marker_associated(self) -> bool:
        return self.rr_causal != 1.0 and self.delta != 0.0

    def gamete_probabilities(self) -> np.ndarray:
        """Population probabilities indexed [marker allele, causal allele]."""
        p_m, p_g = self.marker_freq, self.causal_freq
        minor_causal = p_m * p_g + self.delta
        table = np.array(
            [
                [1.0 - p_m - p_g + minor_causal, p_g - minor_causal],
                [p_m - minor_causal, minor_causal],
            ]
        )
        # Clip rounding noise at the D' = +/-1 boundary.
        return np.clip(table, 0.0, 1.0)


@dataclass(frozen=True)
class GameteCellTable:
    """Joint gamete classes per outcome plus carrier posteriors.

    ``joint[y, marker, causal]`` sums to 1 over the last two axes for each outcome;
    ``conditional_carrier[y, marker]`` is Pr(G=1 | marker allele, Y).
    """

    joint: np.ndarray
    conditional_carrier: np.ndarray
    marker_rr: float

    def cell(self, outcome: int, marker_allele: int, causal_allele: int) -> float:
        return float(self.joint[outcome, marker_allele, causal_allele])

    def carrier(self, outcome: int, marker_allele: int) -> float:
        return float(self.conditional_carrier[outcome, marker_allele])

    def marker_allele_freq(self, outcome: int) -> float:
        return float(self.joint[outcome, MINOR, :].sum())


def delta_bounds(marker_freq: float, causal_freq: float) -> tuple[float, float]:
    p_m = require_probability("marker_freq", marker_freq)
    p_g = require_probability("causal_freq", causal_freq)
    low = max(-p_m * p_g, -(1.0 - p_m) * (1.0 - p_g))
    high = min(p_m * (1.0 - p_g), (1.0 - p_m) * p_g)
    return low, high


def _risk_weights(rr_causal: float) -> np.ndarray:
    return np.array([1.0, rr_causal])


def _validate_baseline_risk(model: MarkerCausalModel, baseline_risk: float | None) -> None:
    if baseline_risk is None:
        return
    if not 0.0 < baseline_risk < 1.0:
        raise ValidationError("baseline_risk", baseline_risk, "must lie in (0, 1)")
    if baseline_risk * max(1.0, model.rr_causal) > 1.0:
        raise ValidationError(
            "baseline_risk",
            baseline_risk,
            f"baseline_risk * rr_causal exceeds 1 (rr_causal={model.rr_causal})",
        )


def _carrier_posterior(joint: np.ndarray) -> np.ndarray:
    totals = joint.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        posterior = np.where(totals > 0.0, joint[..., 1] / totals, 0.0)
    return posterior


def _population_marker_rr(model: MarkerCausalModel) -> float:
    population = model.gamete_probabilities()
    carrier_minor = population[MINOR, 1] / population[MINOR].sum()
    carrier_major = population[MAJOR, 1] / population[MAJOR].sum()
    rr = model.rr_causal
    return float(
        (carrier_minor * rr + (1.0 - carrier_minor)) / (carrier_major * rr + (1.0 - carrier_major))
    )


def cell_table(model: MarkerCausalModel, baseline_risk: float | None = None) -> GameteCellTable:
    _validate_baseline_risk(model, baseline_risk)
    population = model.gamete_probabilities()
    weights = _risk_weights(model.rr_causal)
    cases = population * weights[np.newaxis, :]
    if baseline_risk is None:
        controls = population.copy()
    else:
        controls = population * (1.0 - baseline_risk * weights)[np.newaxis, :]
    case_total = cases.sum()
    if case_total <= 0.0:
        raise ValidationError("rr_causal", model.rr_causal, "no case mass under this model")
    joint = np.stack([controls / controls.sum(), cases / case_total])
    return GameteCellTable(
        joint=joint,
        conditional_carrier=_carrier_posterior(joint),
        marker_rr=_population_marker_rr(model),
    )


def enumerate_cells(model: MarkerCausalModel) -> dict[tuple[int, int, int], float]:
    """Brute-force enumeration over 4 gamete classes x 2 outcomes (rare-disease limit)."""
    p_m, p_g = model.marker_freq, model.causal_freq
    unnormalized: dict[tuple[int, int, int], float] = {}
    for outcome in (CONTROL, CASE):
        for marker_allele in (MAJOR, MINOR):
            for causal_allele in (0, 1):
                pr_marker = p_m if marker_allele == MINOR else 1.0 - p_m
                pr_causal = p_g if causal_allele == 1 else 1.0 - p_g
                sign = 1.0 if marker_allele == causal_allele else -1.0
                probability = pr_marker * pr_causal + sign * model.delta
                risk = model.rr_causal if causal_allele == 1 else 1.0
                if outcome == CASE:
                    probability *= risk
                unnormalized[(outcome, marker_allele, causal_allele)] = max(probability, 0.0)
    cells: dict[tuple[int, int, int], float] = {}
    for outcome in (CONTROL, CASE):
        total = sum(value for key, value in unnormalized.items() if key[0] == outcome)
        for key, value in unnormalized.items():
            if key[0] == outcome:
                cells[key] = value / total
    return cells


def marker_rr(model: MarkerCausalModel) -> float:
    return cell_table(model).marker_rr


def r_squared(model: MarkerCausalModel) -> float:
    p_m, p_g = model.marker_freq, model.causal_freq
    denominator = p_m * (1.0 - p_m) * p_g * (1.0 - p_g)
    if denominator <= 0.0:
        raise ValidationError("marker_freq", p_m, "degenerate allele frequency")
    return min(1.0, model.delta**2 / denominator)


def d_prime(model: MarkerCausalModel) -> float:
    low, high = delta_bounds(model.marker_freq, model.causal_freq)
    if model.delta >= 0.0:
        return model.delta / high if high > 0.0 else 0.0
    return model.delta / abs(low) if low < 0.0 else 0.0


def model_from_d_prime(
    marker_freq: float,
    causal_freq: float,
    d_prime_value: float,
    rr_causal: float,
) -> MarkerCausalModel:
    if not -1.0 <= d_prime_value <= 1.0:
        raise ValidationError("d_prime", d_prime_value, "must lie in [-1, 1]")
    low, high = delta_bounds(marker_freq, causal_freq)
    delta = d_prime_value * high if d_prime_value >= 0.0 else d_prime_value * abs(low)
    return MarkerCausalModel(marker_freq, causal_freq, delta, rr_causal)


def direct_causal_model(allele_freq: float, rr_causal: float) -> MarkerCausalModel:
    """Marker that is itself the causal variant (perfect LD, matched frequencies)."""
    return model_from_d_prime(allele_freq, allele_freq, 1.0, rr_causal)


def null_model(marker_freq: float, causal_freq: float = 0.5) -> MarkerCausalModel:
    return MarkerCausalModel(marker_freq, causal_freq, 0.0, 1.0)


def table1_models() -> list[tuple[str, MarkerCausalModel]]:
    """The four illustration blocks, Pr(M)=0.2 and Pr(G)=0.05."""
    return [
        ("positive LD, positive causal association", MarkerCausalModel(0.2, 0.05, 0.036, 2.0)),
        ("negative LD, negative causal association", MarkerCausalModel(0.2, 0.05, -0.010, 0.0)),
        ("negative LD, positive causal association", MarkerCausalModel(0.2, 0.05, -0.010, 3.0)),
        ("positive LD, negative causal association", MarkerCausalModel(0.2, 0.05, 0.036, 0.5)),
    ]


def table1_rows(label: str, model: MarkerCausalModel) -> list[dict[str, object]]:
    table = cell_table(model)
    rows: list[dict[str, object]] = []
    for marker_allele in (MAJOR, MINOR):
        for outcome in (CONTROL, CASE):
            rows.append(
                {
                    "block": label,
                    "delta": model.delta,
                    "rr_causal": model.rr_causal,
                    "marker_rr": table.marker_rr,
                    "marker_allele": ALLELE_LABELS[marker_allele],
                    "outcome": OUTCOME_LABELS[outcome],
                    "g0": table.cell(outcome, marker_allele, 0),
                    "g1": table.cell(outcome, marker_allele, 1),
                    "carrier_probability": table.carrier(outcome, marker_allele),
                }
            )
    return rows
