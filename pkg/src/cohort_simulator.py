"""Synthetic case-control cohorts with known truth and end-to-end discovery pipelines.

Genotypes are diploid dosages built from two independent gametes (Hardy-Weinberg).
Controls follow the population gamete model (rare-disease limit); cases are drawn by
rejection against the maximal relative risk of the effect markers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, ndtr

from errors import NumericalError, ValidationError, require_probability
from genetic_model import MarkerCausalModel, direct_causal_model, null_model
from logistic import interaction_wald_batch
from power_engine import TwoStageDesign, critical_value
from replicates import map_replicates, substream

MAX_REJECTION_ROUNDS = 2000
MIN_GROUP_SIZE = 2
NULL_MARKER_CHUNK = 512
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExposureConfig:
    prevalence: float
    main_or: float = 1.0
    ge_association: bool = False
    # Log-odds change in exposure per marker minor allele when ge_association is on.
    ge_log_odds: float = 0.0
    interaction_or: float = 1.0
    interaction_markers: tuple[int, ...] = ()
    ge_markers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        require_probability("exposure.prevalence", self.prevalence)
        if not self.main_or > 0.0:
            raise ValidationError("exposure.main_or", self.main_or, "must be > 0")
        if not self.interaction_or > 0.0:
            raise ValidationError("exposure.interaction_or", self.interaction_or, "must be > 0")

    @property
    def associated_markers(self) -> tuple[int, ...]:
        if not self.ge_association:
            return ()
        return self.interaction_markers if self.ge_markers is None else self.ge_markers


@dataclass(frozen=True)
class SimConfig:
    seed: int
    n_cases: int
    n_controls: int
    panel: tuple[MarkerCausalModel, ...]
    exposure: ExposureConfig | None = None
    replicates: int = 1

    def __post_init__(self) -> None:
        if self.n_cases < 1:
            raise ValidationError("n_cases", self.n_cases, "must be >= 1")
        if self.n_controls < 1:
            raise ValidationError("n_controls", self.n_controls, "must be >= 1")
        if not self.panel:
            raise ValidationError("panel", 0, "at least one marker is required")
        if self.replicates < 1:
            raise ValidationError("replicates", self.replicates, "must be >= 1")
        if self.exposure is not None:
            for index in (*self.exposure.interaction_markers, *self.exposure.associated_markers):
                if not 0 <= index < len(self.panel):
                    raise ValidationError("exposure.interaction_markers", index, "marker index out of range")

    @property
    def n_markers(self) -> int:
        return len(self.panel)

    @property
    def n_subjects(self) -> int:
        return self.n_cases + self.n_controls


@dataclass(frozen=True)
class SimulatedCohort:
    dosages: np.ndarray
    phenotype: np.ndarray
    exposure: np.ndarray | None = None
    causal_dosages: np.ndarray | None = None
    truth: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.dosages.ndim != 2 or self.dosages.shape[0] != self.phenotype.shape[0]:
            raise ValidationError("dosages", self.dosages.shape, "rows must match phenotype length")
        if self.exposure is not None and self.exposure.shape != self.phenotype.shape:
            raise ValidationError("exposure", self.exposure.shape, "must match phenotype length")

    @property
    def n_subjects(self) -> int:
        return int(self.dosages.shape[0])

    @property
    def n_markers(self) -> int:
        return int(self.dosages.shape[1])

    @property
    def cases(self) -> np.ndarray:
        return self.phenotype == 1

    def subset(self, rows: np.ndarray) -> SimulatedCohort:
        return SimulatedCohort(
            dosages=self.dosages[rows],
            phenotype=self.phenotype[rows],
            exposure=None if self.exposure is None else self.exposure[rows],
            causal_dosages=None if self.causal_dosages is None else self.causal_dosages[rows],
            truth=self.truth,
        )


@dataclass(frozen=True)
class PipelineResult:
    stage1_z: np.ndarray
    selected: np.ndarray
    joint_z: np.ndarray
    discovered: np.ndarray
    odds_ratio: np.ndarray
    stage1_mask: np.ndarray
    carry_order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def direction(self) -> np.ndarray:
        effective = np.where(self.selected, self.joint_z, self.stage1_z)
        return np.sign(effective)

    @property
    def n_discoveries(self) -> int:
        return int(self.discovered.sum())


@dataclass(frozen=True)
class ReplicationResult:
    z: np.ndarray
    p: np.ndarray
    flags: np.ndarray
    replicated: np.ndarray


@dataclass(frozen=True)
class WinnersCurseResult:
    true_or: float
    mean_or: float
    bias: float
    standard_error: float
    discoveries: int
    replicates: int
    mean_or_positive: float


@dataclass(frozen=True)
class GxEResult:
    screen_z: np.ndarray
    passed: np.ndarray
    interaction_z: np.ndarray
    step2_alpha: float
    rejected: np.ndarray

    @property
    def n_passed(self) -> int:
        return int(self.passed.sum())

    @property
    def any_rejected(self) -> bool:
        return bool(self.rejected.any())


def two_sided_p(z: np.ndarray | float) -> np.ndarray:
    return 2.0 * ndtr(-np.abs(z))


def _class_cumulative(model: MarkerCausalModel) -> np.ndarray:
    # Class order: (major,G0), (major,G1), (minor,G0), (minor,G1).
    return np.cumsum(model.gamete_probabilities().ravel())[:3]


def _classes_from_uniform(u: np.ndarray, cumulative: np.ndarray) -> np.ndarray:
    return (u > cumulative[..., 0]).astype(np.uint8) + (u > cumulative[..., 1]) + (u > cumulative[..., 2])


def draw_gametes(
    model: MarkerCausalModel,
    count: int,
    rng: np.random.Generator,
    *,
    affected: bool = False,
    max_rounds: int = MAX_REJECTION_ROUNDS,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (marker allele, causal allele) gametes from controls or cases of the model."""
    cumulative = _class_cumulative(model)
    if not affected or model.rr_causal == 1.0:
        classes = _classes_from_uniform(rng.random(count), cumulative)
        return (classes >= 2).astype(np.uint8), (classes % 2).astype(np.uint8)
    acceptance = np.array([1.0, model.rr_causal]) / max(1.0, model.rr_causal)
    collected: list[np.ndarray] = []
    have = 0
    proposed = 0
    for _ in range(max_rounds):
        batch = max(64, 2 * (count - have))
        classes = _classes_from_uniform(rng.random(batch), cumulative)
        keep = rng.random(batch) < acceptance[classes % 2]
        proposed += batch
        accepted = classes[keep]
        collected.append(accepted)
        have += accepted.size
        if have >= count:
            classes = np.concatenate(collected)[:count]
            return (classes >= 2).astype(np.uint8), (classes % 2).astype(np.uint8)
    raise NumericalError(
        "draw_gametes",
        f"rejection sampling produced {have}/{count} case gametes after {proposed} proposals "
        f"(acceptance {have / max(proposed, 1):.3g}, rr_causal={model.rr_causal})",
    )


def _null_block(models: Sequence[MarkerCausalModel], n_subjects: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    cumulative = np.stack([_class_cumulative(model) for model in models])
    dosage = np.zeros((n_subjects, len(models)), dtype=np.uint8)
    causal = np.zeros((n_subjects, len(models)), dtype=np.uint8)
    for _ in range(2):
        classes = _classes_from_uniform(rng.random((n_subjects, len(models))), cumulative[np.newaxis, :, :])
        dosage += (classes >= 2).astype(np.uint8)
        causal += (classes % 2).astype(np.uint8)
    return dosage, causal


def _diploid(model: MarkerCausalModel, count: int, rng: np.random.Generator, affected: bool) -> tuple[np.ndarray, np.ndarray]:
    marker_a, causal_a = draw_gametes(model, count, rng, affected=affected)
    marker_b, causal_b = draw_gametes(model, count, rng, affected=affected)
    return marker_a + marker_b, causal_a + causal_b


def _draw_exposure(
    exposure: ExposureConfig,
    dosage: np.ndarray,
    columns: dict[int, int],
    rng: np.random.Generator,
) -> np.ndarray:
    log_odds = np.full(dosage.shape[0], float(logit(exposure.prevalence)))
    for marker in exposure.associated_markers:
        log_odds += exposure.ge_log_odds * dosage[:, columns[marker]]
    return (rng.random(dosage.shape[0]) < expit(log_odds)).astype(np.uint8)


def _subject_level_cases(
    config: SimConfig,
    effect_markers: list[int],
    count: int,
    rng: np.random.Generator,
    *,
    affected: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint draw of effect-marker genotypes and exposure, rejection-weighted for cases."""
    exposure = config.exposure
    assert exposure is not None
    columns = {marker: k for k, marker in enumerate(effect_markers)}
    models = [config.panel[j] for j in effect_markers]
    interaction = set(exposure.interaction_markers)
    log_max = sum(2.0 * math.log(max(1.0, m.rr_causal)) for m in models if m.rr_causal > 0.0)
    log_max += math.log(max(1.0, exposure.main_or))
    log_max += 2.0 * len(interaction) * math.log(max(1.0, exposure.interaction_or))
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    have = 0
    proposed = 0
    for _ in range(MAX_REJECTION_ROUNDS):
        batch = count - have if not affected else max(256, 4 * (count - have))
        dosage, causal = _null_block(models, batch, rng)
        e = _draw_exposure(exposure, dosage, columns, rng)
        if affected:
            risk = np.ones(batch)
            for k, marker in enumerate(effect_markers):
                risk *= np.power(models[k].rr_causal, causal[:, k].astype(float))
                if marker in interaction:
                    risk *= np.power(exposure.interaction_or, causal[:, k] * e.astype(float))
            risk *= np.power(exposure.main_or, e.astype(float))
            keep = rng.random(batch) < risk / math.exp(log_max)
        else:
            keep = np.ones(batch, dtype=bool)
        proposed += batch
        parts.append((dosage[keep], causal[keep], e[keep]))
        have += int(keep.sum())
        if have >= count:
            dosage = np.concatenate([p[0] for p in parts])[:count]
            causal = np.concatenate([p[1] for p in parts])[:count]
            e = np.concatenate([p[2] for p in parts])[:count]
            return dosage, causal, e
    raise NumericalError(
        "simulate_cohort",
        f"case rejection sampling stalled: {have}/{count} after {proposed} proposals "
        f"(acceptance {have / max(proposed, 1):.3g}, log max risk {log_max:.3g})",
    )


def simulate_cohort(config: SimConfig, rng: np.random.Generator | None = None) -> SimulatedCohort:
    rng = substream(config.seed, 0) if rng is None else rng
    exposure = config.exposure
    involved = set()
    if exposure is not None:
        involved = set(exposure.interaction_markers) | set(exposure.associated_markers)
    effect_markers = [
        j for j, model in enumerate(config.panel) if model.has_causal_effect or j in involved
    ]
    null_markers = [j for j in range(config.n_markers) if j not in set(effect_markers)]
    n = config.n_subjects
    dosages = np.zeros((n, config.n_markers), dtype=np.uint8)
    causal = np.zeros((n, config.n_markers), dtype=np.uint8)
    phenotype = np.concatenate(
        [np.ones(config.n_cases, dtype=np.uint8), np.zeros(config.n_controls, dtype=np.uint8)]
    )
    exposure_vector: np.ndarray | None = None

    if exposure is None:
        for j in effect_markers:
            model = config.panel[j]
            case_d, case_c = _diploid(model, config.n_cases, rng, affected=True)
            ctrl_d, ctrl_c = _diploid(model, config.n_controls, rng, affected=False)
            dosages[:, j] = np.concatenate([case_d, ctrl_d])
            causal[:, j] = np.concatenate([case_c, ctrl_c])
    else:
        if effect_markers:
            case_d, case_c, case_e = _subject_level_cases(config, effect_markers, config.n_cases, rng, affected=True)
            ctrl_d, ctrl_c, ctrl_e = _subject_level_cases(config, effect_markers, config.n_controls, rng, affected=False)
            dosages[:, effect_markers] = np.vstack([case_d, ctrl_d])
            causal[:, effect_markers] = np.vstack([case_c, ctrl_c])
            exposure_vector = np.concatenate([case_e, ctrl_e])
        else:
            exposure_vector = (rng.random(n) < exposure.prevalence).astype(np.uint8)
            if exposure.main_or != 1.0:
                # Cases over-represent the exposed by the exposure odds ratio.
                odds = exposure.prevalence / (1.0 - exposure.prevalence) * exposure.main_or
                case_prev = odds / (1.0 + odds)
                exposure_vector[: config.n_cases] = rng.random(config.n_cases) < case_prev

    for start in range(0, len(null_markers), NULL_MARKER_CHUNK):
        block = null_markers[start : start + NULL_MARKER_CHUNK]
        block_d, block_c = _null_block([config.panel[j] for j in block], n, rng)
        dosages[:, block] = block_d
        causal[:, block] = block_c

    truth = np.array(
        [
            model.marker_associated
            or (exposure is not None and j in exposure.interaction_markers and exposure.interaction_or != 1.0)
            for j, model in enumerate(config.panel)
        ]
    )
    return SimulatedCohort(dosages, phenotype, exposure_vector, causal, truth)


def null_panel(n_markers: int, marker_freq: float = 0.3) -> tuple[MarkerCausalModel, ...]:
    return tuple(null_model(marker_freq) for _ in range(n_markers))


def allelic_z(dosages: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Two-proportion allele-frequency z per marker (group 1 vs group 0), unpooled variance."""
    d = np.asarray(dosages, dtype=float)
    in_group = np.asarray(groups).astype(bool)
    n1 = int(in_group.sum())
    n0 = int((~in_group).sum())
    if n1 == 0 or n0 == 0:
        raise ValidationError("groups", (n1, n0), "both groups must be non-empty")
    p1 = d[in_group].sum(axis=0) / (2.0 * n1)
    p0 = d[~in_group].sum(axis=0) / (2.0 * n0)
    variance = p1 * (1.0 - p1) / (2.0 * n1) + p0 * (1.0 - p0) / (2.0 * n0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(variance > 0.0, (p1 - p0) / np.sqrt(variance), 0.0)
    return z


def allelic_odds_ratio(dosages: np.ndarray, phenotype: np.ndarray) -> np.ndarray:
    d = np.asarray(dosages, dtype=float)
    cases = np.asarray(phenotype).astype(bool)
    a = d[cases].sum(axis=0)
    b = d[~cases].sum(axis=0)
    case_alleles = 2.0 * cases.sum()
    control_alleles = 2.0 * (~cases).sum()
    return ((a + 0.5) * (control_alleles - b + 0.5)) / ((case_alleles - a + 0.5) * (b + 0.5))


def split_stages(cohort: SimulatedCohort, stage1_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Stage-I membership, splitting cases and controls separately at stage1_fraction."""
    stage1 = np.zeros(cohort.n_subjects, dtype=bool)
    if stage1_fraction >= 1.0:
        stage1[:] = True
        return stage1
    for group in (cohort.cases, ~cohort.cases):
        members = np.flatnonzero(group)
        take = int(round(stage1_fraction * members.size))
        stage1[rng.permutation(members)[:take]] = True
    return stage1


def _check_group_sizes(cohort: SimulatedCohort, mask: np.ndarray, label: str) -> None:
    cases = int((cohort.cases & mask).sum())
    controls = int((~cohort.cases & mask).sum())
    if cases < MIN_GROUP_SIZE or controls < MIN_GROUP_SIZE:
        raise ValidationError(
            label,
            (cases, controls),
            f"needs at least {MIN_GROUP_SIZE} cases and {MIN_GROUP_SIZE} controls",
        )


def run_two_stage(
    cohort: SimulatedCohort,
    design: TwoStageDesign,
    rng: np.random.Generator,
    *,
    max_carry_forward: int | None = None,
) -> PipelineResult:
    alpha_joint = design.require_alpha_joint()
    stage1 = split_stages(cohort, design.stage1_fraction, rng)
    _check_group_sizes(cohort, stage1, "stage1")
    stage1_cohort = cohort.subset(stage1)
    z1 = allelic_z(stage1_cohort.dosages, stage1_cohort.phenotype)
    p1 = two_sided_p(z1)
    passing = np.ones(cohort.n_markers, dtype=bool) if design.alpha1 >= 1.0 else p1 < design.alpha1
    # Carry-forward list is ranked by stage-I p-value.
    order = np.flatnonzero(passing)[np.argsort(p1[passing], kind="stable")]
    if max_carry_forward is not None:
        order = order[:max_carry_forward]
    selected = np.zeros(cohort.n_markers, dtype=bool)
    selected[order] = True

    joint_z = np.full(cohort.n_markers, np.nan)
    if design.stage1_fraction >= 1.0:
        joint_z[selected] = z1[selected]
    else:
        stage2 = ~stage1
        _check_group_sizes(cohort, stage2, "stage2")
        fraction = stage1.sum() / cohort.n_subjects
        if selected.any():
            z2 = allelic_z(cohort.dosages[stage2][:, selected], cohort.phenotype[stage2])
            joint_z[selected] = math.sqrt(fraction) * z1[selected] + math.sqrt(1.0 - fraction) * z2

    cj = critical_value(alpha_joint)
    discovered = selected & (np.abs(np.nan_to_num(joint_z)) > cj)
    if design.sign_consistency:
        discovered &= np.sign(np.nan_to_num(joint_z)) == np.sign(z1)
    odds_ratio = np.full(cohort.n_markers, np.nan)
    if selected.any():
        odds_ratio[selected] = allelic_odds_ratio(cohort.dosages[:, selected], cohort.phenotype)
    logger.debug("[SIM] selected=%s discovered=%s", int(selected.sum()), int(discovered.sum()))
    return PipelineResult(z1, selected, joint_z, discovered, odds_ratio, stage1, order)


def one_stage_scan(cohort: SimulatedCohort, alpha: float) -> np.ndarray:
    z = allelic_z(cohort.dosages, cohort.phenotype)
    return np.abs(z) > critical_value(alpha)


def evaluate_replication(
    discovery: PipelineResult,
    replication_cohort: SimulatedCohort,
    alpha_rep: float,
) -> ReplicationResult:
    require_probability("alpha_rep", alpha_rep)
    if replication_cohort.n_markers != discovery.stage1_z.size:
        raise ValidationError(
            "replication_cohort",
            replication_cohort.n_markers,
            f"marker mismatch: discovery has {discovery.stage1_z.size} markers",
        )
    z = allelic_z(replication_cohort.dosages, replication_cohort.phenotype)
    p = two_sided_p(z)
    flags = (p < alpha_rep) & (np.sign(z) == discovery.direction)
    return ReplicationResult(z, p, flags, flags & discovery.discovered)


def winners_curse(
    config: SimConfig,
    design: TwoStageDesign,
    true_or: float,
    *,
    threads: int = 1,
) -> WinnersCurseResult:
    """Mean odds-ratio estimate at marker 0 conditional on its discovery."""
    if not true_or > 0.0:
        raise ValidationError("true_or", true_or, "must be > 0")
    effect = direct_causal_model(config.panel[0].marker_freq, true_or)
    study = replace(config, panel=(effect, *config.panel[1:]))

    def replicate(rng: np.random.Generator, index: int) -> tuple[bool, float, float]:
        cohort = simulate_cohort(study, rng)
        result = run_two_stage(cohort, design, rng)
        return bool(result.discovered[0]), float(result.odds_ratio[0]), float(result.joint_z[0])

    outcomes = map_replicates(replicate, config.replicates, config.seed, stream=1, threads=threads)
    estimates = np.array([or_hat for hit, or_hat, _ in outcomes if hit])
    positive = np.array([or_hat for hit, or_hat, z in outcomes if hit and z > 0.0])
    if estimates.size == 0:
        raise NumericalError(
            "winners_curse",
            f"zero discoveries across {config.replicates} replicates; increase replicates",
        )
    mean_or = float(estimates.mean())
    se = float(estimates.std(ddof=1) / math.sqrt(estimates.size)) if estimates.size > 1 else float("inf")
    logger.info("[SIM] winner's curse: %s discoveries in %s replicates", estimates.size, config.replicates)
    return WinnersCurseResult(
        true_or=true_or,
        mean_or=mean_or,
        bias=mean_or - true_or,
        standard_error=se,
        discoveries=int(estimates.size),
        replicates=config.replicates,
        mean_or_positive=float(positive.mean()) if positive.size else float("nan"),
    )


def _require_exposure(cohort: SimulatedCohort) -> np.ndarray:
    if cohort.exposure is None:
        raise ValidationError("exposure", None, "cohort has no exposure vector")
    return cohort.exposure


def one_step_interaction_scan(cohort: SimulatedCohort, alpha_test: float) -> np.ndarray:
    require_probability("alpha_test", alpha_test)
    exposure = _require_exposure(cohort)
    z = interaction_wald_batch(cohort.dosages, exposure, cohort.phenotype)
    return np.abs(z) > critical_value(alpha_test / cohort.n_markers)


def murcray_two_step(cohort: SimulatedCohort, alpha_screen: float, alpha_test: float) -> GxEResult:
    """G-E screen in cases and controls combined, then case-control G x E test on passers."""
    require_probability("alpha_screen", alpha_screen, open_interval=False)
    require_probability("alpha_test", alpha_test)
    exposure = _require_exposure(cohort)
    screen_z = allelic_z(cohort.dosages, exposure)
    passed = two_sided_p(screen_z) <= alpha_screen
    interaction_z = np.full(cohort.n_markers, np.nan)
    rejected = np.zeros(cohort.n_markers, dtype=bool)
    n_passed = int(passed.sum())
    if n_passed == 0:
        logger.info("[SIM] no markers passed the screening step")
        return GxEResult(screen_z, passed, interaction_z, float("nan"), rejected)
    step2_alpha = alpha_test / n_passed
    interaction_z[passed] = interaction_wald_batch(cohort.dosages[:, passed], exposure, cohort.phenotype)
    rejected[passed] = np.abs(interaction_z[passed]) > critical_value(step2_alpha)
    return GxEResult(screen_z, passed, interaction_z, step2_alpha, rejected)


def gxe_scenario(
    seed: int,
    n_markers: int = 2000,
    n_cases: int = 1000,
    n_controls: int = 1000,
    interaction_or: float = 1.8,
    *,
    ge_association: bool = False,
    replicates: int = 1,
) -> SimConfig:
    """Shipped G x E scenario: marker 0 carries the interaction, exposure prevalence 0.3."""
    panel = (direct_causal_model(0.3, 1.0), *null_panel(n_markers - 1))
    exposure = ExposureConfig(
        prevalence=0.3,
        main_or=1.5,
        ge_association=ge_association,
        ge_log_odds=0.3 if ge_association else 0.0,
        interaction_or=interaction_or,
        interaction_markers=(0,),
    )
    return SimConfig(seed, n_cases, n_controls, panel, exposure, replicates)
