"""Typed defaults per subcommand, JSON config files and ``--set section.key=value`` overrides."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from types import UnionType
from typing import Any, Union, get_args, get_origin, get_type_hints

from errors import ValidationError
from genetic_model import MarkerCausalModel
from power_engine import require_attainable_threshold

OUT_DIR_ENV = "GWAS_PLANNER_OUT_DIR"
DEFAULT_OUT_DIR = "results"
logger = logging.getLogger(__name__)


def _probability(key: str, value: float, *, closed: bool = False) -> None:
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ValidationError(key, value, "must lie in [0, 1]" if closed else "must lie in (0, 1)")


def _positive(key: str, value: float) -> None:
    if not value > 0:
        raise ValidationError(key, value, "must be > 0")


def _check_marker_model(section: str, marker_freq: float, causal_freq: float, delta: float, rr_causal: float) -> None:
    keys = {"delta": f"{section}.deltas" if section == "table1" else f"{section}.delta"}
    try:
        MarkerCausalModel(marker_freq, causal_freq, delta, rr_causal)
    except ValidationError as exc:
        raise ValidationError(keys.get(exc.key, f"{section}.{exc.key}"), exc.value, exc.detail) from exc


@dataclass(frozen=True)
class Table1Section:
    marker_freq: float = 0.2
    causal_freq: float = 0.05
    deltas: tuple[float, ...] = (0.036, -0.010, -0.010, 0.036)
    rr_causal: tuple[float, ...] = (2.0, 0.0, 3.0, 0.5)

    def validate(self) -> None:
        _probability("table1.marker_freq", self.marker_freq)
        _probability("table1.causal_freq", self.causal_freq)
        if len(self.deltas) != len(self.rr_causal):
            raise ValidationError("table1.deltas", len(self.deltas), "must align with table1.rr_causal")
        for value in self.rr_causal:
            if value < 0:
                raise ValidationError("table1.rr_causal", value, "must be >= 0")
        for delta, rr_causal in zip(self.deltas, self.rr_causal):
            _check_marker_model("table1", self.marker_freq, self.causal_freq, delta, rr_causal)


@dataclass(frozen=True)
class PowerSection:
    stage1_fractions: tuple[float, ...] = (0.3, 0.5, 1.0)
    alpha1s: tuple[float, ...] = (0.0037, 0.001, 1.0)
    lambdas: tuple[float, ...] = (30.0,)
    n_markers: int = 500_000
    fwer: float = 0.05

    def validate(self) -> None:
        if len(self.stage1_fractions) != len(self.alpha1s):
            raise ValidationError("power.alpha1s", len(self.alpha1s), "must align with power.stage1_fractions")
        for value in self.stage1_fractions:
            if not 0.0 < value <= 1.0:
                raise ValidationError("power.stage1_fractions", value, "must lie in (0, 1]")
        for value in self.alpha1s:
            if not 0.0 < value <= 1.0:
                raise ValidationError("power.alpha1s", value, "must lie in (0, 1]")
        for value in self.lambdas:
            if value < 0:
                raise ValidationError("power.lambdas", value, "must be >= 0")
        _positive("power.n_markers", self.n_markers)
        _probability("power.fwer", self.fwer)
        for stage1_fraction, alpha1 in zip(self.stage1_fractions, self.alpha1s):
            require_attainable_threshold("power.alpha1s", stage1_fraction, alpha1, self.fwer, self.n_markers)


@dataclass(frozen=True)
class DesignSection:
    mode: str = "min-cost"
    cost_ratio: float = 17.5
    n_markers: int = 500_000
    fwer: float = 0.05
    power_target: float = 0.8
    effect_freq: float = 0.2
    effect_rr: float = 1.5
    flanking_per_hit: int = 0
    budget: float | None = None
    refine: bool = True
    # Rows of [stage1_fraction, alpha1, flanking_per_hit] reported in the cost-share table.
    reference_points: tuple[tuple[float, ...], ...] = ((0.30, 0.0037, 0.0), (0.49, 0.0005, 5.0))

    def validate(self) -> None:
        if self.mode not in ("min-cost", "max-power"):
            raise ValidationError("design.mode", self.mode, "expected min-cost or max-power")
        _positive("design.cost_ratio", self.cost_ratio)
        _positive("design.n_markers", self.n_markers)
        _probability("design.fwer", self.fwer)
        _probability("design.power_target", self.power_target)
        _probability("design.effect_freq", self.effect_freq)
        _positive("design.effect_rr", self.effect_rr)
        if self.flanking_per_hit < 0:
            raise ValidationError("design.flanking_per_hit", self.flanking_per_hit, "must be >= 0")
        if self.mode == "max-power" and (self.budget is None or self.budget <= 0):
            raise ValidationError("design.budget", self.budget, "max-power mode needs a positive budget")
        for point in self.reference_points:
            if len(point) != 3:
                raise ValidationError("design.reference_points", list(point), "expected [stage1_fraction, alpha1, flanking]")


@dataclass(frozen=True)
class SimulateSection:
    n_cases: int = 1000
    n_controls: int = 1000
    n_markers: int = 1000
    marker_freq: float = 0.3
    effect_markers: int = 1
    effect_rr: float = 1.3
    stage1_fraction: float = 0.3
    alpha1: float = 0.0037
    fwer: float = 0.05
    replicates: int = 100
    alpha_rep: float = 0.05
    max_carry_forward: int | None = None
    save_cohort: bool = False

    def validate(self) -> None:
        _positive("simulate.n_cases", self.n_cases)
        _positive("simulate.n_controls", self.n_controls)
        _positive("simulate.n_markers", self.n_markers)
        _probability("simulate.marker_freq", self.marker_freq)
        if not 0 <= self.effect_markers <= self.n_markers:
            raise ValidationError("simulate.effect_markers", self.effect_markers, "must lie in [0, n_markers]")
        _positive("simulate.effect_rr", self.effect_rr)
        if not 0.0 < self.stage1_fraction <= 1.0:
            raise ValidationError("simulate.stage1_fraction", self.stage1_fraction, "must lie in (0, 1]")
        if not 0.0 < self.alpha1 <= 1.0:
            raise ValidationError("simulate.alpha1", self.alpha1, "must lie in (0, 1]")
        _probability("simulate.fwer", self.fwer)
        _positive("simulate.replicates", self.replicates)
        _probability("simulate.alpha_rep", self.alpha_rep)
        if self.max_carry_forward is not None:
            _positive("simulate.max_carry_forward", self.max_carry_forward)
        require_attainable_threshold(
            "simulate.alpha1", self.stage1_fraction, self.alpha1, self.fwer, self.n_markers
        )


@dataclass(frozen=True)
class GxESection:
    n_cases: int = 1000
    n_controls: int = 1000
    n_markers: int = 2000
    interaction_or: float = 1.8
    ge_association: bool = False
    alpha_screen: float = 0.05
    alpha_test: float = 0.05
    replicates: int = 100

    def validate(self) -> None:
        _positive("gxe.n_cases", self.n_cases)
        _positive("gxe.n_controls", self.n_controls)
        if self.n_markers < 1:
            raise ValidationError("gxe.n_markers", self.n_markers, "must be >= 1")
        _positive("gxe.interaction_or", self.interaction_or)
        _probability("gxe.alpha_screen", self.alpha_screen, closed=True)
        _probability("gxe.alpha_test", self.alpha_test)
        _positive("gxe.replicates", self.replicates)


@dataclass(frozen=True)
class SignificanceSection:
    method: str = "both"
    cohort_path: str | None = None
    n_cases: int = 100
    n_controls: int = 100
    n_markers: int = 50
    marker_freq: float = 0.3
    stage1_fraction: float = 0.5
    alpha1: float = 0.1
    n_draws: int = 1000
    stage2_sampling: str = "case-control"

    def validate(self) -> None:
        if self.method not in ("both", "lin", "dudbridge", "reference"):
            raise ValidationError("significance.method", self.method, "expected both, lin, dudbridge or reference")
        _positive("significance.n_cases", self.n_cases)
        _positive("significance.n_controls", self.n_controls)
        _positive("significance.n_markers", self.n_markers)
        _probability("significance.marker_freq", self.marker_freq)
        if not 0.0 < self.stage1_fraction <= 1.0:
            raise ValidationError("significance.stage1_fraction", self.stage1_fraction, "must lie in (0, 1]")
        if not 0.0 < self.alpha1 <= 1.0:
            raise ValidationError("significance.alpha1", self.alpha1, "must lie in (0, 1]")
        _positive("significance.n_draws", self.n_draws)


@dataclass(frozen=True)
class ReseqSection:
    marker_freq: float = 0.2
    causal_freq: float = 0.05
    delta: float = 0.036
    rr_causal: float = 2.0
    budget: int = 96
    purpose: str = "discovery"
    n_cases: int = 1000
    n_controls: int = 1000
    risk_index: bool = False
    n_bins: int = 5
    n_draws: int = 200_000

    def validate(self) -> None:
        _probability("reseq.marker_freq", self.marker_freq)
        _probability("reseq.causal_freq", self.causal_freq)
        if self.rr_causal < 0:
            raise ValidationError("reseq.rr_causal", self.rr_causal, "must be >= 0")
        _check_marker_model("reseq", self.marker_freq, self.causal_freq, self.delta, self.rr_causal)
        _positive("reseq.budget", self.budget)
        if self.purpose not in ("discovery", "joint"):
            raise ValidationError("reseq.purpose", self.purpose, "expected discovery or joint")
        _positive("reseq.n_cases", self.n_cases)
        _positive("reseq.n_controls", self.n_controls)
        _positive("reseq.n_bins", self.n_bins)
        _positive("reseq.n_draws", self.n_draws)


@dataclass(frozen=True)
class PlannerConfig:
    table1: Table1Section = field(default_factory=Table1Section)
    power: PowerSection = field(default_factory=PowerSection)
    design: DesignSection = field(default_factory=DesignSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    gxe: GxESection = field(default_factory=GxESection)
    significance: SignificanceSection = field(default_factory=SignificanceSection)
    reseq: ReseqSection = field(default_factory=ReseqSection)

    def validate(self) -> None:
        for section in fields(self):
            getattr(self, section.name).validate()


SECTION_NAMES = tuple(section.name for section in fields(PlannerConfig))


def _coerce(key: str, value: Any, hint: Any) -> Any:
    """Convert a JSON value to the annotated type of the field, element by element."""
    origin = get_origin(hint)
    if origin in (Union, UnionType):
        if value is None:
            return None
        inner = next(arg for arg in get_args(hint) if arg is not type(None))
        return _coerce(key, value, inner)
    if origin is tuple:
        if not isinstance(value, list):
            raise ValidationError(key, value, "expected a list")
        item = get_args(hint)[0]
        return tuple(_coerce(key, element, item) for element in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ValidationError(key, value, "expected true or false")
        return value
    if hint is int:
        if not _is_finite_number(value) or float(value) != int(value):
            raise ValidationError(key, value, "expected an integer")
        return int(value)
    if hint is float:
        if not _is_finite_number(value):
            raise ValidationError(key, value, "expected a finite number")
        return float(value)
    if not isinstance(value, str):
        raise ValidationError(key, value, "expected a string")
    return value


def _is_finite_number(value: Any) -> bool:
    return not isinstance(value, bool) and isinstance(value, (int, float)) and math.isfinite(value)


def _apply_section(section: Any, name: str, values: dict[str, Any]) -> Any:
    if not isinstance(values, dict):
        raise ValidationError(name, values, "section must be an object")
    hints = get_type_hints(type(section))
    known = {f.name for f in fields(section)}
    updates: dict[str, Any] = {}
    for key, value in values.items():
        dotted = f"{name}.{key}"
        if key not in known:
            raise ValidationError(dotted, value, "unknown configuration key")
        updates[key] = _coerce(dotted, value, hints[key])
    return replace(section, **updates)


def _apply_document(config: PlannerConfig, document: dict[str, Any]) -> PlannerConfig:
    if not isinstance(document, dict):
        raise ValidationError("config", document, "top level must be an object")
    updates: dict[str, Any] = {}
    for name, values in document.items():
        if name not in SECTION_NAMES:
            raise ValidationError(name, values, "unknown configuration section")
        updates[name] = _apply_section(getattr(config, name), name, values)
    return replace(config, **updates)


def parse_override(text: str) -> tuple[str, str, Any]:
    """Split ``section.key=value``; the value is JSON when it parses, else a plain string."""
    if "=" not in text:
        raise ValidationError("--set", text, "expected section.key=value")
    dotted, raw = text.split("=", 1)
    if dotted.count(".") != 1:
        raise ValidationError("--set", dotted, "expected section.key")
    section, key = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> PlannerConfig:
    config = PlannerConfig()
    if path is not None:
        if not path.exists():
            raise ValidationError("--config", str(path), "config file does not exist")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError("--config", str(path), f"invalid JSON: {exc}") from exc
        config = _apply_document(config, document)
    for text in overrides or []:
        section, key, value = parse_override(text)
        config = _apply_document(config, {section: {key: value}})
    config.validate()
    logger.debug("Resolved configuration: %s", config_to_dict(config))
    return config


def config_to_dict(config: PlannerConfig) -> dict[str, Any]:
    return json.loads(json.dumps(asdict(config)))


def dump_config(config: PlannerConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
