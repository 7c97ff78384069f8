#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from cohort_simulator import (
    SimConfig,
    evaluate_replication,
    gxe_scenario,
    murcray_two_step,
    null_panel,
    one_step_interaction_scan,
    run_two_stage,
    simulate_cohort,
    winners_curse,
)
from design_optimizer import (
    CostModel,
    DesignConstraints,
    OptimizedDesign,
    expected_cost,
    grid_rows,
    optimize_max_power,
    optimize_min_cost,
    stage2_marker_count,
)
from errors import NumericalError, ValidationError
from genetic_model import MarkerCausalModel, direct_causal_model, table1_rows
from power_engine import EffectSpec, TwoStageDesign, power_grid_rows, solve_joint_threshold
from replicates import map_replicates, substream
from reseq_designer import (
    expected_population,
    plan_rows,
    recommend_plan,
    risk_index_scenario,
    risk_index_yields,
    stratum_yields,
)
from run_config import PlannerConfig, config_to_dict, default_out_dir, load_config
from run_io import RunManifest, now_iso, read_cohort, save_manifest, write_cohort, write_table
from significance import dudbridge_adjusted_p, lin_adjusted_p, max_statistic_reference

__version__ = "0.1.0"
SUBCOMMANDS = ("table1", "power", "design-optimize", "simulate", "gxe", "significance", "reseq-plan")
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
MANIFEST_NAME = "manifest.json"

TABLE1_COLUMNS = [
    "block",
    "delta",
    "rr_causal",
    "marker_rr",
    "marker_allele",
    "outcome",
    "g0",
    "g1",
    "carrier_probability",
]
POWER_COLUMNS = ["pi", "alpha1", "alpha_joint", "lambda", "power", "null_rate"]
GRID_COLUMNS = ["pi", "alpha1", "alpha_joint", "n_total", "total_cost", "stage1_cost_share", "power", "feasible"]
SUMMARY_COLUMNS = [
    "pi",
    "alpha1",
    "alpha_joint",
    "n_total",
    "total_cost",
    "stage1_cost_share",
    "stage2_markers",
    "power",
    "null_rate",
    "one_stage_n",
    "one_stage_cost",
    "cost_vs_one_stage",
    "cost_vs_one_stage_equal_n",
]
COST_SHARE_COLUMNS = ["pi", "alpha1", "flanking_per_hit", "alpha_joint", "stage1_cost_share", "stage2_markers"]
PIPELINE_COLUMNS = ["replicate", "selected", "discoveries", "true_discoveries", "false_discoveries", "replicated"]
SIM_SUMMARY_COLUMNS = ["replicates", "alpha_joint", "fwer", "fwer_se", "power", "replication_rate"]
WINNERS_COLUMNS = ["true_or", "mean_or", "bias", "standard_error", "discoveries", "replicates", "mean_or_positive"]
GXE_COLUMNS = [
    "replicate",
    "n_passed",
    "two_step_rejections",
    "two_step_true",
    "one_step_rejections",
    "one_step_true",
]
GXE_SUMMARY_COLUMNS = ["replicates", "two_step_power", "one_step_power", "two_step_fwer", "one_step_fwer", "paired_se"]
SIGNIFICANCE_COLUMNS = ["marker", "raw_p", "adjusted_p", "se", "method"]
PLAN_COLUMNS = ["stratum", "population", "sampled", "fraction", "carrier_yield", "expected_carriers", "offset"]
YIELD_COLUMNS = ["stratum", "carrier_yield", "argmax"]
RISK_COLUMNS = ["bin", "lower", "upper", "case_yield", "case_se", "case_count", "control_yield", "control_se", "control_count"]
logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    """Resolved inputs shared by every subcommand."""

    config: PlannerConfig
    seed: int
    threads: int
    out_dir: Path
    fmt: str = "csv"

    def path(self, stem: str) -> Path:
        return self.out_dir / f"{stem}.{self.fmt}"

    def write(self, stem: str, rows: list[dict[str, object]], columns: list[str]) -> Path:
        return write_table(self.path(stem), rows, columns, self.fmt)


def format_duration(total_seconds: float) -> str:
    seconds = max(0, int(total_seconds))
    minutes, secs = divmod(seconds, 60)
    if minutes > 0:
        return f"{minutes}m {secs}s"
    return f"{secs}s"


def run_table1(ctx: RunContext) -> list[Path]:
    section = ctx.config.table1
    rows: list[dict[str, object]] = []
    for index, (delta, rr) in enumerate(zip(section.deltas, section.rr_causal), start=1):
        model = MarkerCausalModel(section.marker_freq, section.causal_freq, delta, rr)
        rows.extend(table1_rows(f"block-{index}", model))
    return [ctx.write("table1", rows, TABLE1_COLUMNS)]


def _solved_design(n_total: int, stage1_fraction: float, alpha1: float, n_markers: int, fwer: float) -> TwoStageDesign:
    draft = TwoStageDesign(n_total, stage1_fraction, alpha1, None, n_markers)
    return draft.with_alpha_joint(solve_joint_threshold(draft, fwer, n_markers))


def run_power(ctx: RunContext) -> list[Path]:
    section = ctx.config.power
    designs: list[TwoStageDesign] = []
    lambdas: list[float] = []
    for stage1_fraction, alpha1 in zip(section.stage1_fractions, section.alpha1s):
        design = _solved_design(1, stage1_fraction, alpha1, section.n_markers, section.fwer)
        for lam in section.lambdas:
            designs.append(design)
            lambdas.append(lam)
    return [ctx.write("power", power_grid_rows(designs, lambdas), POWER_COLUMNS)]


def _summary_row(result: OptimizedDesign, cost: CostModel) -> dict[str, object]:
    design = result.design
    return {
        "pi": design.stage1_fraction,
        "alpha1": design.alpha1,
        "alpha_joint": design.alpha_joint,
        "n_total": design.n_total,
        "total_cost": result.total_cost,
        "stage1_cost_share": result.stage1_cost_share,
        "stage2_markers": stage2_marker_count(design, cost),
        "power": result.power,
        "null_rate": result.null_rate,
        "one_stage_n": result.one_stage_n,
        "one_stage_cost": result.one_stage_cost,
        "cost_vs_one_stage": result.cost_vs_one_stage,
        "cost_vs_one_stage_equal_n": result.cost_vs_one_stage_equal_n,
    }


def run_design(ctx: RunContext) -> list[Path]:
    section = ctx.config.design
    effect = EffectSpec.from_model(direct_causal_model(section.effect_freq, section.effect_rr))
    cost = CostModel(section.cost_ratio, flanking_per_hit=section.flanking_per_hit)
    constraints = DesignConstraints(section.fwer, section.power_target, effect, section.n_markers)
    if section.mode == "min-cost":
        result = optimize_min_cost(constraints, cost, refine=section.refine, threads=ctx.threads)
    else:
        assert section.budget is not None
        result = optimize_max_power(float(section.budget), cost, constraints, threads=ctx.threads)

    shares: list[dict[str, object]] = []
    for stage1_fraction, alpha1, flanking in section.reference_points:
        reference_cost = CostModel(section.cost_ratio, flanking_per_hit=int(flanking))
        design = _solved_design(1, stage1_fraction, alpha1, section.n_markers, section.fwer)
        _, share = expected_cost(design, reference_cost)
        shares.append(
            {
                "pi": stage1_fraction,
                "alpha1": alpha1,
                "flanking_per_hit": int(flanking),
                "alpha_joint": design.alpha_joint,
                "stage1_cost_share": share,
                "stage2_markers": stage2_marker_count(design, reference_cost),
            }
        )
    return [
        ctx.write("design_summary", [_summary_row(result, cost)], SUMMARY_COLUMNS),
        ctx.write("design_grid", grid_rows(result), GRID_COLUMNS),
        ctx.write("cost_shares", shares, COST_SHARE_COLUMNS),
    ]


def _simulation_config(ctx: RunContext) -> SimConfig:
    section = ctx.config.simulate
    effects = tuple(
        direct_causal_model(section.marker_freq, section.effect_rr) for _ in range(section.effect_markers)
    )
    panel = effects + null_panel(section.n_markers - section.effect_markers, section.marker_freq)
    return SimConfig(ctx.seed, section.n_cases, section.n_controls, panel, replicates=section.replicates)


def run_simulate(ctx: RunContext) -> list[Path]:
    section = ctx.config.simulate
    sim = _simulation_config(ctx)
    design = _solved_design(sim.n_subjects, section.stage1_fraction, section.alpha1, sim.n_markers, section.fwer)

    def replicate(rng: np.random.Generator, index: int) -> dict[str, object]:
        cohort = simulate_cohort(sim, rng)
        result = run_two_stage(cohort, design, rng, max_carry_forward=section.max_carry_forward)
        replication = evaluate_replication(result, simulate_cohort(sim, rng), section.alpha_rep)
        truth = cohort.truth if cohort.truth is not None else np.zeros(sim.n_markers, dtype=bool)
        return {
            "replicate": index,
            "selected": int(result.selected.sum()),
            "discoveries": result.n_discoveries,
            "true_discoveries": int((result.discovered & truth).sum()),
            "false_discoveries": int((result.discovered & ~truth).sum()),
            "replicated": int(replication.replicated.sum()),
        }

    rows = map_replicates(replicate, sim.replicates, ctx.seed, stream=10, threads=ctx.threads)
    any_false = np.array([row["false_discoveries"] > 0 for row in rows], dtype=float)
    discoveries = sum(int(row["discoveries"]) for row in rows)
    summary = {
        "replicates": sim.replicates,
        "alpha_joint": design.alpha_joint,
        "fwer": float(any_false.mean()),
        "fwer_se": float(math.sqrt(any_false.mean() * (1.0 - any_false.mean()) / sim.replicates)),
        "power": (
            sum(int(row["true_discoveries"]) for row in rows) / (section.effect_markers * sim.replicates)
            if section.effect_markers
            else float("nan")
        ),
        "replication_rate": (
            sum(int(row["replicated"]) for row in rows) / discoveries if discoveries else float("nan")
        ),
    }
    outputs = [
        ctx.write("pipeline", rows, PIPELINE_COLUMNS),
        ctx.write("simulation_summary", [summary], SIM_SUMMARY_COLUMNS),
    ]
    if section.effect_markers and section.effect_rr != 1.0:
        try:
            curse = winners_curse(sim, design, section.effect_rr, threads=ctx.threads)
        except NumericalError as exc:
            logger.warning("Skipping winner's curse table: %s", exc)
        else:
            outputs.append(ctx.write("winners_curse", [asdict(curse)], WINNERS_COLUMNS))
    if section.save_cohort:
        outputs.extend(write_cohort(ctx.out_dir / "cohort.gwsc", simulate_cohort(sim, substream(ctx.seed, 11))))
    return outputs


def run_gxe(ctx: RunContext) -> list[Path]:
    section = ctx.config.gxe
    scenario = gxe_scenario(
        ctx.seed,
        section.n_markers,
        section.n_cases,
        section.n_controls,
        section.interaction_or,
        ge_association=section.ge_association,
        replicates=section.replicates,
    )
    true_marker = 0

    def replicate(rng: np.random.Generator, index: int) -> dict[str, object]:
        cohort = simulate_cohort(scenario, rng)
        two_step = murcray_two_step(cohort, section.alpha_screen, section.alpha_test)
        one_step = one_step_interaction_scan(cohort, section.alpha_test)
        return {
            "replicate": index,
            "n_passed": two_step.n_passed,
            "two_step_rejections": int(two_step.rejected.sum()),
            "two_step_true": bool(two_step.rejected[true_marker]),
            "one_step_rejections": int(one_step.sum()),
            "one_step_true": bool(one_step[true_marker]),
            "two_step_false": bool(np.delete(two_step.rejected, true_marker).any()),
            "one_step_false": bool(np.delete(one_step, true_marker).any()),
        }

    rows = map_replicates(replicate, scenario.replicates, ctx.seed, stream=20, threads=ctx.threads)
    two = np.array([row["two_step_true"] for row in rows], dtype=float)
    one = np.array([row["one_step_true"] for row in rows], dtype=float)
    summary = {
        "replicates": scenario.replicates,
        "two_step_power": float(two.mean()),
        "one_step_power": float(one.mean()),
        "two_step_fwer": float(np.mean([row["two_step_false"] for row in rows])),
        "one_step_fwer": float(np.mean([row["one_step_false"] for row in rows])),
        "paired_se": float((two - one).std(ddof=1) / math.sqrt(len(rows))) if len(rows) > 1 else float("nan"),
    }
    return [
        ctx.write("gxe", rows, GXE_COLUMNS),
        ctx.write("gxe_summary", [summary], GXE_SUMMARY_COLUMNS),
    ]


def run_significance(ctx: RunContext) -> list[Path]:
    section = ctx.config.significance
    if section.cohort_path:
        cohort = read_cohort(Path(section.cohort_path))
    else:
        sim = SimConfig(
            ctx.seed,
            section.n_cases,
            section.n_controls,
            null_panel(section.n_markers, section.marker_freq),
        )
        cohort = simulate_cohort(sim, substream(ctx.seed, 30))
    design = TwoStageDesign(cohort.n_subjects, section.stage1_fraction, section.alpha1, None, cohort.n_markers)
    rows: list[dict[str, object]] = []
    if section.method in ("both", "lin"):
        lin = lin_adjusted_p(
            cohort, design, section.n_draws, ctx.seed, stage2_sampling=section.stage2_sampling, threads=ctx.threads
        )
        rows.extend(lin.rows())
    if section.method in ("both", "dudbridge"):
        dudbridge = dudbridge_adjusted_p(
            cohort, design, section.n_draws, ctx.seed, stage2_sampling=section.stage2_sampling, threads=ctx.threads
        )
        rows.extend(dudbridge.rows())
    if section.method == "reference":
        rows.extend(max_statistic_reference(cohort, section.n_draws, ctx.seed, threads=ctx.threads).adjusted.rows())
    return [ctx.write("significance", rows, SIGNIFICANCE_COLUMNS)]


def run_reseq(ctx: RunContext) -> list[Path]:
    section = ctx.config.reseq
    model = MarkerCausalModel(section.marker_freq, section.causal_freq, section.delta, section.rr_causal)
    population = expected_population(model, section.n_cases, section.n_controls)
    plan = recommend_plan(model, section.budget, section.purpose, population)
    yields = stratum_yields(model)
    yield_rows = [
        {
            "stratum": stratum.label,
            "carrier_yield": yields.yields[(stratum.outcome, stratum.marker_class)],
            "argmax": (stratum.outcome, stratum.marker_class) == yields.argmax,
        }
        for stratum in plan.strata
    ]
    outputs = [
        ctx.write("reseq_plan", plan_rows(plan), PLAN_COLUMNS),
        ctx.write("stratum_yields", yield_rows, YIELD_COLUMNS),
    ]
    if section.risk_index:
        models, coefficients = risk_index_scenario()
        curves = risk_index_yields(models, coefficients, n_draws=section.n_draws, seed=ctx.seed, n_bins=section.n_bins)
        risk_rows = [
            {
                "bin": b,
                "lower": curves.edges[b],
                "upper": curves.edges[b + 1],
                "case_yield": curves.case_yield[b],
                "case_se": curves.case_se[b],
                "case_count": int(curves.case_count[b]),
                "control_yield": curves.control_yield[b],
                "control_se": curves.control_se[b],
                "control_count": int(curves.control_count[b]),
            }
            for b in range(curves.edges.size - 1)
        ]
        outputs.append(ctx.write("risk_index_yields", risk_rows, RISK_COLUMNS))
    return outputs


HANDLERS: dict[str, Callable[[RunContext], list[Path]]] = {
    "table1": run_table1,
    "power": run_power,
    "design-optimize": run_design,
    "simulate": run_simulate,
    "gxe": run_gxe,
    "significance": run_significance,
    "reseq-plan": run_reseq,
}


def run(subcommand: str, ctx: RunContext) -> RunManifest:
    """Run one subcommand, write its tables and a manifest with output digests."""
    manifest = RunManifest(
        tool_version=__version__,
        subcommand=subcommand,
        config=config_to_dict(ctx.config),
        seed=ctx.seed,
        threads=ctx.threads,
        started_at=now_iso(),
    )
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    for path in HANDLERS[subcommand](ctx):
        manifest.record(path, ctx.out_dir)
    manifest.finished_at = now_iso()
    save_manifest(ctx.out_dir / MANIFEST_NAME, manifest)
    return manifest


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with one object per section.")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable; value parsed as JSON when possible).",
    )
    common.add_argument("--seed", type=int, default=0, help="Master seed (default: 0).")
    common.add_argument("--threads", type=int, default=1, help="Worker threads; never changes results (default: 1).")
    common.add_argument(
        "--out-dir",
        help="Output directory (default: $GWAS_PLANNER_OUT_DIR or results).",
    )
    common.add_argument("--format", choices=["csv", "tsv"], default="csv", help="Table format (default: csv).")
    # Logging verbosity controls.
    level_group = common.add_mutually_exclusive_group()
    level_group.add_argument("--verbose", action="store_true", help="Enable debug logging.")
    level_group.add_argument("--quiet", action="store_true", help="Show warnings and errors only.")

    parser = argparse.ArgumentParser(
        description="Plan, simulate and analyze two-stage genome-wide association studies."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        subparsers.add_parser(name, parents=[common], help=f"Run the {name} analysis.")
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    log_level = logging.INFO
    if args.verbose:
        log_level = logging.DEBUG
    elif args.quiet:
        log_level = logging.WARNING
    logging.basicConfig(level=log_level, format="[%(levelname)s] %(message)s")

    started = time.monotonic()
    try:
        if args.seed < 0:
            raise ValidationError("--seed", args.seed, "must be >= 0")
        if args.threads < 1:
            raise ValidationError("--threads", args.threads, "must be >= 1")
        config = load_config(Path(args.config) if args.config else None, args.overrides)
        out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
        ctx = RunContext(config, args.seed, args.threads, out_dir, args.format)
        manifest = run(args.subcommand, ctx)
    except ValidationError as exc:
        logger.error("Invalid input: %s", exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        logger.error("Numerical failure: %s", exc)
        return EXIT_NUMERICAL

    logger.info("%s completed in %s.", args.subcommand, format_duration(time.monotonic() - started))
    for name in sorted(manifest.outputs):
        logger.info("  - %s", out_dir / name)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
