from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import pytest

import stage_planner
from errors import NumericalError
from run_io import read_table, verify_manifest
from stage_planner import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main, parse_args

SMALL_SIMULATION = [
    "--set",
    "simulate.n_markers=20",
    "--set",
    "simulate.replicates=2",
    "--set",
    "simulate.n_cases=200",
    "--set",
    "simulate.n_controls=200",
    "--set",
    "simulate.alpha1=0.1",
]


def _run(monkeypatch: pytest.MonkeyPatch, *args: str) -> int:
    monkeypatch.setattr(sys, "argv", ["gwas-stage-planner", *args])
    return main()


def test_table1_writes_four_rows_per_block(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    assert _run(monkeypatch, "table1", "--out-dir", str(tmp_path)) == EXIT_OK

    rows = read_table(tmp_path / "table1.csv")
    assert len(rows) == 16
    first = next(row for row in rows if row["outcome"] == "case" and row["marker_allele"] == "minor")
    assert float(first["carrier_probability"]) == pytest.approx(0.374, abs=5e-4)
    assert verify_manifest(tmp_path / "manifest.json") == []


def test_power_table_has_one_row_per_design_and_lambda(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    assert _run(monkeypatch, "power", "--out-dir", str(tmp_path)) == EXIT_OK

    rows = read_table(tmp_path / "power.csv")
    assert len(rows) == 3
    assert list(rows[0]) == ["pi", "alpha1", "alpha_joint", "lambda", "power", "null_rate"]
    single_stage = next(row for row in rows if row["pi"] == "1")
    assert float(single_stage["alpha_joint"]) == pytest.approx(0.05 / 500_000)


def test_config_file_and_tsv_format(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"power": {"lambdas": [5.0, 10.0]}}), encoding="utf-8")

    result = _run(monkeypatch, "power", "--config", str(config), "--format", "tsv", "--out-dir", str(tmp_path / "out"))

    assert result == EXIT_OK
    assert len(read_table(tmp_path / "out" / "power.tsv", fmt="tsv")) == 6


def test_invalid_override_exits_with_validation_code(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture, tmp_path: Path
) -> None:
    with caplog.at_level(logging.ERROR):
        result = _run(monkeypatch, "reseq-plan", "--set", "reseq.marker_freq=-0.1", "--out-dir", str(tmp_path))

    assert result == EXIT_VALIDATION
    assert "reseq.marker_freq" in caplog.text
    assert not (tmp_path / "manifest.json").exists()


def test_unknown_key_and_negative_seed_are_rejected(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    assert _run(monkeypatch, "power", "--set", "power.bogus=1", "--out-dir", str(tmp_path)) == EXIT_VALIDATION
    assert _run(monkeypatch, "power", "--seed", "-1", "--out-dir", str(tmp_path)) == EXIT_VALIDATION
    assert _run(monkeypatch, "power", "--threads", "0", "--out-dir", str(tmp_path)) == EXIT_VALIDATION


@pytest.mark.parametrize(
    "override",
    [
        "simulate.max_carry_forward=abc",
        'power.lambdas=["a"]',
        'design.budget="x"',
        "table1.deltas=[0.5, -0.01, -0.01, 0.036]",
    ],
)
def test_malformed_override_values_exit_with_validation_code(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture, tmp_path: Path, override: str
) -> None:
    with caplog.at_level(logging.ERROR):
        result = _run(monkeypatch, "table1", "--set", override, "--out-dir", str(tmp_path))

    assert result == EXIT_VALIDATION
    assert override.split("=", 1)[0] in caplog.text


def test_unreachable_joint_threshold_is_rejected_before_simulating(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture, tmp_path: Path
) -> None:
    with caplog.at_level(logging.ERROR):
        result = _run(monkeypatch, "simulate", "--set", "simulate.n_markers=20", "--out-dir", str(tmp_path))

    assert result == EXIT_VALIDATION
    assert "simulate.alpha1" in caplog.text
    assert not (tmp_path / "pipeline.csv").exists()


def test_numerical_failure_exits_with_its_own_code(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    def failing(_ctx: stage_planner.RunContext) -> list[Path]:
        raise NumericalError("table1", "forced")

    monkeypatch.setitem(stage_planner.HANDLERS, "table1", failing)

    assert _run(monkeypatch, "table1", "--out-dir", str(tmp_path)) == EXIT_NUMERICAL


def test_out_dir_defaults_to_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    target = tmp_path / "from-env"
    monkeypatch.setenv("GWAS_PLANNER_OUT_DIR", str(target))

    assert _run(monkeypatch, "table1") == EXIT_OK
    assert (target / "table1.csv").exists()


def test_simulation_tables_are_identical_across_runs_and_threads(
    monkeypatch: pytest.MonkeyPatch, tmp_path: Path
) -> None:
    for name, threads in (("a", "1"), ("b", "1"), ("c", "3")):
        result = _run(
            monkeypatch, "simulate", "--seed", "7", "--threads", threads, "--out-dir", str(tmp_path / name), *SMALL_SIMULATION
        )
        assert result == EXIT_OK

    for stem in ("pipeline.csv", "simulation_summary.csv"):
        reference = (tmp_path / "a" / stem).read_bytes()
        assert (tmp_path / "b" / stem).read_bytes() == reference
        assert (tmp_path / "c" / stem).read_bytes() == reference
    assert len(read_table(tmp_path / "a" / "pipeline.csv")) == 2


def test_saved_cohort_feeds_significance(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    sim_dir = tmp_path / "sim"
    assert (
        _run(monkeypatch, "simulate", "--out-dir", str(sim_dir), "--set", "simulate.save_cohort=true", *SMALL_SIMULATION)
        == EXIT_OK
    )
    assert (sim_dir / "cohort.subjects.csv").exists()

    result = _run(
        monkeypatch,
        "significance",
        "--out-dir",
        str(tmp_path / "sig"),
        "--set",
        f"significance.cohort_path={sim_dir / 'cohort.gwsc'}",
        "--set",
        "significance.method=lin",
        "--set",
        "significance.n_draws=200",
    )

    assert result == EXIT_OK
    rows = read_table(tmp_path / "sig" / "significance.csv")
    assert len(rows) == 20
    assert all(float(row["adjusted_p"]) >= float(row["raw_p"]) for row in rows)


def test_significance_reports_both_methods(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(
        monkeypatch,
        "significance",
        "--out-dir",
        str(tmp_path),
        "--set",
        "significance.n_markers=10",
        "--set",
        "significance.n_draws=200",
    )

    assert result == EXIT_OK
    methods = [row["method"] for row in read_table(tmp_path / "significance.csv")]
    assert methods.count("lin") == 10
    assert methods.count("dudbridge") == 10


def test_family_based_stage_two_is_a_validation_error(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(
        monkeypatch,
        "significance",
        "--out-dir",
        str(tmp_path),
        "--set",
        "significance.stage2_sampling=family",
        "--set",
        "significance.n_draws=200",
    )

    assert result == EXIT_VALIDATION


def test_gxe_writes_replicates_and_summary(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(
        monkeypatch,
        "gxe",
        "--out-dir",
        str(tmp_path),
        "--set",
        "gxe.n_markers=20",
        "--set",
        "gxe.replicates=2",
        "--set",
        "gxe.n_cases=200",
        "--set",
        "gxe.n_controls=200",
    )

    assert result == EXIT_OK
    assert len(read_table(tmp_path / "gxe.csv")) == 2
    summary = read_table(tmp_path / "gxe_summary.csv")
    assert summary[0]["replicates"] == "2"


def test_reseq_plan_discovery_and_risk_index(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(
        monkeypatch,
        "reseq-plan",
        "--out-dir",
        str(tmp_path),
        "--set",
        "reseq.risk_index=true",
        "--set",
        "reseq.n_draws=20000",
    )

    assert result == EXIT_OK
    plan = read_table(tmp_path / "reseq_plan.csv")
    assert plan[0]["stratum"] == "case/minor"
    assert plan[0]["sampled"] == "96"
    yields = read_table(tmp_path / "stratum_yields.csv")
    assert [row["stratum"] for row in yields if row["argmax"] == "true"] == ["case/minor"]
    assert len(read_table(tmp_path / "risk_index_yields.csv")) >= 2


def test_joint_reseq_plan_reports_offsets(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(monkeypatch, "reseq-plan", "--out-dir", str(tmp_path), "--set", "reseq.purpose=joint")

    assert result == EXIT_OK
    plan = read_table(tmp_path / "reseq_plan.csv")
    assert all(int(row["sampled"]) > 0 for row in plan)
    assert all(row["offset"] != "nan" for row in plan)


def test_subcommand_is_required(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(sys, "argv", ["gwas-stage-planner"])

    with pytest.raises(SystemExit):
        parse_args()


def test_verbose_and_quiet_are_exclusive(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(sys, "argv", ["gwas-stage-planner", "table1", "--verbose", "--quiet"])

    with pytest.raises(SystemExit):
        parse_args()


@pytest.mark.slow
def test_design_optimize_writes_summary_grid_and_cost_shares(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    result = _run(
        monkeypatch,
        "design-optimize",
        "--out-dir",
        str(tmp_path),
        "--threads",
        "4",
        "--set",
        "design.n_markers=10000",
        "--set",
        "design.refine=false",
    )

    assert result == EXIT_OK
    summary = read_table(tmp_path / "design_summary.csv")
    assert len(summary) == 1
    assert float(summary[0]["power"]) >= 0.8
    shares = read_table(tmp_path / "cost_shares.csv")
    assert len(shares) == 2
