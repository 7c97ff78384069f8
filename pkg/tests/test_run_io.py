from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest

from cohort_simulator import SimulatedCohort
from errors import ValidationError
from run_io import (
    RunManifest,
    atomic_write_file,
    format_value,
    load_manifest,
    read_cohort,
    read_table,
    render_table,
    save_manifest,
    verify_manifest,
    write_cohort,
    write_table,
)


def test_atomic_write_creates_parent_and_leaves_no_temp_files(tmp_path: Path) -> None:
    target = tmp_path / "a" / "b.txt"

    atomic_write_file(target, "hello\nworld")
    atomic_write_file(target, "second")

    assert target.read_text(encoding="utf-8") == "second"
    assert [p.name for p in target.parent.iterdir()] == ["b.txt"]


def test_format_value_is_stable() -> None:
    assert format_value(True) == "true"
    assert format_value(np.bool_(False)) == "false"
    assert format_value(np.int64(7)) == "7"
    assert format_value(1.0 / 3.0) == "0.3333333333"
    assert format_value(1.91e-7) == "1.91e-07"
    assert format_value(None) == ""
    assert format_value("case/minor") == "case/minor"


def test_render_table_orders_columns_and_uses_lf() -> None:
    text = render_table([{"b": 2, "a": 0.5}], ["a", "b"])

    assert text == "a,b\n0.5,2\n"


def test_tsv_output_and_header_only_table(tmp_path: Path) -> None:
    path = write_table(tmp_path / "empty.tsv", [], ["pi", "power"], fmt="tsv")

    assert path.read_text(encoding="utf-8") == "pi\tpower\n"
    assert read_table(path, fmt="tsv") == []


def test_empty_table_without_columns_is_rejected(tmp_path: Path) -> None:
    with pytest.raises(ValidationError) as excinfo:
        write_table(tmp_path / "x.csv", [])

    assert excinfo.value.key == "columns"


def test_unwritable_output_directory_is_reported(tmp_path: Path) -> None:
    blocker = tmp_path / "blocker"
    blocker.write_text("file, not a directory", encoding="utf-8")

    with pytest.raises(ValidationError) as excinfo:
        write_table(blocker / "out.csv", [{"a": 1}])

    assert excinfo.value.key == "out_dir"


def test_unknown_format_is_rejected() -> None:
    with pytest.raises(ValidationError) as excinfo:
        render_table([], ["a"], fmt="xlsx")

    assert excinfo.value.key == "format"


def test_manifest_detects_tampered_output(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    table = write_table(tmp_path / "power.csv", [{"lambda": 10.0, "power": 0.5}])
    manifest = RunManifest("0.1.0", "power", {"seed": 1}, 1, 1, "2026-01-01T00:00:00+00:00")
    manifest.record(table, tmp_path)
    save_manifest(tmp_path / "manifest.json", manifest)

    assert load_manifest(tmp_path / "manifest.json") == manifest
    assert verify_manifest(tmp_path / "manifest.json") == []

    table.write_text("lambda,power\n10,0.9\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        mismatched = verify_manifest(tmp_path / "manifest.json")

    assert mismatched == ["power.csv"]
    assert "power.csv" in caplog.text


def test_missing_manifest_is_reported(tmp_path: Path) -> None:
    with pytest.raises(ValidationError) as excinfo:
        load_manifest(tmp_path / "manifest.json")

    assert excinfo.value.key == "manifest"


def test_cohort_file_keeps_dosages_and_subject_columns(tmp_path: Path) -> None:
    dosages = np.array([[0, 1, 2], [2, 1, 0]], dtype=np.uint8)
    cohort = SimulatedCohort(dosages, np.array([1, 0], dtype=np.uint8), np.array([0, 1], dtype=np.uint8))

    path, sidecar = write_cohort(tmp_path / "cohort.bin", cohort)
    loaded = read_cohort(path)

    assert path.read_bytes()[:5] == b"GWSC1"
    assert sidecar.name == "cohort.subjects.csv"
    assert np.array_equal(loaded.dosages, dosages)
    assert np.array_equal(loaded.phenotype, cohort.phenotype)
    assert np.array_equal(loaded.exposure, cohort.exposure)


def test_cohort_without_exposure_reads_back_none(tmp_path: Path) -> None:
    cohort = SimulatedCohort(np.zeros((3, 2), dtype=np.uint8), np.array([1, 1, 0], dtype=np.uint8))

    path, _ = write_cohort(tmp_path / "cohort.bin", cohort)

    assert read_cohort(path).exposure is None


def test_cohort_file_with_bad_header_or_size_is_rejected(tmp_path: Path) -> None:
    cohort = SimulatedCohort(np.ones((2, 2), dtype=np.uint8), np.array([1, 0], dtype=np.uint8))
    path, _ = write_cohort(tmp_path / "cohort.bin", cohort)
    raw = path.read_bytes()

    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValidationError):
        read_cohort(path)

    path.write_bytes(raw[:-1])
    with pytest.raises(ValidationError) as excinfo:
        read_cohort(path)
    assert "dosage bytes" in str(excinfo.value)
