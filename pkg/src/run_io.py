from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from cohort_simulator import SimulatedCohort
from errors import ValidationError

COHORT_MAGIC = b"GWSC1"
COHORT_HEADER = struct.Struct("<II")
FLOAT_DIGITS = 10
FORMATS = {"csv": ",", "tsv": "\t"}
logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Path, content: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # Write to a temp file in the same directory, then atomically replace the target.
    with tempfile.NamedTemporaryFile(
        mode="wb",
        dir=path.parent,
        prefix=f".{path.name}.",
        suffix=".tmp",
        delete=False,
    ) as tmp:
        tmp.write(content)
        tmp_path = Path(tmp.name)
    os.replace(tmp_path, path)


def atomic_write_file(path: Path, content: str) -> None:
    atomic_write_bytes(path, content.encode("utf-8"))


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def format_value(value: object) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), f".{FLOAT_DIGITS}g")
    if value is None:
        return ""
    return str(value)


def render_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str], fmt: str = "csv") -> str:
    """Delimited text with a fixed column order, minimal quoting and LF line endings."""
    if fmt not in FORMATS:
        raise ValidationError("format", fmt, f"expected one of {sorted(FORMATS)}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter=FORMATS[fmt], lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(column)) for column in columns])
    return buffer.getvalue()


def write_table(
    path: Path,
    rows: Sequence[Mapping[str, object]],
    columns: Sequence[str] | None = None,
    fmt: str = "csv",
) -> Path:
    if columns is None:
        if not rows:
            raise ValidationError("columns", None, "column order is required for an empty table")
        columns = list(rows[0].keys())
    try:
        atomic_write_file(path, render_table(rows, columns, fmt))
    except OSError as exc:
        raise ValidationError("out_dir", str(path.parent), f"cannot write report: {exc}") from exc
    logger.debug("Wrote %s rows to %s", len(rows), path)
    return path


def read_table(path: Path, fmt: str = "csv") -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle, delimiter=FORMATS[fmt]))


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    config: dict
    seed: int
    threads: int
    started_at: str
    finished_at: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def record(self, path: Path, root: Path) -> None:
        self.outputs[path.relative_to(root).as_posix()] = file_digest(path)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, ensure_ascii=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))


def save_manifest(path: Path, manifest: RunManifest) -> None:
    atomic_write_file(path, manifest.to_json())


def load_manifest(path: Path) -> RunManifest:
    if not path.exists():
        raise ValidationError("manifest", str(path), "manifest file does not exist")
    return RunManifest.from_json(path.read_text(encoding="utf-8"))


def verify_manifest(path: Path) -> list[str]:
    """Names of outputs whose current digest differs from the manifest (missing files included)."""
    manifest = load_manifest(path)
    root = path.parent
    mismatched: list[str] = []
    for name, digest in sorted(manifest.outputs.items()):
        target = root / name
        if not target.exists() or file_digest(target) != digest:
            mismatched.append(name)
    if mismatched:
        logger.warning("Manifest digest mismatch for: %s", ", ".join(mismatched))
    return mismatched


def write_cohort(path: Path, cohort: SimulatedCohort) -> tuple[Path, Path]:
    """Binary dosage matrix plus a sidecar CSV with phenotype and exposure per subject."""
    dosages = np.ascontiguousarray(cohort.dosages, dtype=np.uint8)
    header = COHORT_MAGIC + COHORT_HEADER.pack(cohort.n_subjects, cohort.n_markers)
    atomic_write_bytes(path, header + dosages.tobytes(order="C"))
    sidecar = path.with_suffix(".subjects.csv")
    rows: Iterable[dict[str, object]] = (
        {
            "subject": i,
            "phenotype": int(cohort.phenotype[i]),
            "exposure": "" if cohort.exposure is None else int(cohort.exposure[i]),
        }
        for i in range(cohort.n_subjects)
    )
    write_table(sidecar, list(rows), ["subject", "phenotype", "exposure"])
    return path, sidecar


def read_cohort(path: Path) -> SimulatedCohort:
    raw = path.read_bytes()
    if not raw.startswith(COHORT_MAGIC):
        raise ValidationError("cohort", str(path), "missing GWSC1 magic header")
    offset = len(COHORT_MAGIC)
    n_subjects, n_markers = COHORT_HEADER.unpack_from(raw, offset)
    offset += COHORT_HEADER.size
    expected = n_subjects * n_markers
    if len(raw) - offset != expected:
        raise ValidationError("cohort", str(path), f"expected {expected} dosage bytes, found {len(raw) - offset}")
    dosages = np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(n_subjects, n_markers).copy()
    subjects = read_table(path.with_suffix(".subjects.csv"))
    if len(subjects) != n_subjects:
        raise ValidationError("cohort", str(path), "sidecar subject count does not match the dosage file")
    phenotype = np.array([int(row["phenotype"]) for row in subjects], dtype=np.uint8)
    exposure = None
    if subjects and subjects[0]["exposure"] != "":
        exposure = np.array([int(row["exposure"]) for row in subjects], dtype=np.uint8)
    return SimulatedCohort(dosages, phenotype, exposure)
