"""Record tables (CSV with unit-bearing columns), reports and atomic file output."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .rig import RunDataset, RunRecord

RECORD_COLUMNS = ("run_id", "step", "t_min", "d_pz_nm", "v_ac_mV", "s_2w_uV", "v_dc_mV", "loop_gain")
RECORD_MAGIC = "# sphereplate records v1"

# column -> (record attribute, factor from SI to the column unit)
_SCALES = {
    "t_min": ("t_min", 1.0),
    "d_pz_nm": ("d_pz", 1e9),
    "v_ac_mV": ("v_ac", 1e3),
    "s_2w_uV": ("s_2w", 1e6),
    "v_dc_mV": ("v_dc", 1e3),
    "loop_gain": ("loop_gain", 1.0),
}


class RecordFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def records_to_text(records, metadata: dict | None = None) -> str:
    rows = sorted(records, key=lambda r: (r.run_id, r.step))
    buf = io.StringIO()
    buf.write(RECORD_MAGIC + "\n")
    for key, value in (metadata or {}).items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in rows:
        writer.writerow(
            [r.run_id, r.step] + [_fmt(getattr(r, attr) * scale) for attr, scale in _SCALES.values()]
        )
    return buf.getvalue()


def write_records(path, records, metadata: dict | None = None) -> None:
    atomic_write_text(path, records_to_text(records, metadata))


def parse_records(text: str) -> tuple[list[RunRecord], dict]:
    """Parse a record table; returns the records and the ``# key: value`` metadata."""
    lines = text.split("\n")
    if text.endswith("\n"):
        lines = lines[:-1]
    metadata = {}
    records: list[RunRecord] = []
    header_seen = False
    last_key = None
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            if header_seen:
                raise RecordFormatError(lineno, "comment after the header row")
            key, sep, value = line[1:].partition(":")
            if sep:
                metadata[key.strip()] = value.strip()
            continue
        if not line.strip():
            raise RecordFormatError(lineno, "blank line")
        fields = next(csv.reader([line]))
        if not header_seen:
            if tuple(fields) != RECORD_COLUMNS:
                raise RecordFormatError(lineno, f"expected header {','.join(RECORD_COLUMNS)}")
            header_seen = True
            continue
        if len(fields) != len(RECORD_COLUMNS):
            raise RecordFormatError(lineno, f"expected {len(RECORD_COLUMNS)} fields, got {len(fields)}")
        try:
            run_id, step = int(fields[0]), int(fields[1])
            values = [float(v) for v in fields[2:]]
        except ValueError as exc:
            raise RecordFormatError(lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in values):
            raise RecordFormatError(lineno, "non-finite value")
        key = (run_id, step)
        if last_key is not None and key <= last_key:
            raise RecordFormatError(lineno, "rows must be sorted by (run_id, step) without duplicates")
        last_key = key
        kw = {attr: v / scale for (attr, scale), v in zip(_SCALES.values(), values)}
        if kw["v_ac"] <= 0 or kw["s_2w"] < 0:
            raise RecordFormatError(lineno, "v_ac must be positive and s_2w non-negative")
        records.append(RunRecord(run_id=run_id, step=step, **kw))
    if not header_seen:
        raise RecordFormatError(len(lines) + 1, "missing header row")
    return records, metadata


def read_records(path) -> tuple[list[RunRecord], dict]:
    return parse_records(Path(path).read_text(encoding="utf-8"))


def group_runs(records) -> list[RunDataset]:
    runs: dict[int, list[RunRecord]] = {}
    for r in records:
        runs.setdefault(r.run_id, []).append(r)
    return [RunDataset(run_id=k, records=v) for k, v in sorted(runs.items())]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def report_to_text(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n"


def write_report(path, report: dict) -> None:
    atomic_write_text(path, report_to_text(report))
