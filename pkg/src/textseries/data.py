"""Dataset ingestion, windowing, normalization, and deterministic splits.

Series are handled channel-independently as univariate sequences.  Windows
are fixed-length non-overlapping slices (length 168 by default), z-scored
per window with the normalization parameters kept alongside so values can
be mapped back to raw units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FREQUENCIES = {"hourly", "daily", "weekly", "monthly", "quarterly", "yearly", "custom"}

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data (bad rows, empty files, invalid specs)."""


@dataclass
class SeriesRecord:
    """One univariate series with identity and sampling metadata."""

    series_id: str
    domain_id: str
    values: np.ndarray
    frequency: str = "custom"
    start_timestamp: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise DataError(f"series {self.series_id!r} has no values")
        if not np.isfinite(self.values).all():
            raise DataError(f"series {self.series_id!r} contains non-finite values")
        if self.frequency not in FREQUENCIES:
            raise DataError(f"series {self.series_id!r}: unknown frequency {self.frequency!r}")


@dataclass
class TimeSeriesWindow:
    """A normalized fixed-length slice plus what it takes to undo that."""

    values: np.ndarray  # float32, length L
    raw_mean: float
    raw_std: float
    domain_id: str
    series_id: str
    offset: int

    @property
    def window_id(self) -> str:
        return f"{self.series_id}:{self.offset}"

    def denormalize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.raw_std + self.raw_mean


@dataclass
class SplitSpec:
    """Train/val/test ratios plus the shuffle seed."""

    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise DataError(f"invalid split ratios {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios {self.ratios} do not sum to 1")


@dataclass
class WindowReport:
    """Bookkeeping from window extraction."""

    n_windows: int = 0
    n_short_series: int = 0
    n_dropped_points: int = 0
    degenerate_windows: list[str] = field(default_factory=list)


def _parse_value(raw: str, prev: float | None, fill_policy: str, where: str) -> float:
    text = raw.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        if fill_policy == "locf":
            # carry the last observation forward; a leading gap becomes zero
            return prev if prev is not None else 0.0
        raise DataError(f"missing value at {where}")
    try:
        return float(text)
    except ValueError:
        if fill_policy == "locf" and prev is not None:
            return prev
        raise DataError(f"non-numeric value {raw!r} at {where}")


def load_series(path: str | Path, format: str = "csv",
                fill_policy: str = "reject") -> list[SeriesRecord]:
    """Read series records from CSV (long format) or JSONL.

    CSV columns: ``series_id,domain_id,timestamp,value``.  JSONL carries one
    record object per line with SeriesRecord field names.  ``fill_policy``
    is ``reject`` (missing/non-numeric rows are errors) or ``locf`` (last
    observation carried forward).
    """
    path = Path(path)
    if fill_policy not in ("reject", "locf"):
        raise DataError(f"unknown fill policy {fill_policy!r}")
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "csv":
        return _load_csv(path, fill_policy)
    if format == "jsonl":
        return _load_jsonl(path, fill_policy)
    raise DataError(f"unknown format {format!r}")


def _load_csv(path: Path, fill_policy: str) -> list[SeriesRecord]:
    order: list[str] = []
    values: dict[str, list[float]] = {}
    meta: dict[str, tuple[str, str | None]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        expected = ["series_id", "domain_id", "timestamp", "value"]
        if [h.strip() for h in header] != expected:
            raise DataError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            sid, domain, ts, raw = row
            if sid not in values:
                order.append(sid)
                values[sid] = []
                meta[sid] = (domain, ts.strip() or None)
            prev = values[sid][-1] if values[sid] else None
            values[sid].append(_parse_value(raw, prev, fill_policy, f"{path}:{lineno}"))
    if not order:
        raise DataError(f"{path}: no data rows")
    return [
        SeriesRecord(sid, meta[sid][0], np.array(values[sid]),
                     start_timestamp=meta[sid][1])
        for sid in order
    ]


def _load_jsonl(path: Path, fill_policy: str) -> list[SeriesRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})")
            try:
                raw_vals = obj["values"]
            except KeyError:
                raise DataError(f"{path}:{lineno}: missing 'values'")
            vals: list[float] = []
            for v in raw_vals:
                prev = vals[-1] if vals else None
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    if fill_policy != "locf":
                        raise DataError(f"{path}:{lineno}: missing value")
                    vals.append(prev if prev is not None else 0.0)
                else:
                    vals.append(float(v))
            records.append(SeriesRecord(
                series_id=str(obj.get("series_id", f"s{lineno}")),
                domain_id=str(obj.get("domain_id", "unknown")),
                values=np.array(vals),
                frequency=obj.get("frequency", "custom"),
                start_timestamp=obj.get("start_timestamp"),
            ))
    if not records:
        raise DataError(f"{path}: empty file")
    return records


def window(records: list[SeriesRecord], length: int = 168, stride: int = 168,
           normalization: str = "per_window",
           report: WindowReport | None = None) -> list[TimeSeriesWindow]:
    """Cut series into fixed-length slices and normalize them.

    Trailing remainders shorter than ``length`` are dropped; series shorter
    than one window yield nothing (counted in the report, not an error).

    ``normalization``:
      * ``per_window`` -- z-score each slice on its own mean/std (default).
        Constant windows hit the std floor and map to all zeros.
      * ``per_series`` -- z-score with the parent series' mean/std, so a
        window keeps its level relative to the series.
      * ``none`` -- raw values pass through (raw_mean 0, raw_std 1).
    """
    if length < 2:
        raise DataError(f"window length must be >= 2, got {length}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if normalization not in ("per_window", "per_series", "none"):
        raise DataError(f"unknown normalization {normalization!r}")
    if report is None:
        report = WindowReport()
    out: list[TimeSeriesWindow] = []
    for rec in records:
        n = rec.values.size
        if n < length:
            report.n_short_series += 1
            continue
        k = (n - length) // stride + 1
        report.n_dropped_points += n - ((k - 1) * stride + length)
        if normalization == "per_series":
            s_mean = float(rec.values.mean())
            s_std = max(float(rec.values.std()), STD_FLOOR)
        for i in range(k):
            off = i * stride
            raw = rec.values[off:off + length]
            if normalization == "per_window":
                mean = float(raw.mean())
                std = float(raw.std())
                eff = max(std, STD_FLOOR)
                if std <= STD_FLOOR:
                    report.degenerate_windows.append(f"{rec.series_id}:{off}")
                    vals = np.zeros(length, dtype=np.float32)
                else:
                    vals = ((raw - mean) / eff).astype(np.float32)
            elif normalization == "per_series":
                mean, eff = s_mean, s_std
                vals = ((raw - mean) / eff).astype(np.float32)
            else:
                mean, eff = 0.0, 1.0
                vals = raw.astype(np.float32)
            out.append(TimeSeriesWindow(vals, mean, eff, rec.domain_id,
                                        rec.series_id, off))
            report.n_windows += 1
    return out


def split(windows: list[TimeSeriesWindow],
          spec: SplitSpec) -> tuple[list[TimeSeriesWindow], list[TimeSeriesWindow], list[TimeSeriesWindow]]:
    """Deterministic grouped train/val/test partition.

    Whole series are assigned to one side so no series leaks across splits.
    The partition is exact: disjoint and exhaustive over the input.
    """
    if len(windows) < 3:
        raise DataError(f"need at least 3 windows to split, got {len(windows)}")
    by_series: dict[str, list[TimeSeriesWindow]] = {}
    for w in windows:
        by_series.setdefault(w.series_id, []).append(w)
    ids = sorted(by_series)
    gen = np.random.Generator(np.random.PCG64(spec.seed))
    order = [ids[i] for i in gen.permutation(len(ids))]

    total = len(windows)
    train_target = spec.ratios[0] * total
    val_target = (spec.ratios[0] + spec.ratios[1]) * total
    parts: tuple[list, list, list] = ([], [], [])
    seen = 0
    for sid in order:
        group = by_series[sid]
        if seen + len(group) <= train_target + 1e-9:
            parts[0].extend(group)
        elif seen + len(group) <= val_target + 1e-9:
            parts[1].extend(group)
        else:
            parts[2].extend(group)
        seen += len(group)
    return parts


def write_series_csv(records: list[SeriesRecord], path: str | Path) -> None:
    """Emit records in the long CSV format load_series reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "domain_id", "timestamp", "value"])
        for rec in records:
            for t, v in enumerate(rec.values):
                writer.writerow([rec.series_id, rec.domain_id, t, repr(float(v))])
