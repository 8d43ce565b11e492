"""File formats: trace CSV, ground-truth sidecars, normal-model and config files.

Trace CSV header (exact)::

    tool,sensor,step,wafer,lot,seq,timestamp,value

Timestamps are either float seconds, kept as given, or ISO-8601 strings,
converted to seconds after the first timestamp of the same trace.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from ..anomaly import NormalModel
from ..control_map import ControlParams
from ..errors import ValidationError
from ..fit import FitConfig
from ..oscillator import PARAM_NAMES, ShapeSignature, TraceSeries
from ..simulate import SyntheticDataset

COLUMNS = ("tool", "sensor", "step", "wafer", "lot", "seq", "timestamp", "value")
MAX_REJECT_FRACTION = 0.01
MAX_DIAGNOSTICS = 200

Triple = tuple[str, str, str]


def fmt(x: float) -> str:
    """Shortest round-trip text for a float; empty for NaN."""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    diagnostics: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def reject(self, line: int, reason: str):
        self.rows_rejected += 1
        if len(self.diagnostics) < MAX_DIAGNOSTICS:
            self.diagnostics.append(f"line {line}: {reason}")

    @property
    def reject_fraction(self) -> float:
        return self.rows_rejected / self.rows_read if self.rows_read else 0.0


@dataclass
class Dataset:
    """Traces keyed by ``(tool, sensor, step, lot, wafer)``."""

    traces: dict[tuple[str, str, str, str, str], TraceSeries]
    report: IngestReport = field(default_factory=IngestReport)

    def triples(self) -> list[Triple]:
        return sorted({k[:3] for k in self.traces})

    def traces_for(self, triple: Triple) -> list[TraceSeries]:
        out = [tr for k, tr in self.traces.items() if k[:3] == tuple(triple)]
        return sorted(out, key=lambda tr: tr.sequence_index)

    def lots_for(self, triple: Triple) -> list[tuple[str, list[TraceSeries]]]:
        """Lots of a triple in time order, each with its wafers in time order."""
        groups: dict[str, list[TraceSeries]] = defaultdict(list)
        for tr in self.traces_for(triple):
            groups[tr.lot_id].append(tr)
        return sorted(groups.items(), key=lambda kv: (kv[1][0].sequence_index, kv[0]))

    def __len__(self) -> int:
        return len(self.traces)


# fromisoformat before 3.11 only takes 3- or 6-digit fractions
_FRACTION = re.compile(r"\.(\d+)")


def _parse_time(text: str) -> tuple[float, bool]:
    """Return ``(value, is_iso)``."""
    try:
        v = float(text)
    except ValueError:
        pass
    else:
        if not math.isfinite(v):
            raise ValueError(f"non-finite timestamp {text!r}")
        return v, False
    text = _FRACTION.sub(lambda m: "." + (m.group(1) + "000000")[:6], text.strip().replace("Z", "+00:00"))
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp(), True


def ingest_csv(path, force: bool = False, lot_size: int | None = None) -> Dataset:
    """Read and validate a trace CSV.

    Malformed rows are skipped with a line-numbered diagnostic.  More than 1%
    rejected rows is fatal unless ``force``.  ``lot_size`` groups consecutive
    wafers of a triple into lots wherever the ``lot`` column is empty.
    """
    path = Path(path)
    if lot_size is not None and lot_size < 1:
        raise ValidationError("invalid lot size", [f"--lot-size must be >= 1, got {lot_size}"])
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}", [str(exc)]) from exc
    report = IngestReport()
    # per trace: rows of (time, value), time kind, lot, seq
    rows: dict[tuple[str, str, str, str], dict[float, float]] = defaultdict(dict)
    kind: dict[tuple, bool] = {}
    wafer_info: dict[tuple, tuple[str, int]] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path} is empty", ["missing header line"])
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing required columns", [f"missing column {c!r}" for c in missing])
        pos = [header.index(c) for c in COLUMNS]
        width = len(header)
        for line, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            report.rows_read += 1
            if len(rec) != width:
                report.reject(line, f"expected {width} fields, found {len(rec)}")
                continue
            tool, sensor, step, wafer, lot, seq, ts, val = (rec[i].strip() for i in pos)
            if not (tool and sensor and step and wafer):
                report.reject(line, "empty tool, sensor, step or wafer")
                continue
            if "/" in tool + sensor + step:
                report.reject(line, "tool, sensor and step may not contain '/'")
                continue
            if not lot and lot_size is None:
                report.reject(line, "empty lot (supply a lot size to group wafers)")
                continue
            try:
                seq_i = int(seq)
            except ValueError:
                report.reject(line, f"seq {seq!r} is not an integer")
                continue
            try:
                t, iso = _parse_time(ts)
            except ValueError:
                report.reject(line, f"unparseable timestamp {ts!r}")
                continue
            try:
                v = float(val)
            except ValueError:
                report.reject(line, f"value {val!r} is not a number")
                continue
            if not math.isfinite(v):
                report.reject(line, f"non-finite value {val!r}")
                continue
            key = (tool, sensor, step, wafer)
            if kind.setdefault(key, iso) != iso:
                report.reject(line, "mixes ISO and numeric timestamps within one trace")
                continue
            info = wafer_info.setdefault(key, (lot, seq_i))
            if info != (lot, seq_i):
                report.reject(line, f"lot/seq {lot!r}/{seq_i} conflict with earlier {info[0]!r}/{info[1]}")
                continue
            bucket = rows[key]
            if t in bucket:
                report.reject(line, f"duplicate timestamp {ts!r} for wafer {wafer!r}")
                continue
            bucket[t] = v
            report.rows_accepted += 1

    if report.rows_rejected and report.reject_fraction > MAX_REJECT_FRACTION and not force:
        raise ValidationError(
            f"{path}: {report.rows_rejected} of {report.rows_read} rows rejected "
            f"({100 * report.reject_fraction:.2f}% > {100 * MAX_REJECT_FRACTION:g}%); use --force to continue",
            report.diagnostics[:20])

    # time order of wafers within each triple
    by_triple: dict[Triple, list[tuple[int, str]]] = defaultdict(list)
    for key, (lot, seq_i) in wafer_info.items():
        if key in rows:
            by_triple[key[:3]].append((seq_i, key[3]))
    rank: dict[tuple, int] = {}
    for triple, wafers in by_triple.items():
        seqs = [s for s, _ in wafers]
        if len(set(seqs)) != len(seqs):
            report.warnings.append(f"{'/'.join(triple)}: repeated seq values, ties broken by wafer id")
        for r, (_, w) in enumerate(sorted(wafers)):
            rank[triple + (w,)] = r

    traces: dict = {}
    for key, bucket in rows.items():
        lot, seq_i = wafer_info[key]
        r = rank[key]
        if not lot:
            lot = f"auto-{r // lot_size:04d}"
        t = np.array(sorted(bucket))
        z = np.array([bucket[x] for x in t.tolist()])
        if kind[key]:
            t = t - t[0]
        traces[key[:3] + (lot, key[3])] = TraceSeries(
            t, z, tool_id=key[0], sensor_id=key[1], step_id=key[2], wafer_id=key[3], lot_id=lot,
            sequence_index=r, meta={"seq": seq_i})
    return Dataset(traces, report)


def iter_dataset_rows(traces: Iterable[TraceSeries]) -> Iterable[list[str]]:
    ordered = sorted(traces, key=lambda tr: (tr.tool_id, tr.sensor_id, tr.step_id, tr.sequence_index, tr.wafer_id))
    for tr in ordered:
        seq = str(tr.meta.get("seq", tr.sequence_index))
        head = [tr.tool_id, tr.sensor_id, tr.step_id, tr.wafer_id, tr.lot_id, seq]
        for t, v in zip(tr.times.tolist(), tr.values.tolist()):
            yield head + [repr(t), repr(v)]


def write_dataset_csv(traces: Iterable[TraceSeries], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(iter_dataset_rows(traces))
    return path


def write_ground_truth(ds: SyntheticDataset, path) -> Path:
    """``wafer,param,true_value`` rows; ``param`` is qualified as ``sensor/step/name``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("wafer", "param", "true_value"))
        for (tool, sensor, step, wafer) in sorted(ds.ground_truth):
            truth = ds.ground_truth[(tool, sensor, step, wafer)]
            if isinstance(truth, ShapeSignature):
                items = truth.as_dict().items()
            else:
                items = ((f.name, getattr(truth, f.name)) for f in fields(ControlParams))
            for name, value in items:
                w.writerow((wafer, f"{sensor}/{step}/{name}", fmt(value)))
    return path


def write_anomaly_sidecar(ds: SyntheticDataset, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tool", "sensor", "step", "wafer", "kind", "param", "delta"))
        for a in ds.injected_anomalies:
            w.writerow((a.tool, a.sensor, a.step, a.wafer_id, a.kind, a.param, fmt(a.delta)))
    return path


# ---------------------------------------------------------------------------- key-value files


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    problems = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{n}: expected 'key = value'")
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            problems.append(f"{source}:{n}: empty key")
        elif k in out:
            problems.append(f"{source}:{n}: duplicate key {k!r}")
        else:
            out[k] = v
    if problems:
        raise ValidationError(f"malformed key-value file {source}", problems)
    return out


def write_normal_model(nm: NormalModel, path) -> Path:
    lines = [
        f"tool = {nm.triple[0]}",
        f"sensor = {nm.triple[1]}",
        f"step = {nm.triple[2]}",
        f"source_lots = {','.join(nm.source_lots)}",
        f"prior_exponent = {nm.prior_exponent}",
        f"sigma_star = {fmt(nm.sigma_star)}",
    ]
    lines += [f"mu_star.{n} = {fmt(v)}" for n, v in zip(PARAM_NAMES, nm.mu_star)]
    lines += [f"sigma_star_S.{n} = {fmt(v)}" for n, v in zip(PARAM_NAMES, nm.sigma_star_S)]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_normal_model(path) -> NormalModel:
    path = Path(path)
    try:
        kv = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}", [str(exc)]) from exc
    needed = ["tool", "sensor", "step", "source_lots", "sigma_star"]
    needed += [f"mu_star.{n}" for n in PARAM_NAMES] + [f"sigma_star_S.{n}" for n in PARAM_NAMES]
    missing = [k for k in needed if k not in kv]
    if missing:
        raise ValidationError(f"{path}: incomplete normal model", [f"missing key {k!r}" for k in missing])
    try:
        return NormalModel(
            sigma_star=float(kv["sigma_star"]),
            mu_star=[float(kv[f"mu_star.{n}"]) for n in PARAM_NAMES],
            sigma_star_S=[float(kv[f"sigma_star_S.{n}"]) for n in PARAM_NAMES],
            source_lots=tuple(s for s in kv["source_lots"].split(",") if s),
            triple=(kv["tool"], kv["sensor"], kv["step"]),
            prior_exponent=kv.get("prior_exponent", "variance"),
        )
    except ValueError as exc:
        raise ValidationError(f"{path}: invalid normal model", [str(exc)]) from exc


# pipeline options understood in config files besides the FitConfig fields
PIPELINE_KEYS: dict[str, type] = {
    "initial_lots": int,
    "workers": int,
    "lot_size": int,
    "force": bool,
    "spike_z": float,
    "changepoint_window": int,
    "changepoint_z": float,
    "standardize_window": int,
}


def _convert(kind: type, text: str) -> Any:
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def config_types() -> dict[str, type]:
    types = {f.name: (str if f.type in ("str", str) else int if f.type in ("int", int) else float)
             for f in fields(FitConfig)}
    types.update(PIPELINE_KEYS)
    return types


def load_config(path) -> dict[str, Any]:
    """Typed settings from a flat ``key = value`` file; unknown keys are an error."""
    path = Path(path)
    try:
        raw = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}", [str(exc)]) from exc
    return convert_settings(raw, str(path))


def convert_settings(raw: Mapping[str, str], source: str = "<config>") -> dict[str, Any]:
    types = config_types()
    out, problems = {}, []
    for k, v in raw.items():
        if k not in types:
            problems.append(f"{source}: unknown key {k!r}")
            continue
        try:
            out[k] = _convert(types[k], v)
        except ValueError as exc:
            problems.append(f"{source}: {k}: {exc}")
    if problems:
        raise ValidationError(f"invalid config {source}", problems)
    return out
