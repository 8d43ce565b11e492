"""Two-stage batch run: normal models per triple, then warm-started fits per (triple, lot).

Work items are computed independently and reassembled in key order, so the
output does not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .. import anomaly as an
from ..errors import DomainError, NonFiniteObjectiveError, ValidationError
from ..fit import FitConfig, LotFit, fit_lot
from ..oscillator import PARAM_NAMES, ShapeSignature, TraceSeries
from .io import Dataset, Triple, fmt, write_normal_model

log = logging.getLogger(__name__)

SIGNATURE_FIELDS = PARAM_NAMES + ("ssr", "anom")
ID_COLUMNS = ("wafer", "lot", "seq")


@dataclass(frozen=True)
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    initial_lots: int = 4
    workers: int = 1
    spike_z: float = 3.0
    changepoint_window: int = 8
    changepoint_z: float = 3.0
    standardize_window: int | None = None

    def __post_init__(self):
        if self.initial_lots < 1 or self.workers < 1 or self.changepoint_window < 2:
            raise DomainError("initial_lots and workers must be >= 1, changepoint_window >= 2")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "RunConfig":
        fit_names = {f.name for f in fields(FitConfig)}
        own = {f.name for f in fields(cls)} - {"fit"}
        fit_cfg = FitConfig(**{k: v for k, v in settings.items() if k in fit_names})
        return cls(fit=fit_cfg, **{k: v for k, v in settings.items() if k in own})


@dataclass
class TripleResult:
    triple: Triple
    normal_model: an.NormalModel | None = None
    initial_fit: LotFit | None = None
    lot_fits: dict[str, LotFit] = field(default_factory=dict)
    records: list[an.AnomalyRecord] = field(default_factory=list)
    lots: dict[str, str] = field(default_factory=dict)  # wafer id -> lot id
    z_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spikes: list[str] = field(default_factory=list)
    changepoints: list[str] = field(default_factory=list)
    skipped: str | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass
class SignatureTable:
    """One tool: rows are wafers in time order, columns ``sensor/step/field``."""

    tool: str
    wafers: list[str]
    lots: list[str]
    seqs: list[int]
    columns: list[str]
    values: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def triples(self) -> list[tuple[str, str]]:
        seen = []
        for c in self.columns:
            sensor, step, _ = c.rsplit("/", 2)
            if (sensor, step) not in seen:
                seen.append((sensor, step))
        return seen

    def block(self, sensor: str, step: str) -> tuple[list[str], np.ndarray]:
        """Wafers with values for ``(sensor, step)`` and their 9-column block."""
        idx = [self.columns.index(f"{sensor}/{step}/{n}") for n in SIGNATURE_FIELDS]
        X = self.values[:, idx]
        keep = np.all(np.isfinite(X), axis=1)
        return [w for w, k in zip(self.wafers, keep) if k], X[keep]


@dataclass
class RunResult:
    tables: dict[str, SignatureTable]
    triples: dict[Triple, TripleResult]

    @property
    def skipped(self) -> dict[Triple, str]:
        return {k: v.skipped for k, v in self.triples.items() if v.skipped}


# ---------------------------------------------------------------------------- worker tasks


def _normal_task(args):
    triple, traces, cfg = args
    try:
        nm, lf = an.fit_normal_model(traces, cfg)
    except (DomainError, NonFiniteObjectiveError, np.linalg.LinAlgError) as exc:
        return triple, None, None, f"normal model failed: {exc}"
    if not lf.converged:
        return triple, None, lf, f"initial fit did not converge in {lf.rounds} rounds"
    return triple, nm, lf, None


def _lot_task(args):
    triple, lot, traces, nm, cfg = args
    try:
        lf = fit_lot(traces, cfg, warm_hyper=nm.hyper)
    except (DomainError, NonFiniteObjectiveError, np.linalg.LinAlgError) as exc:
        return triple, lot, None, [], f"lot {lot} failed: {exc}"
    recs = [an.score_wafer(s, tr, nm) for s, tr in zip(lf.signatures, traces)]
    return triple, lot, lf, recs, None


def _map(fn: Callable, tasks: Sequence, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _initial_traces(lots: list[tuple[str, list[TraceSeries]]], n_initial: int, res: TripleResult):
    if len(lots) < n_initial:
        msg = f"{'/'.join(res.triple)}: only {len(lots)} lots, using all of them for the normal model"
        res.warnings.append(msg)
        log.warning(msg)
    return [tr for _, trs in lots[:n_initial] for tr in trs]


def run_fit(dataset: Dataset, cfg: RunConfig = RunConfig()) -> RunResult:
    if len(dataset) == 0:
        raise ValidationError("nothing to fit", ["dataset has no traces"])
    triples = dataset.triples()
    results = {t: TripleResult(t) for t in triples}
    lots_of = {t: dataset.lots_for(t) for t in triples}

    stage1 = [(t, _initial_traces(lots_of[t], cfg.initial_lots, results[t]), cfg.fit) for t in triples]
    for triple, nm, lf, err in _map(_normal_task, stage1, cfg.workers):
        res = results[triple]
        res.normal_model, res.initial_fit, res.skipped = nm, lf, err
        if err:
            log.warning("skipping %s: %s", "/".join(triple), err)

    stage2 = [(t, lot, trs, results[t].normal_model, cfg.fit)
              for t in triples if results[t].normal_model is not None
              for lot, trs in lots_of[t]]
    for triple, lot, lf, recs, err in _map(_lot_task, stage2, cfg.workers):
        res = results[triple]
        if err:
            res.warnings.append(err)
            continue
        res.lot_fits[lot] = lf
        res.records.extend(recs)
        res.lots.update({r.wafer_id: lot for r in recs})

    for res in results.values():
        res.records.sort(key=lambda r: (r.sequence_index, r.wafer_id))
        _monitor(res, cfg)
    return RunResult(build_tables(dataset, results), results)


def _monitor(res: TripleResult, cfg: RunConfig):
    scores = np.array([r.score for r in res.records])
    if scores.size >= 2:
        res.z_scores = an.standardize(scores, cfg.standardize_window)[:, 0]
    else:
        res.z_scores = np.zeros(scores.size)
    if scores.size >= 5:
        res.spikes = [res.records[i].wafer_id for i in an.detect_spikes(scores, cfg.spike_z)]
    if scores.size >= 2 * cfg.changepoint_window:
        idx = an.detect_changepoints(scores, cfg.changepoint_window, cfg.changepoint_z)
        res.changepoints = [res.records[i].wafer_id for i in idx]


# ---------------------------------------------------------------------------- tables


def build_tables(dataset: Dataset, results: Mapping[Triple, TripleResult]) -> dict[str, SignatureTable]:
    tables = {}
    for tool in sorted({t[0] for t in dataset.triples()}):
        pairs = sorted(t[1:] for t in dataset.triples() if t[0] == tool)
        columns = [f"{s}/{st}/{n}" for s, st in pairs for n in SIGNATURE_FIELDS]
        wafer_seq: dict[str, int] = {}
        wafer_lot: dict[str, str] = {}
        for key, tr in dataset.traces.items():
            if key[0] != tool:
                continue
            seq = int(tr.meta.get("seq", tr.sequence_index))
            wafer_seq[tr.wafer_id] = min(seq, wafer_seq.get(tr.wafer_id, seq))
            wafer_lot.setdefault(tr.wafer_id, tr.lot_id)
        wafers = sorted(wafer_seq, key=lambda w: (wafer_seq[w], w))
        row = {w: i for i, w in enumerate(wafers)}
        values = np.full((len(wafers), len(columns)), np.nan)
        for (sensor, step) in pairs:
            res = results.get((tool, sensor, step))
            if res is None:
                continue
            c0 = columns.index(f"{sensor}/{step}/{SIGNATURE_FIELDS[0]}")
            for r in res.records:
                values[row[r.wafer_id], c0:c0 + len(SIGNATURE_FIELDS)] = np.concatenate(
                    [r.signature.as_array(), [r.ssr, r.score]])
        tables[tool] = SignatureTable(tool, wafers, [wafer_lot[w] for w in wafers],
                                      [wafer_seq[w] for w in wafers], columns, values)
    return tables


def table_path(out_dir, tool: str) -> Path:
    return Path(out_dir) / f"signatures_{tool}.csv"


def write_table(table: SignatureTable, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ID_COLUMNS) + table.columns)
        for i, wafer in enumerate(table.wafers):
            w.writerow([wafer, table.lots[i], str(table.seqs[i])] + [fmt(v) for v in table.values[i]])
    return path


def read_table(path) -> SignatureTable:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read table {path}", [str(exc)]) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or tuple(header[:3]) != ID_COLUMNS or (len(header) - 3) % len(SIGNATURE_FIELDS):
            raise ValidationError(f"{path} is not a signature table", ["unexpected header"])
        wafers, lots, seqs, vals = [], [], [], []
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ValidationError(f"{path} is not a signature table", [f"line {n}: wrong field count"])
            wafers.append(rec[0])
            lots.append(rec[1])
            seqs.append(int(rec[2]))
            vals.append([float(v) if v else math.nan for v in rec[3:]])
    tool = path.stem.removeprefix("signatures_")
    values = np.array(vals, dtype=float).reshape(len(wafers), len(header) - 3)
    return SignatureTable(tool, wafers, lots, seqs, header[3:], values)


RECORD_COLUMNS = (("tool", "sensor", "step", "wafer", "lot", "seq", "score", "z_score", "ssr", "flag")
                  + tuple(f"grad_{n}" for n in PARAM_NAMES))


def record_rows(results: Mapping[Triple, TripleResult]) -> Iterable[list[str]]:
    for triple in sorted(results):
        res = results[triple]
        spikes, cps = set(res.spikes), set(res.changepoints)
        for r, z in zip(res.records, res.z_scores):
            flag = "spike" if r.wafer_id in spikes else "changepoint" if r.wafer_id in cps else ""
            yield (list(triple) + [r.wafer_id, res.lots.get(r.wafer_id, ""), str(r.sequence_index),
                                   fmt(r.score), fmt(z), fmt(r.ssr), flag] + [fmt(g) for g in r.gradient])


def write_records(results: Mapping[Triple, TripleResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        w.writerows(record_rows(results))
    return path


def export_tables(tables: Mapping[str, SignatureTable], out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return [write_table(tables[tool], table_path(out, tool)) for tool in sorted(tables)]


def export_run(result: RunResult, out_dir) -> list[Path]:
    """Tables, anomaly records, normal models and a text summary."""
    out = Path(out_dir)
    paths = export_tables(result.tables, out)
    paths.append(write_records(result.triples, out / "anomalies.csv"))
    for triple in sorted(result.triples):
        nm = result.triples[triple].normal_model
        if nm is not None:
            paths.append(write_normal_model(nm, out / f"normal_{'_'.join(triple)}.txt"))
    summary = out / "summary.txt"
    summary.write_text(summary_text(result), encoding="utf-8")
    paths.append(summary)
    return paths


def summary_text(result: RunResult, top: int = 3) -> str:
    lines = []
    for triple in sorted(result.triples):
        res = result.triples[triple]
        name = "/".join(triple)
        if res.skipped:
            lines.append(f"{name}: skipped ({res.skipped})")
            continue
        lf = res.initial_fit
        conv = sum(f.converged for f in res.lot_fits.values())
        lines.append(f"{name}: {len(res.records)} wafers, {len(res.lot_fits)} lots "
                     f"({conv} converged), normal model from {','.join(res.normal_model.source_lots)} "
                     f"in {lf.rounds} rounds")
        for w in res.warnings:
            lines.append(f"  warning: {w}")
        order = np.argsort(-res.z_scores, kind="stable")[:top]
        for i in order:
            r = res.records[i]
            lead = an.rank_contributors(r.gradient)[0]
            lines.append(f"  wafer {r.wafer_id} z={res.z_scores[i]:.2f} score={r.score:.6g} "
                         f"top contributor {lead[0]} ({lead[1]:+.4g})")
        if res.spikes:
            lines.append(f"  spikes: {' '.join(res.spikes)}")
        if res.changepoints:
            lines.append(f"  change points: {' '.join(res.changepoints)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------- single triple


def score_triple(dataset: Dataset, nm: an.NormalModel, cfg: RunConfig = RunConfig()) -> TripleResult:
    """Fit every lot of the normal model's triple (warm-started from it) and score each wafer."""
    triple = tuple(nm.triple)
    lots = dataset.lots_for(triple)
    if not lots:
        raise ValidationError(f"no traces for {'/'.join(triple)} in the dataset")
    res = TripleResult(triple, normal_model=nm)
    tasks = [(triple, lot, trs, nm, cfg.fit) for lot, trs in lots]
    for _, lot, lf, recs, err in _map(_lot_task, tasks, cfg.workers):
        if err:
            res.warnings.append(err)
            continue
        res.lot_fits[lot] = lf
        res.records.extend(recs)
        res.lots.update({r.wafer_id: lot for r in recs})
    res.records.sort(key=lambda r: (r.sequence_index, r.wafer_id))
    _monitor(res, cfg)
    return res


def score_from_table(dataset: Dataset, table: SignatureTable, nm: an.NormalModel,
                     cfg: RunConfig = RunConfig()) -> TripleResult:
    """Score stored signatures against a normal model; traces come from the dataset."""
    tool, sensor, step = nm.triple
    if table.tool != tool:
        raise ValidationError(f"table is for tool {table.tool!r} but the normal model is for {tool!r}")
    wafers, X = table.block(sensor, step)
    traces = {tr.wafer_id: tr for tr in dataset.traces_for(nm.triple)}
    res = TripleResult(tuple(nm.triple), normal_model=nm)
    missing = [w for w in wafers if w not in traces]
    if missing:
        raise ValidationError("table wafers missing from the dataset", [f"wafer {w}" for w in missing[:20]])
    for w, row in zip(wafers, X):
        tr = traces[w]
        res.records.append(an.score_wafer(ShapeSignature.from_array(row[:7]), tr, nm))
        res.lots[w] = tr.lot_id
    res.records.sort(key=lambda r: (r.sequence_index, r.wafer_id))
    _monitor(res, cfg)
    return res
