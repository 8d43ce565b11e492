"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input or usage, 2 for failures at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import anomaly as an
from ..errors import DomainError, ValidationError
from ..simulate import GenerationPlan, demo_plan, make_dataset
from . import heatmap as hm
from . import io
from . import run as rn

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

MEANING = {"gamma": "damping", "R": "amplitude", "omega": "frequency", "y": "offset",
           "phi": "phase", "c": "slope", "x": "time shift"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(text: str) -> tuple[str, str, str]:
    parts = text.split("/")
    if len(parts) != 3 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected tool/sensor/step, got {text!r}")
    return tuple(parts)


def _fit_options(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value settings file")
    p.add_argument("--workers", type=int, help="worker processes (default 1)")
    p.add_argument("--initial-lots", type=int, help="lots pooled into the normal model (default 4)")
    p.add_argument("--lot-size", type=int, help="group consecutive wafers into lots where the lot column is empty")
    p.add_argument("--force", action="store_true", default=None,
                   help="continue even when more than 1%% of rows are rejected")
    p.add_argument("--prior-exponent", choices=("variance", "std"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="greybox", description="Grey-box shape signatures and anomaly monitoring for sensor traces.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generation plan -> dataset CSV and ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--plan", type=Path, help="JSON generation plan")
    src.add_argument("--demo", action="store_true", help="use the bundled demo plan")
    p.add_argument("--seed", type=int, help="override the plan seed")
    p.add_argument("--out", type=Path, required=True, help="dataset CSV to write")
    p.add_argument("--truth", type=Path, help="ground-truth sidecar (default <out>_truth.csv)")
    p.add_argument("--dump-plan", type=Path, help="also write the plan as JSON")

    p = sub.add_parser("fit", help="dataset -> signature tables, anomaly records and normal models")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _fit_options(p)

    p = sub.add_parser("normal", help="dataset + triple -> normal model file")
    p.add_argument("data", type=Path)
    p.add_argument("--triple", type=_triple, required=True, help="tool/sensor/step")
    p.add_argument("--out", type=Path, required=True)
    _fit_options(p)

    p = sub.add_parser("score", help="dataset (optionally with a signature table) + normal model -> anomaly records")
    p.add_argument("data", type=Path)
    p.add_argument("--normal", type=Path, required=True)
    p.add_argument("--table", type=Path, help="score signatures from this table instead of refitting")
    p.add_argument("--out", type=Path, help="records CSV (default: stdout)")
    _fit_options(p)

    p = sub.add_parser("deconstruct", help="ranked gradient report for a wafer or a change point")
    p.add_argument("data", type=Path)
    p.add_argument("--normal", type=Path, required=True)
    p.add_argument("--wafer", required=True, help="spiked wafer, or the last wafer before a change point")
    p.add_argument("--after", help="first wafer after the change point (Taylor midpoint gradient)")
    p.add_argument("--table", type=Path, help="take signatures from this table instead of refitting")
    _fit_options(p)

    p = sub.add_parser("heatmap", help="signature table -> z-score CSV and SVG")
    p.add_argument("table", type=Path)
    p.add_argument("--triple", type=_triple, required=True, help="tool/sensor/step")
    p.add_argument("--out", type=Path, required=True, help="output prefix; .csv and .svg are appended")
    p.add_argument("--window", type=int, help="trailing standardization window (default: whole period)")

    p = sub.add_parser("report", help="full run: tables, records, heatmaps and a summary")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _fit_options(p)
    return parser


def _settings(args) -> dict:
    settings = io.load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {"workers": args.workers, "initial_lots": args.initial_lots, "lot_size": args.lot_size,
                 "force": args.force, "prior_exponent": args.prior_exponent}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return settings


def _load(args) -> tuple[io.Dataset, rn.RunConfig]:
    settings = _settings(args)
    lot_size = settings.pop("lot_size", None)
    force = settings.pop("force", False)
    ds = io.ingest_csv(args.data, force=force, lot_size=lot_size)
    for msg in ds.report.diagnostics[:20]:
        logging.warning("%s: %s", args.data, msg)
    for msg in ds.report.warnings:
        logging.warning("%s", msg)
    try:
        cfg = rn.RunConfig.from_settings(settings)
    except DomainError as exc:
        raise ValidationError("invalid settings", [str(exc)]) from exc
    return ds, cfg


def cmd_simulate(args) -> int:
    if args.plan:
        try:
            plan = GenerationPlan.from_dict(json.loads(args.plan.read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError) as exc:
            raise ValidationError(f"cannot load plan {args.plan}", [str(exc)]) from exc
    else:
        plan = demo_plan()
    if args.seed is not None:
        plan = GenerationPlan(args.seed, plan.triples)
    ds = make_dataset(plan)
    io.write_dataset_csv(ds.traces.values(), args.out)
    stem = args.out.with_suffix("")
    io.write_ground_truth(ds, args.truth or Path(f"{stem}_truth.csv"))
    io.write_anomaly_sidecar(ds, Path(f"{stem}_anomalies.csv"))
    if args.dump_plan:
        args.dump_plan.write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(ds.traces)} traces to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    ds, cfg = _load(args)
    result = rn.run_fit(ds, cfg)
    paths = rn.export_run(result, args.out)
    for triple, why in sorted(result.skipped.items()):
        print(f"skipped {'/'.join(triple)}: {why}", file=sys.stderr)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_normal(args) -> int:
    ds, cfg = _load(args)
    lots = ds.lots_for(args.triple)
    if not lots:
        raise ValidationError(f"triple {'/'.join(args.triple)} not found in {args.data}")
    res = rn.TripleResult(args.triple)
    traces = rn._initial_traces(lots, cfg.initial_lots, res)
    for w in res.warnings:
        logging.warning("%s", w)
    nm, lf = an.fit_normal_model(traces, cfg.fit)
    if not lf.converged:
        print(f"warning: initial fit stopped after {lf.rounds} rounds without converging", file=sys.stderr)
    io.write_normal_model(nm, args.out)
    print(f"wrote normal model for {'/'.join(nm.triple)} from lots {','.join(nm.source_lots)} to {args.out}")
    return EXIT_OK


def _scored(args, ds: io.Dataset, cfg: rn.RunConfig) -> rn.TripleResult:
    nm = io.read_normal_model(args.normal)
    if args.table:
        return rn.score_from_table(ds, rn.read_table(args.table), nm, cfg)
    return rn.score_triple(ds, nm, cfg)


def cmd_score(args) -> int:
    ds, cfg = _load(args)
    res = _scored(args, ds, cfg)
    rows = rn.record_rows({res.triple: res})
    if args.out:
        rn.write_records({res.triple: res}, args.out)
        print(f"wrote {len(res.records)} records to {args.out}")
    else:
        print(",".join(rn.RECORD_COLUMNS))
        for r in rows:
            print(",".join(r))
    return EXIT_OK


def cmd_deconstruct(args) -> int:
    ds, cfg = _load(args)
    res = _scored(args, ds, cfg)
    by_id = {r.wafer_id: r for r in res.records}
    traces = {tr.wafer_id: tr for tr in ds.traces_for(res.triple)}
    for w in filter(None, (args.wafer, args.after)):
        if w not in by_id:
            raise ValidationError(f"wafer {w!r} has no fitted signature for {'/'.join(res.triple)}")
    nm = res.normal_model
    rec = by_id[args.wafer]
    if args.after:
        grad = an.changepoint_gradient(rec.signature, by_id[args.after].signature, traces[args.wafer], nm)
        label = f"change point {args.wafer} -> {args.after} (Taylor midpoint gradient)"
    else:
        grad = rec.gradient
        label = f"wafer {args.wafer} score {rec.score:.6g}"
    for name, value in an.rank_contributors(grad):
        print(f"{name}\t{value:+.6e}\t{MEANING[name]}")
    print(f"# {'/'.join(res.triple)} {label}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    table = rn.read_table(args.table)
    csv_path, svg_path = hm.render_heatmap(table, args.triple, args.out, args.window)
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    ds, cfg = _load(args)
    result = rn.run_fit(ds, cfg)
    rn.export_run(result, args.out)
    for triple in sorted(result.triples):
        if result.triples[triple].skipped or len(result.triples[triple].records) < 2:
            continue
        hm.render_heatmap(result.tables[triple[0]], triple, args.out / f"heatmap_{'_'.join(triple)}",
                          cfg.standardize_window)
    sys.stdout.write(rn.summary_text(result))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "normal": cmd_normal, "score": cmd_score,
            "deconstruct": cmd_deconstruct, "heatmap": cmd_heatmap, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a run-time failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
