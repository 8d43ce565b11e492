"""Batch orchestration: CSV ingestion, parallel lot fitting, tables, heatmaps and the CLI."""

from .io import Dataset, IngestReport, ingest_csv
from .run import RunConfig, RunResult, SignatureTable, export_tables, run_fit

__all__ = ["Dataset", "IngestReport", "ingest_csv", "RunConfig", "RunResult", "SignatureTable",
           "export_tables", "run_fit"]
