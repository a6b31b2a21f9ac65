"""
Report generation and formatting.

Versioned CSV reports (loss curves, metrics, ablation grids, calibration
diagnostics), decoded-frame image grids and Rich tables for the CLI.
"""
import csv
import io
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from rich.table import Table

from errors import SchemaVersionError

CSV_SCHEMA_VERSION = 1
CSV_MAGIC = "#vivid-csv"
CSV_KINDS = ("loss", "metrics", "ablation", "calibration")


def _header_line(kind: str) -> str:
    return f"{CSV_MAGIC},{CSV_SCHEMA_VERSION},{kind}"


def _parse_header_line(line: str, path: Path) -> str:
    parts = line.strip().split(",")
    if len(parts) != 3 or parts[0] != CSV_MAGIC:
        raise SchemaVersionError(f"{path} is not a vivid CSV report")
    try:
        version = int(parts[1])
    except ValueError as e:
        raise SchemaVersionError(f"{path}: malformed schema version {parts[1]!r}") from e
    if version != CSV_SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: unsupported CSV schema version {version}")
    if parts[2] not in CSV_KINDS:
        raise SchemaVersionError(f"{path}: unknown CSV kind {parts[2]!r}")
    return parts[2]


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


class CsvReport:
    """
    Append-friendly CSV report with a fixed column set.

    The first line declares the schema version and kind; the second is
    the column header. Re-opening an existing file checks both.
    """

    def __init__(self, path: Path, kind: str, columns: Sequence[str]):
        if kind not in CSV_KINDS:
            raise ValueError(f"unknown CSV kind '{kind}'")
        self.path = Path(path)
        self.kind = kind
        self.columns = list(columns)
        if self.path.exists() and self.path.stat().st_size > 0:
            found_kind, found_columns, _ = read_csv_report(self.path)
            if found_kind != kind or found_columns != self.columns:
                raise SchemaVersionError(
                    f"{self.path} holds '{found_kind}' columns {found_columns}, expected '{kind}' {self.columns}"
                )
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                f.write(_header_line(kind) + "\n")
                csv.writer(f).writerow(self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        self.extend([row])

    def extend(self, rows: Iterable[Dict[str, Any]]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in rows:
                writer.writerow([_format(row.get(c, "")) for c in self.columns])

    def truncate_after(self, step: int) -> None:
        """Drop rows whose `step` exceeds `step` (used when resuming from an older checkpoint)."""
        kind, columns, rows = read_csv_report(self.path)
        kept = [r for r in rows if "step" not in r or int(float(r["step"])) <= step]
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            f.write(_header_line(kind) + "\n")
            writer = csv.writer(f)
            writer.writerow(columns)
            for r in kept:
                writer.writerow([r.get(c, "") for c in columns])


def write_csv_report(path: Path, kind: str, rows: List[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """Write a complete report, replacing any existing file."""
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    path = Path(path)
    if path.exists():
        path.unlink()
    CsvReport(path, kind, columns).extend(rows)
    return path


def read_csv_report(path: Path, kind: Optional[str] = None) -> Tuple[str, List[str], List[Dict[str, str]]]:
    """
    Read a report.

    Returns:
        Tuple of (kind, columns, rows as string dicts).

    Raises:
        SchemaVersionError: On a missing or unknown header line, or an unexpected kind.
    """
    path = Path(path)
    with open(path, "r", newline="", encoding="utf-8") as f:
        found = _parse_header_line(f.readline(), path)
        reader = csv.DictReader(f)
        rows = list(reader)
        columns = list(reader.fieldnames or [])
    if kind is not None and found != kind:
        raise SchemaVersionError(f"{path} is a '{found}' report, expected '{kind}'")
    return found, columns, rows


def column_floats(rows: List[Dict[str, str]], column: str) -> List[float]:
    return [float(r[column]) for r in rows if r.get(column, "") != ""]


def save_image_grid(frames: torch.Tensor, path: Path, columns: int = 6) -> Path:
    """Tile [N, 3, H, W] frames in [-1, 1] into one PNG."""
    frames = frames.detach().float().clamp(-1.0, 1.0).cpu()
    n, _, h, w = frames.shape
    rows = math.ceil(n / columns)
    grid = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    pixels = ((frames + 1.0) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for i in range(n):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = pixels[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


class TableFormatter:
    """Rich tables for CLI listings."""

    @staticmethod
    def format_value(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.4g}"
        return "" if value is None else str(value)

    @classmethod
    def metrics_table(cls, metrics: Dict[str, Any], title: str = "Metrics") -> Table:
        table = Table(title=title)
        table.add_column("Metric", style="cyan")
        table.add_column("Value", justify="right")
        for name, value in metrics.items():
            table.add_row(name, cls.format_value(value))
        return table

    @classmethod
    def rows_table(cls, rows: List[Dict[str, Any]], title: str) -> Table:
        table = Table(title=title)
        columns: List[str] = []
        for row in rows:
            columns += [k for k in row if k not in columns]
        for col in columns:
            table.add_column(col, justify="left" if col in ("variant", "name", "kind") else "right")
        for row in rows:
            table.add_row(*[cls.format_value(row.get(c)) for c in columns])
        return table

    @classmethod
    def runs_table(cls, runs: List[Tuple[Any, Dict[str, float]]]) -> Table:
        table = Table(title="Runs")
        table.add_column("ID", style="cyan", justify="right")
        table.add_column("Kind")
        table.add_column("Stage")
        table.add_column("Status")
        table.add_column("Started")
        table.add_column("Config", style="dim")
        table.add_column("Metrics")
        for run, metrics in runs:
            status_style = {"completed": "green", "aborted": "red"}.get(run.status, "yellow")
            summary = ", ".join(f"{k}={cls.format_value(v)}" for k, v in list(metrics.items())[:4])
            table.add_row(
                str(run.id),
                run.kind,
                run.stage or "",
                f"[{status_style}]{run.status}[/{status_style}]",
                run.started_at.strftime("%Y-%m-%d %H:%M"),
                run.config_hash[:8],
                summary,
            )
        return table


def rows_to_text(rows: List[Dict[str, Any]]) -> str:
    """Plain CSV text (no version line) for quick display."""
    output = io.StringIO()
    if rows:
        writer = csv.DictWriter(output, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return output.getvalue()
