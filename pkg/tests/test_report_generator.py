"""
Tests for CSV reports, image grids and CLI tables.
"""
import numpy as np
import pytest
import torch
from PIL import Image
from rich.console import Console

from errors import SchemaVersionError
from report_generator import (
    CsvReport,
    TableFormatter,
    column_floats,
    read_csv_report,
    rows_to_text,
    save_image_grid,
    write_csv_report,
)


def test_csv_report_append_and_read(tmp_path):
    path = tmp_path / "loss.csv"
    report = CsvReport(path, "loss", ["step", "loss"])
    report.append({"step": 1, "loss": 0.5})
    report.extend([{"step": 2, "loss": 0.25}, {"step": 3}])
    assert path.read_text().splitlines()[0] == "#vivid-csv,1,loss"
    kind, columns, rows = read_csv_report(path, "loss")
    assert kind == "loss" and columns == ["step", "loss"]
    assert column_floats(rows, "loss") == [0.5, 0.25]


def test_reopening_checks_schema(tmp_path):
    path = tmp_path / "loss.csv"
    CsvReport(path, "loss", ["step", "loss"]).append({"step": 1, "loss": 1.0})
    CsvReport(path, "loss", ["step", "loss"]).append({"step": 2, "loss": 0.5})
    assert len(read_csv_report(path)[2]) == 2
    with pytest.raises(SchemaVersionError):
        CsvReport(path, "loss", ["step", "noise"])
    with pytest.raises(SchemaVersionError, match="expected 'metrics'"):
        read_csv_report(path, "metrics")
    with pytest.raises(ValueError):
        CsvReport(tmp_path / "x.csv", "other", ["a"])


@pytest.mark.parametrize(
    "first_line,match",
    [
        ("step,loss", "not a vivid CSV"),
        ("#vivid-csv,2,loss", "unsupported"),
        ("#vivid-csv,x,loss", "malformed"),
        ("#vivid-csv,1,weird", "unknown CSV kind"),
    ],
)
def test_bad_header_lines(tmp_path, first_line, match):
    path = tmp_path / "r.csv"
    path.write_text(first_line + "\nstep,loss\n1,0.5\n")
    with pytest.raises(SchemaVersionError, match=match):
        read_csv_report(path)


def test_truncate_after_drops_later_rows(tmp_path):
    path = tmp_path / "loss.csv"
    report = CsvReport(path, "loss", ["step", "loss"])
    report.extend([{"step": s, "loss": 1.0 / s} for s in range(1, 6)])
    report.truncate_after(3)
    _, _, rows = read_csv_report(path)
    assert [int(r["step"]) for r in rows] == [1, 2, 3]


def test_write_csv_report_replaces_file(tmp_path):
    path = tmp_path / "ablation.csv"
    write_csv_report(path, "ablation", [{"variant": "full", "hkv": 1.0}, {"variant": "no-hand", "hmv": 2.0}])
    _, columns, rows = read_csv_report(path)
    assert columns == ["variant", "hkv", "hmv"]
    assert rows[1]["hkv"] == ""
    write_csv_report(path, "ablation", [{"variant": "only"}])
    assert len(read_csv_report(path)[2]) == 1


def test_floats_are_written_exactly(tmp_path):
    path = write_csv_report(tmp_path / "m.csv", "metrics", [{"name": "x", "value": 0.1 + 0.2, "flag": True}])
    row = read_csv_report(path)[2][0]
    assert float(row["value"]) == 0.1 + 0.2
    assert row["flag"] == "1"


def test_image_grid(tmp_path):
    frames = torch.full((7, 3, 4, 5), -1.0)
    frames[6] = 1.0
    path = save_image_grid(frames, tmp_path / "grid" / "frames.png", columns=3)
    image = np.asarray(Image.open(path))
    assert image.shape == (12, 15, 3)
    assert image[8:12, 0:5].min() == 255
    assert image[0:4, 0:5].max() == 0


def test_tables_render():
    console = Console(record=True, width=120)
    console.print(TableFormatter.metrics_table({"hkv": 1.23456, "note": None}))
    console.print(TableFormatter.rows_table([{"variant": "full", "hkv": 1.0}, {"variant": "base", "hmv": 2.0}], "Ablation"))
    text = console.export_text()
    assert "1.235" in text and "variant" in text and "base" in text


def test_rows_to_text():
    assert rows_to_text([]) == ""
    assert rows_to_text([{"a": 1, "b": 2}]).splitlines() == ["a,b", "1,2"]
