"""CSV round trips and figure rendering."""

import os

from glyphflow.benchmark import MetricsTable
from glyphflow.reporting import (GAP, plot_loss_curves, plot_metric_bars,
                                 plot_series, read_curve, read_rows,
                                 write_rows)


def test_rows_round_trip(tmp_path):
    path = str(tmp_path / "rows.csv")
    write_rows(path, ("name", "value"), [("a", 1), ("b", 2.5)])
    header, rows = read_rows(path)
    assert header == ("name", "value")
    assert rows == [{"name": "a", "value": "1"}, {"name": "b", "value": "2.5"}]


def test_read_curve_splits_columns(tmp_path):
    path = str(tmp_path / "loss.csv")
    write_rows(path, ("step", "l_equ", "l_total"),
               [(0, 1.5, 1.5), (25, 0.75, 0.8)])
    xs, series = read_curve(path)
    assert xs == [0.0, 25.0]
    assert series == {"l_equ": [1.5, 0.75], "l_total": [1.5, 0.8]}


def test_figures_render_to_disk(tmp_path):
    curve = str(tmp_path / "loss.csv")
    write_rows(curve, ("step", "loss"), [(0, 1.0), (10, 0.5)])
    p1 = plot_loss_curves(curve, str(tmp_path / "loss.png"), title="t")
    p2 = plot_series({"a": ([0, 1], [0.5, 0.6])}, str(tmp_path / "series.png"))
    table = MetricsTable(["x", "empty"])
    table.set("x", "id_sim", 0.5, 0.1)  # the all-gap variant must not crash
    p3 = plot_metric_bars(table, str(tmp_path / "bars.png"), title="t")
    for p in (p1, p2, p3):
        assert os.path.getsize(p) > 0


def test_gap_marker():
    assert GAP == "--"
