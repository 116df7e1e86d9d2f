"""
Report Generator Module

This module writes experiment results in the formats the CLI emits: CSV rows
(metric logs, eval reports, comparison tables), aligned plain-text tables for
the terminal, and SVG line charts of loss and metric curves.
"""

import csv
import json
import os
from io import StringIO
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.utils.metrics import MetricReport  # noqa: E402

NOT_IMPLEMENTED = "n/a (not implemented)"
BEST_MARKER = "*"


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        if value != value:
            return "nan"
        if abs(value) >= 1e5 or (value != 0 and abs(value) < 1e-3):
            return f"{value:.3e}"
        return f"{value:.4f}"
    return str(value)


def write_csv(path: str, rows: Sequence[Mapping[str, Any]], fieldnames: Sequence[str]) -> None:
    """Atomically write rows with a header; values are written verbatim"""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    temp_file = path + ".tmp"
    with open(temp_file, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in fieldnames})
    os.replace(temp_file, path)


def append_csv_row(path: str, row: Mapping[str, Any], fieldnames: Sequence[str]) -> None:
    """Append one row, writing the header first when the file is new"""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        if new_file:
            writer.writeheader()
        writer.writerow({key: row.get(key, "") for key in fieldnames})


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def format_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str],
                 title: Optional[str] = None, footer: Optional[Sequence[str]] = None) -> str:
    """
    Render rows as an aligned plain-text table

    Args:
        rows: One mapping per row
        columns: Column keys, in display order
        title: Optional heading line
        footer: Optional lines printed under the table

    Returns:
        Table text ending with a newline
    """
    cells = [[_format_cell(row.get(column)) for column in columns] for row in rows]
    widths = [len(column) for column in columns]
    for line in cells:
        widths = [max(width, len(cell)) for width, cell in zip(widths, line)]

    output = StringIO()
    if title:
        output.write(f"{title}\n")
        output.write("=" * max(len(title), sum(widths) + 3 * (len(widths) - 1)) + "\n")
    output.write(" | ".join(column.ljust(width) for column, width in zip(columns, widths)).rstrip() + "\n")
    output.write("-+-".join("-" * width for width in widths) + "\n")
    for line in cells:
        output.write(" | ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() + "\n")
    for note in footer or ():
        output.write(f"{note}\n")
    return output.getvalue()


def mark_best(rows: List[Dict[str, Any]], column: str, lower_is_better: bool = True) -> None:
    """Append the best marker to the winning numeric value of a column, in place"""
    scored = [(row[column], index) for index, row in enumerate(rows) if isinstance(row.get(column), (int, float))]
    if len(scored) < 2:
        return
    best_value = min(scored)[0] if lower_is_better else max(scored)[0]
    for value, index in scored:
        if value == best_value:
            rows[index][column] = f"{_format_cell(value)}{BEST_MARKER}"


METRIC_COLUMNS = ["arm", "proxy_fid_r", "proxy_kid_r", "proxy_pfid_r", "proxy_pkid_r", "proxy_fid_b",
                  "count_accuracy", "count_mae", "n_generated", "n_reference", "extractor_seed",
                  "sample_seed", "patch_seed", "config_hash", "checkpoint_hash", "code_version",
                  "runtime_seconds", "report_hash"]


def write_metric_report(report: MetricReport, out_dir: str) -> Tuple[str, str]:
    """
    Write an eval report as JSON and append it to the eval CSV

    Returns:
        (json path, csv path)
    """
    os.makedirs(out_dir, exist_ok=True)
    payload = report.to_dict()
    payload["report_hash"] = report.report_hash()
    json_path = os.path.join(out_dir, f"eval_{report.arm}.json")
    temp_file = json_path + ".tmp"
    with open(temp_file, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(temp_file, json_path)

    csv_path = os.path.join(out_dir, "eval_reports.csv")
    append_csv_row(csv_path, payload, METRIC_COLUMNS)
    return json_path, csv_path


def plot_curves(series: Mapping[str, Tuple[Sequence[float], Sequence[float]]], path: str,
                title: str = "", xlabel: str = "step", ylabel: str = "loss",
                log_y: bool = False) -> str:
    """
    Save named (x, y) series as an SVG line chart

    The SVG carries no creation date and a fixed id salt, so identical data
    gives identical files.
    """
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "cascade", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label in sorted(series):
            xs, ys = series[label]
            ax.plot(list(xs), list(ys), label=label, linewidth=1.2)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if series:
            ax.legend(loc="best", fontsize="small")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
