"""
Unit tests for tables, CSV files and SVG charts
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.utils.metrics import MetricReport
from src.utils.report_generator import (BEST_MARKER, NOT_IMPLEMENTED, append_csv_row, format_table, mark_best,
                                        plot_curves, read_csv, write_csv, write_metric_report)


class TestFormatTable(unittest.TestCase):
    """Test cases for format_table and mark_best"""

    def test_alignment_and_cells(self):
        """Test column alignment and cell formatting"""
        rows = [{"arm": "direct", "fid": 12.3456789, "params": 0},
                {"arm": "ours_t", "fid": 0.0001234, "params": None}]
        text = format_table(rows, ["arm", "fid", "params"], title="Arms", footer=["note"])
        lines = text.splitlines()
        self.assertEqual(lines[0], "Arms")
        self.assertTrue(lines[2].startswith("arm    | fid"))
        self.assertIn("12.3457", text)
        self.assertIn("1.234e-04", text)
        self.assertIn("| -", lines[5])
        self.assertEqual(lines[-1], "note")

    def test_mark_best_lower(self):
        """Test marking the minimum of a column"""
        rows = [{"fid": 3.0}, {"fid": 1.5}, {"fid": NOT_IMPLEMENTED}]
        mark_best(rows, "fid")
        self.assertEqual(rows[1]["fid"], f"1.5000{BEST_MARKER}")
        self.assertEqual(rows[0]["fid"], 3.0)
        self.assertEqual(rows[2]["fid"], NOT_IMPLEMENTED)

    def test_mark_best_higher(self):
        """Test marking the maximum of a column"""
        rows = [{"acc": 0.5}, {"acc": 0.75}]
        mark_best(rows, "acc", lower_is_better=False)
        self.assertTrue(rows[1]["acc"].endswith(BEST_MARKER))

    def test_mark_best_single_row(self):
        """Test that a lone value is not marked"""
        rows = [{"fid": 2.0}]
        mark_best(rows, "fid")
        self.assertEqual(rows[0]["fid"], 2.0)


class TestFiles(unittest.TestCase):
    """Test cases for CSV, JSON report and SVG output"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_write_and_read_csv(self):
        """Test a full CSV write"""
        path = os.path.join(self.test_dir, "out", "table.csv")
        write_csv(path, [{"a": 1, "b": "x"}, {"a": 2}], ["a", "b"])
        self.assertEqual(read_csv(path), [{"a": "1", "b": "x"}, {"a": "2", "b": ""}])

    def test_append_writes_header_once(self):
        """Test appending rows to a new file"""
        path = os.path.join(self.test_dir, "log.csv")
        append_csv_row(path, {"step": 1}, ["step", "loss"])
        append_csv_row(path, {"step": 2, "loss": 0.5}, ["step", "loss"])
        with open(path) as f:
            self.assertEqual(f.read(), "step,loss\n1,\n2,0.5\n")

    def test_write_metric_report(self):
        """Test the JSON report and the appended CSV row"""
        report = MetricReport(arm="direct", proxy_fid_r=1.0, proxy_kid_r=0.1, proxy_pfid_r=2.0, proxy_pkid_r=0.2,
                              proxy_fid_b=0.5, count_accuracy=0.9, count_mae=0.1, n_generated=4, n_reference=4,
                              extractor_seed=1, sample_seed=2, patch_seed=3, config_hash="c",
                              checkpoint_hash="k", code_version="1.0.0")
        json_path, csv_path = write_metric_report(report, self.test_dir)
        with open(json_path) as f:
            payload = json.load(f)
        self.assertEqual(payload["report_hash"], report.report_hash())
        self.assertEqual(os.path.basename(json_path), "eval_direct.json")
        self.assertEqual(read_csv(csv_path)[0]["arm"], "direct")

    def test_svg_is_deterministic(self):
        """Test that identical series give identical SVG bytes"""
        series = {"train": ([1, 2, 3], [1.0, 0.5, 0.25]), "eval": ([2], [0.6])}
        first = plot_curves(series, os.path.join(self.test_dir, "a.svg"), title="loss", log_y=True)
        second = plot_curves(series, os.path.join(self.test_dir, "b.svg"), title="loss", log_y=True)
        with open(first, "rb") as fa, open(second, "rb") as fb:
            content = fa.read()
            self.assertEqual(content, fb.read())
        self.assertIn(b"<svg", content)


if __name__ == '__main__':
    unittest.main()
