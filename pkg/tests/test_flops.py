import csv
import dataclasses
import io
import unittest

import numpy as np

from errors import ConfigurationError, UnreachableBudgetError
from flops import (
    DEFAULT_PRESET,
    PRESET_VISUAL_TOKENS,
    PRESETS,
    TABLE_RETENTIONS,
    FlopsModelParams,
    bias_estimation_flops,
    layer_flops,
    prefill_flops,
    refinement_overhead_flops,
    report_to_csv,
    retention_for_budget,
    table_rows,
)

QWEN = PRESETS["qwen2-vl-7b"]


class TestLayerFlops(unittest.TestCase):

    def test_tiny_arithmetic(self):
        self.assertEqual(layer_flops(1, FlopsModelParams(hidden=2, ffn=4, layers=1)), 36.0)

    def test_empty_sequence(self):
        self.assertEqual(layer_flops(0, QWEN), 0.0)

    def test_full_video_layer(self):
        self.assertAlmostEqual(layer_flops(6272, QWEN) / 1.456e12, 1.0, delta=0.005)


class TestPrefillFlops(unittest.TestCase):

    def test_published_budget_table(self):
        expected = {1.0: 40.8, 0.282: 11.0, 0.235: 9.31, 0.188: 7.66, 0.140: 6.03}
        for row in table_rows(6272, QWEN, TABLE_RETENTIONS):
            with self.subTest(retention=row.retention):
                self.assertLess(abs(row.total_tflops - expected[row.retention]) / expected[row.retention], 0.01)

    def test_shorter_video_full_budget(self):
        self.assertLess(abs(prefill_flops(2880, QWEN).total_tflops - 16.7) / 16.7, 0.01)

    def test_full_retention_is_unpruned(self):
        report = prefill_flops(6272, QWEN)
        self.assertEqual(report.total, QWEN.layers * layer_flops(6272, QWEN))
        self.assertEqual(report.ratio, 1.0)
        self.assertEqual(report.retained_tokens, 6272)

    def test_pruning_after_second_layer(self):
        params = dataclasses.replace(QWEN, prune_layer=2)
        for retention, tflops in ((0.2, 4.06), (0.1, 2.61)):
            with self.subTest(retention=retention):
                report = prefill_flops(2880, params, retention)
                self.assertLess(abs(report.total_tflops - tflops) / tflops, 0.015)
        report = prefill_flops(2880, QWEN, 679 / 2880)
        self.assertEqual(report.retained_tokens, 679)
        self.assertAlmostEqual(report.total_tflops, 4.119, delta=0.01)

    def test_monotone_in_retention(self):
        totals = [prefill_flops(6272, QWEN, r).total for r in np.linspace(0.01, 1.0, 60)]
        self.assertTrue(all(b >= a for a, b in zip(totals, totals[1:])))
        self.assertLess(totals[0], totals[-1])

    def test_invalid_retention(self):
        with self.assertRaises(ConfigurationError):
            prefill_flops(6272, QWEN, 0.0)

    def test_prune_layer_beyond_depth(self):
        with self.assertRaises(ConfigurationError):
            prefill_flops(100, FlopsModelParams(hidden=8, ffn=16, layers=2, prune_layer=3))


class TestRetentionForBudget(unittest.TestCase):

    def test_full_budget(self):
        self.assertAlmostEqual(retention_for_budget(prefill_flops(6272, QWEN).total, 6272, QWEN), 1.0)

    def test_table_budget(self):
        self.assertAlmostEqual(retention_for_budget(9.31e12, 6272, QWEN), 0.235, delta=0.003)

    def test_round_trip_within_one_token(self):
        rng = np.random.default_rng(0)
        low = prefill_flops(6272, QWEN, 1 / 6272).total
        high = prefill_flops(6272, QWEN).total
        rest = QWEN.layers - QWEN.prune_layer
        for target in rng.uniform(low * 1.001, high * 0.999, size=100):
            with self.subTest(target=target):
                report = prefill_flops(6272, QWEN, retention_for_budget(target, 6272, QWEN))
                kept = report.retained_tokens
                slack = rest * (layer_flops(kept + 1, QWEN) - layer_flops(kept - 1, QWEN))
                self.assertLessEqual(abs(report.total - target), slack)

    def test_unreachable(self):
        with self.assertRaises(UnreachableBudgetError):
            retention_for_budget(1e9, 6272, QWEN)
        with self.assertRaises(UnreachableBudgetError):
            retention_for_budget(1e15, 6272, QWEN)


class TestOverhead(unittest.TestCase):

    def test_single_segment(self):
        overhead = refinement_overhead_flops([10], [3], hidden=4)
        self.assertEqual(overhead, {"filter": 168.0, "dedup": 16.0, "fill": 224.0})

    def test_sums_over_segments(self):
        one = refinement_overhead_flops([10], [3], hidden=4)
        two = refinement_overhead_flops([10, 10], [3, 3], hidden=4)
        self.assertEqual(two, {k: 2 * v for k, v in one.items()})

    def test_bias_estimation(self):
        self.assertEqual(bias_estimation_flops(100, 4, QWEN), layer_flops(104, QWEN))


class TestReportCsv(unittest.TestCase):

    def test_columns(self):
        buf = io.StringIO()
        report_to_csv(table_rows(6272, QWEN, (1.0, 0.235)), buf, overhead={"filter": 2e12})
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        self.assertEqual(rows[0], ["retention", "retained_tokens", "total_tflops", "ratio", "overhead_filter_tflops",
                                   "overhead_dedup_tflops", "overhead_fill_tflops", "overhead_bias_tflops"])
        self.assertEqual(rows[1][:2], ["1.0000", "6272"])
        self.assertEqual(rows[1][3], "1.0000")
        self.assertEqual(rows[2][1], "1474")
        self.assertEqual(rows[2][4:], ["2", "0", "0", "0"])

    def test_report_overhead_and_labels(self):
        report = prefill_flops(6272, QWEN, 0.235)
        report.overhead = {"filter": 1e12, "dedup": 3e12, "fill": 5e11, "bias": 2e12}
        buf = io.StringIO()
        report_to_csv([report], buf, labels=[{"trial": 0, "pruner": "sharp"}])
        rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
        self.assertEqual(rows[0]["trial"], "0")
        self.assertEqual(rows[0]["pruner"], "sharp")
        self.assertEqual(rows[0]["overhead_dedup_tflops"], "3")
        self.assertEqual(rows[0]["overhead_fill_tflops"], "0.5")
        # Overhead never enters the headline budget.
        self.assertEqual(rows[0]["total_tflops"], f"{report.total_tflops:.4f}")

    def test_presets_carry_their_token_count(self):
        self.assertEqual(PRESET_VISUAL_TOKENS["qwen2-vl-7b"], 2880)
        self.assertEqual(PRESET_VISUAL_TOKENS[DEFAULT_PRESET], 6272)


if __name__ == '__main__':
    unittest.main()
