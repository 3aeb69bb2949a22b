import json
import math

import numpy as np
from django.test import SimpleTestCase

from geometry.camera import DepthMap
from main.exceptions import ConfigError, ContractError, DimensionError

from .evaluation import MetricsReport, evaluate, evaluate_many
from .renderers import report_from_json, report_to_csv, report_to_json, reports_to_csv


def oracle(pred, gt, max_depth):
    """Straight-line scalar loop over the valid pixels."""
    n = se = ae = rel = ise = iae = 0.0
    hits = [0, 0, 0]
    for d, g in zip(np.ravel(pred), np.ravel(gt)):
        d, g = float(d), float(g)
        if not 0 < g <= max_depth:
            continue
        n += 1
        se += (d - g) ** 2
        ae += abs(d - g)
        rel += abs(d - g) / g
        ise += (1000 / d - 1000 / g) ** 2
        iae += abs(1000 / d - 1000 / g)
        ratio = max(d / g, g / d)
        for i in range(3):
            hits[i] += ratio < 1.25 ** (i + 1)
    return {
        "rmse": math.sqrt(se / n),
        "mae": ae / n,
        "abs_rel": rel / n,
        "irmse": math.sqrt(ise / n),
        "imae": iae / n,
        "delta1": 100 * (hits[0] / n),
        "delta2": 100 * (hits[1] / n),
        "delta3": 100 * (hits[2] / n),
        "valid_count": int(n),
    }


def random_pair(seed, shape=(24, 30)):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 12.0, size=shape) * (rng.random(shape) < 0.7)
    pred = rng.uniform(0.4, 11.0, size=shape)
    return pred, gt


class EvaluateTests(SimpleTestCase):
    def test_identity(self):
        gt = np.random.default_rng(0).uniform(1, 9, size=(8, 8))
        report = evaluate(gt, DepthMap(gt), 10.0)
        for name in ("rmse", "mae", "abs_rel", "irmse", "imae"):
            self.assertEqual(getattr(report, name), 0.0)
        self.assertEqual((report.delta1, report.delta2, report.delta3), (100.0, 100.0, 100.0))
        self.assertEqual(report.valid_count, 64)

    def test_uniform_overestimate(self):
        gt = np.random.default_rng(1).uniform(1, 9, size=(6, 7))
        report = evaluate(1.3 * gt, gt, 10.0)
        self.assertAlmostEqual(report.abs_rel, 0.3, places=12)
        self.assertEqual(report.delta1, 0.0)
        self.assertEqual(report.delta2, 100.0)
        self.assertEqual(report.delta3, 100.0)

    def test_two_pixel_example(self):
        report = evaluate(np.array([[2.5, 3.0]]), np.array([[2.0, 4.0]]), 10.0)
        self.assertAlmostEqual(report.mae, 0.75, places=12)
        self.assertAlmostEqual(report.rmse, math.sqrt(0.625), places=12)
        self.assertAlmostEqual(report.imae, 91.66666666666667, places=9)
        self.assertEqual(report.valid_count, 2)

    def test_matches_scalar_oracle(self):
        for seed in range(20):
            pred, gt = random_pair(seed)
            expected = oracle(pred, gt, 10.0)
            report = evaluate(pred, gt, 10.0).to_dict()
            with self.subTest(seed=seed):
                self.assertEqual(report["valid_count"], expected["valid_count"])
                for name in ("delta1", "delta2", "delta3"):
                    self.assertEqual(report[name], expected[name])
                for name in ("rmse", "mae", "abs_rel", "irmse", "imae"):
                    self.assertLess(abs(report[name] - expected[name]), 1e-12 * max(1.0, expected[name]))

    def test_report_invariants(self):
        for seed in range(10):
            report = evaluate(*random_pair(seed), 10.0)
            with self.subTest(seed=seed):
                self.assertGreaterEqual(report.rmse, report.mae)
                self.assertGreaterEqual(report.irmse, report.imae)
                self.assertTrue(0 <= report.delta1 <= report.delta2 <= report.delta3 <= 100)

    def test_cap_excludes_far_ground_truth_only(self):
        pred, gt = random_pair(3)
        report = evaluate(pred, gt, 10.0)
        far = gt > 10.0
        self.assertEqual(report.valid_count, int(((gt > 0) & ~far).sum()))
        wild = np.where(far | (gt == 0), 1e6, pred)
        self.assertEqual(evaluate(wild, gt, 10.0), report)
        self.assertEqual(evaluate(pred, gt, 80.0).valid_count, int((gt > 0).sum()))

    def test_common_scale(self):
        pred, gt = random_pair(4)
        base = evaluate(pred, gt, 100.0)
        scaled = evaluate(2.5 * pred, 2.5 * gt, 100.0)
        self.assertAlmostEqual(scaled.abs_rel, base.abs_rel, places=12)
        self.assertEqual((scaled.delta1, scaled.delta2, scaled.delta3), (base.delta1, base.delta2, base.delta3))
        self.assertAlmostEqual(scaled.rmse, 2.5 * base.rmse, places=10)
        self.assertAlmostEqual(scaled.mae, 2.5 * base.mae, places=10)

    def test_contract_errors(self):
        with self.assertRaises(ContractError):
            evaluate(np.ones((2, 2)), np.zeros((2, 2)), 10.0)
        with self.assertRaises(ContractError):
            evaluate(np.ones((2, 2)), np.full((2, 2), 20.0), 10.0)
        with self.assertRaises(ContractError):
            evaluate(np.array([[0.0, 1.0]]), np.array([[2.0, 2.0]]), 10.0)
        with self.assertRaises(ContractError):
            evaluate(np.ones((2, 2)), np.ones((2, 2)), 0.0)
        with self.assertRaises(DimensionError):
            evaluate(np.ones((2, 2)), np.ones((2, 3)), 10.0)


class PooledEvaluationTests(SimpleTestCase):
    def test_pooled_rmse_is_a_pixel_recomputation(self):
        pairs = [random_pair(seed, shape=(10 + seed, 12)) for seed in range(5)]
        pooled = evaluate_many(pairs, 10.0)
        squared, count = 0.0, 0
        for pred, gt in pairs:
            mask = (gt > 0) & (gt <= 10.0)
            squared += float(((pred[mask] - gt[mask]) ** 2).sum())
            count += int(mask.sum())
        self.assertEqual(pooled.valid_count, count)
        self.assertLess(abs(pooled.rmse - math.sqrt(squared / count)), 1e-12)

    def test_single_pair_matches_evaluate(self):
        pair = random_pair(9)
        self.assertEqual(evaluate_many([pair], 10.0), evaluate(*pair, 10.0))

    def test_empty(self):
        with self.assertRaises(ContractError):
            evaluate_many([], 10.0)


class ReportFormatTests(SimpleTestCase):
    def setUp(self):
        self.report = evaluate(*random_pair(2), 10.0)

    def test_json_fields_and_precision(self):
        payload = json.loads(report_to_json(self.report))
        self.assertEqual(list(payload), list(MetricsReport.field_names()))
        self.assertEqual(payload["rmse"], float(f"{self.report.rmse:.6g}"))
        self.assertEqual(payload["valid_count"], self.report.valid_count)

    def test_json_roundtrip_is_byte_identical(self):
        text = report_to_json(self.report)
        self.assertEqual(report_to_json(report_from_json(text)), text)

    def test_identity_report(self):
        gt = np.full((3, 3), 2.0)
        payload = json.loads(report_to_json(evaluate(gt, gt, 10.0)))
        self.assertEqual(payload["rmse"], 0.0)
        self.assertEqual(payload["delta1"], 100.0)

    def test_nested_reports(self):
        payload = json.loads(report_to_json({"scenes": [self.report], "aggregate": self.report}))
        self.assertEqual(payload["scenes"][0], payload["aggregate"])

    def test_csv(self):
        lines = report_to_csv(self.report).splitlines()
        self.assertEqual(lines[0], ",".join(MetricsReport.field_names()))
        self.assertEqual(len(lines), 2)
        labelled = reports_to_csv([("scene_0000", self.report), ("all", self.report)]).splitlines()
        self.assertEqual(labelled[0].split(",")[0], "scene")
        self.assertTrue(labelled[1].startswith("scene_0000,"))

    def test_invalid_report_payloads(self):
        payload = json.loads(report_to_json(self.report))
        for broken in (
            {**payload, "extra": 1},
            {**payload, "delta1": 101.0},
            {"rmse": 1.0},
            {**payload, "mae": payload["rmse"] * 2 + 1},
            {**payload, "imae": payload["irmse"] * 2 + 1},
        ):
            with self.subTest(broken=broken), self.assertRaises(ConfigError):
                report_from_json(json.dumps(broken))
