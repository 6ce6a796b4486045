#!/usr/bin/env python3

import csv
import math
import os.path as op
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.append(str(Path(__file__).resolve().parents[1]))

from uailab.aleatoric import (
    CALIBRATION_COLUMNS,
    LOGVAR_MIN,
    VARIANCE_FLOOR,
    AleatoricPrediction,
    ConvergenceError,
    ReplicatedLabelSuite,
    aleatoric_loss,
    aleatoric_terms,
    calibration_sweep,
    fit_replicated,
    is_monotone,
    optimal_loss,
    write_calibration_csv,
)
from uailab.nn import DimensionError, NonFiniteError, Tape


class TestLoss(unittest.TestCase):

    def test_values(self):
        self.assertAlmostEqual(aleatoric_loss(AleatoricPrediction([0.0], [0.0]), [1.0]), 0.5)
        u = math.log(4.0)
        self.assertAlmostEqual(
            aleatoric_loss(AleatoricPrediction([1.0], [u]), [3.0]), 0.5 + 0.5 * u
        )
        # sum over dimensions
        pred = AleatoricPrediction([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        self.assertAlmostEqual(aleatoric_loss(pred, [1.0, 1.0, 2.0]), 3.0)

    def test_minimum_over_log_variance(self):
        # for a fixed residual r the loss is minimized at u = log r^2
        r = 0.7
        us = np.linspace(-5, 5, 2001)
        losses = [aleatoric_loss(AleatoricPrediction([0.0], [u]), [r]) for u in us]
        self.assertAlmostEqual(us[int(np.argmin(losses))], math.log(r * r), places=2)

    def test_convex_in_value(self):
        for u in (-3.0, 0.0, 4.0):
            f = [aleatoric_loss(AleatoricPrediction([v], [u]), [0.2]) for v in (-0.1, 0.0, 0.1)]
            self.assertGreater(f[0] - 2 * f[1] + f[2], 0.0)

    def test_large_residual_with_high_variance(self):
        # a confident wrong prediction costs more than an uncertain one
        confident = aleatoric_loss(AleatoricPrediction([0.0], [-4.0]), [3.0])
        uncertain = aleatoric_loss(AleatoricPrediction([0.0], [2.0]), [3.0])
        self.assertGreater(confident, uncertain)

    def test_errors(self):
        with self.assertRaises(DimensionError):
            AleatoricPrediction([0.0, 1.0], [0.0])
        with self.assertRaises(DimensionError):
            aleatoric_loss(AleatoricPrediction([0.0], [0.0]), [1.0, 2.0])
        with self.assertRaises(NonFiniteError):
            aleatoric_loss(AleatoricPrediction([np.nan], [0.0]), [1.0])
        with self.assertRaises(NonFiniteError):
            aleatoric_loss(AleatoricPrediction([0.0], [0.0]), [np.inf])

    def test_terms_match_numpy(self):
        rng = np.random.default_rng(2)
        value, log_var, target = rng.standard_normal((3, 4, 3))
        tape = Tape()
        terms = aleatoric_terms(tape.constant(value), tape.constant(log_var), tape.constant(target))
        expected = 0.5 * np.exp(-log_var) * (target - value) ** 2 + 0.5 * log_var
        np.testing.assert_allclose(terms.data, expected, rtol=1e-12)
        row = AleatoricPrediction(value[1], log_var[1])
        self.assertAlmostEqual(aleatoric_loss(row, target[1]), float(terms.data[1].sum()), places=12)


class TestReplicatedLabels(unittest.TestCase):

    def test_suite(self):
        suite = ReplicatedLabelSuite(x=[1.0], labels=[1.0, 3.0])
        self.assertEqual(suite.n, 2)
        self.assertEqual(suite.true_mean, 2.0)
        # population variance
        self.assertEqual(suite.true_variance, 1.0)
        with self.assertRaises(ValueError):
            ReplicatedLabelSuite(x=[1.0], labels=[1.0])

    def test_optimal_loss(self):
        labels = np.array([-1.0, 1.0])
        self.assertAlmostEqual(optimal_loss(labels), 0.5)
        self.assertAlmostEqual(optimal_loss(np.zeros(4)), 0.5 * LOGVAR_MIN)

    def test_fit_recovers_variance(self):
        suite = ReplicatedLabelSuite.gaussian(0.25, 512, np.random.default_rng(5), mean=0.3)
        fit = fit_replicated(suite, epochs=3000, seed=1)
        self.assertLess(abs(fit.mean - suite.true_mean), 0.02)
        self.assertLess(abs(fit.variance - suite.true_variance) / suite.true_variance, 0.05)
        self.assertLessEqual(fit.final_loss, fit.optimal_loss + 0.1)

    def test_not_converged(self):
        suite = ReplicatedLabelSuite.gaussian(0.01, 64, np.random.default_rng(0))
        with self.assertRaises(ConvergenceError) as cm:
            fit_replicated(suite, epochs=1)
        self.assertGreater(cm.exception.final_loss, cm.exception.optimal_loss)

    def test_calibration_sweep(self):
        rows = calibration_sweep([0.01, 0.1, 1.0], n_labels=1024, epochs=3000, seed=3)
        self.assertEqual([r.true_variance for r in rows], [0.01, 0.1, 1.0])
        self.assertTrue(is_monotone(rows))
        for r in rows:
            self.assertLess(r.relative_error, 0.25)
            self.assertEqual(r.n_labels, 1024)

        with tempfile.TemporaryDirectory() as root:
            path = op.join(root, "calibration.csv")
            write_calibration_csv(rows, path)
            with open(path, newline="") as f:
                table = list(csv.reader(f))
        self.assertEqual(tuple(table[0]), CALIBRATION_COLUMNS)
        self.assertEqual(len(table), 4)
        self.assertEqual(float(table[2][0]), 0.1)

    def test_sweep_needs_three_levels(self):
        for levels in ([], [0.1], [0.01, 0.1]):
            with self.assertRaises(ValueError, msg=levels):
                calibration_sweep(levels, n_labels=16, epochs=1)

    def test_floor_constant(self):
        self.assertEqual(VARIANCE_FLOOR, math.exp(LOGVAR_MIN))


if __name__ == "__main__":
    unittest.main()
