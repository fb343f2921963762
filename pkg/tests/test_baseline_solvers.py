# -*- coding: utf-8 -*-
"""
离散时域基线测试：交叉关系、LASSO、峰值挑选
"""
import os
import sys
import unittest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np

import test_utils  # noqa: F401  设置项目路径
from mulan_echo.baseline_solvers import (
    NORMALIZATION_FIRST_TAP,
    NORMALIZATION_UNIT_NORM,
    DiscreteFilterPair,
    cr_solve,
    cross_relation_matrix,
    lasso_solve,
    peak_pick,
    peak_pick_pair,
)
from mulan_echo.errors import InvalidInputError
from mulan_echo.fri_annihilation import EchoSet
from mulan_echo.scenario_sim import render_ongrid, sample_smoothed_filter
from mulan_echo.spectral_core import RealSignal

FS = 16000.0


def sparse_pair(L=16):
    h1 = np.zeros(L)
    h2 = np.zeros(L)
    h1[[0, 5, 11]] = [1.0, 0.6, 0.3]
    h2[[2, 7, L - 1]] = [0.9, 0.4, 0.5]
    return h1, h2


def ongrid_pair(h1, h2, length=400, seed=0):
    rng = np.random.default_rng(seed)
    source = RealSignal(rng.standard_normal(length), FS)
    return render_ongrid(source, [h1, h2])


class TestCrossRelation(unittest.TestCase):
    def test_recovers_true_direction(self):
        h1, h2 = sparse_pair()
        x1, x2 = ongrid_pair(h1, h2)
        pair = cr_solve(x1, x2, 16)
        self.assertEqual(pair.normalization, NORMALIZATION_UNIT_NORM)
        self.assertEqual(pair.length, 16)
        truth = np.r_[h1, h2] / np.linalg.norm(np.r_[h1, h2])
        cosine = abs(np.dot(np.r_[pair.h1, pair.h2], truth))
        self.assertGreaterEqual(cosine, 1.0 - 1e-8)
        self.assertLess(pair.residual, 1e-16 * float(x1.samples @ x1.samples))

    def test_joint_unit_norm(self):
        rng = np.random.default_rng(6)
        x1 = RealSignal(rng.standard_normal(300), FS)
        x2 = RealSignal(rng.standard_normal(300), FS)
        pair = cr_solve(x1, x2, 12)
        self.assertAlmostEqual(np.linalg.norm(np.r_[pair.h1, pair.h2]), 1.0, places=12)

    def test_identical_channels(self):
        rng = np.random.default_rng(1)
        x = RealSignal(rng.standard_normal(200), FS)
        pair = cr_solve(x, x, 6)
        self.assertLess(pair.residual, 1e-20 * 200)
        np.testing.assert_allclose(pair.h1, pair.h2, atol=1e-8)

    def test_padded_truth_stays_in_null_space(self):
        h1, h2 = sparse_pair()
        x1, x2 = ongrid_pair(h1, h2)
        A = cross_relation_matrix(x1, x2, 20)
        padded = np.r_[h1, np.zeros(4), h2, np.zeros(4)]
        self.assertLess(np.linalg.norm(A @ padded), 1e-10)

    def test_input_validation(self):
        x = RealSignal(np.ones(10), FS)
        with self.assertRaises(InvalidInputError):
            cr_solve(x, x, 6)
        with self.assertRaises(InvalidInputError):
            cr_solve(x, RealSignal(np.ones(11), FS), 2)
        with self.assertRaises(InvalidInputError):
            cr_solve(x, RealSignal(np.ones(10), 8000.0), 2)
        with self.assertRaises(InvalidInputError):
            cr_solve(x, RealSignal(np.zeros(10), FS), 2)
        with self.assertRaises(InvalidInputError):
            DiscreteFilterPair([1.0, 2.0], [1.0], 0.0)


class TestLasso(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.x1 = RealSignal(rng.standard_normal(400), FS)
        self.x2 = RealSignal(rng.standard_normal(400), FS)

    def test_zero_penalty_matches_least_squares(self):
        L = 8
        pair = lasso_solve(self.x1, self.x2, L, lam=0.0)
        A = cross_relation_matrix(self.x1, self.x2, L)
        w, *_ = np.linalg.lstsq(A[:, 1:], -A[:, 0], rcond=None)
        best = float(np.sum((A[:, 0] + A[:, 1:] @ w) ** 2))
        self.assertEqual(pair.normalization, NORMALIZATION_FIRST_TAP)
        self.assertEqual(pair.h1[0], 1.0)
        self.assertLessEqual(abs(pair.residual - best), 1e-6 * best)

    def test_dominant_penalty(self):
        pair = lasso_solve(self.x1, self.x2, 8, lam=1e9)
        np.testing.assert_array_equal(pair.h1, np.r_[1.0, np.zeros(7)])
        np.testing.assert_array_equal(pair.h2, np.zeros(8))

    def test_short_sparse_pair_support(self):
        h1 = np.array([1.0, 0.0, 0.0, 0.5, 0.0, 0.0])
        h2 = np.array([0.0, 0.8, 0.0, 0.0, 0.0, 0.4])
        x1, x2 = ongrid_pair(h1, h2, seed=3)
        pair = lasso_solve(x1, x2, 6, lam=1e-3)
        self.assertGreater(pair.iterations, 0)
        picked1, picked2 = peak_pick_pair(pair, 2, FS)
        np.testing.assert_allclose(picked1.delays * FS, [0, 3], atol=1e-9)
        np.testing.assert_allclose(picked2.delays * FS, [1, 5], atol=1e-9)

    def test_objective_never_increases(self):
        pair = lasso_solve(self.x1, self.x2, 8, lam=0.5, iters=300)
        hist = pair.objective_history
        self.assertEqual(hist.size, pair.iterations + 1)
        self.assertTrue(np.all(np.diff(hist) <= 0.0), msg=str(hist))
        self.assertEqual(hist[-1], pair.residual)

    def test_negative_lambda(self):
        with self.assertRaises(InvalidInputError):
            lasso_solve(self.x1, self.x2, 8, lam=-1.0)


class TestPeakPick(unittest.TestCase):
    def test_example(self):
        e = peak_pick([0, 1, 0, 0.5, 0], 2, FS)
        np.testing.assert_allclose(e.delays, np.array([1, 3]) / FS)
        np.testing.assert_allclose(e.weights, [1.0, 0.5])

    def test_exactly_sparse(self):
        filt = np.zeros(50)
        filt[[4, 17, 30, 49]] = [0.2, -0.9, 0.5, 0.3]
        e = peak_pick(filt, 4, FS)
        np.testing.assert_allclose(e.delays * FS, [4, 17, 30, 49])
        np.testing.assert_allclose(e.weights, [0.2, 0.9, 0.5, 0.3])

    def test_fallback_when_few_local_maxima(self):
        e = peak_pick([3.0, 2.0, 1.0], 2, FS)
        np.testing.assert_allclose(e.delays * FS, [0, 1])
        np.testing.assert_allclose(e.weights, [3.0, 2.0])

    def test_offgrid_dirac_is_biased(self):
        tau = 5.3 / FS
        filt = sample_smoothed_filter(EchoSet([tau], [1.0]), FS, 20)
        e = peak_pick(filt, 1, FS)
        self.assertLess(abs(e.delays[0] - tau) * FS, 1.0)
        self.assertLess(e.weights[0], 0.99)

    def test_half_sample_dirac_peak_is_half_sample_off(self):
        tau = 5.5 / FS
        filt = sample_smoothed_filter(EchoSet([tau], [1.0]), FS, 20)
        self.assertAlmostEqual(np.max(np.abs(filt)), 2.0 / np.pi, delta=1e-12)
        e = peak_pick(filt, 1, FS)
        self.assertGreaterEqual(abs(e.delays[0] - tau) * FS, 0.5 - 1e-9)

    def test_invalid_k(self):
        with self.assertRaises(InvalidInputError):
            peak_pick([1.0, 2.0], 3, FS)
        with self.assertRaises(InvalidInputError):
            peak_pick([1.0, 2.0], 0, FS)


if __name__ == '__main__':
    unittest.main()
