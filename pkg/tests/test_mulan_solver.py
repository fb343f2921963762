# -*- coding: utf-8 -*-
"""
MULAN 盲求解器测试：代价函数、交替更新、归一化约定与完整求解
"""
import os
import sys
import unittest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np

from test_utils import (
    RUN_SLOW,
    TestTimer,
    echo_response,
    exact_measurements,
    naive_valid_convolution,
    analysis_grid,
    random_complex,
    random_source_spectrum,
)
from mulan_echo.errors import InvalidInputError, NumericalFailure
from mulan_echo.fri_annihilation import (
    AnnihilatingFilter,
    EchoSet,
    annihilate_nonblind,
    extract_echoes,
    roots_to_delays,
)
from mulan_echo.mulan_solver import (
    MulanConfig,
    build_q_matrix,
    mulan_cost,
    mulan_solve,
    normalize_solution,
    renormalize_filter,
    run_restart,
    unwrap_delays,
    update_filters,
    update_z,
    update_z_interior,
    whitened_initial_z,
)
from mulan_echo.spectral_core import FrequencyGrid, Spectrum
from mulan_echo.structured_linalg import convolve_linear_factors, toeplitz_full


def true_filter(echoes: EchoSet, grid: FrequencyGrid) -> AnnihilatingFilter:
    coeffs = convolve_linear_factors(np.exp(-2j * np.pi * grid.step * echoes.delays))
    return AnnihilatingFilter(coeffs / np.linalg.norm(coeffs))


def unit_inverse(s: Spectrum) -> Spectrum:
    z = 1.0 / s.values
    return Spectrum(z / np.linalg.norm(z), s.grid)


class ExactDataMixin:
    """两通道、每通道两个回声的无噪声频域数据"""

    def make_data(self, count=41, seed=0):
        grid = analysis_grid(count)
        truth = [EchoSet([1.0e-3, 4.2e-3], [1.0, 0.45]),
                 EchoSet([2.1e-3, 7.7e-3], [0.8, 0.3])]
        s = random_source_spectrum(grid, seed=seed)
        return grid, truth, s, exact_measurements(truth, s)


class TestCost(ExactDataMixin, unittest.TestCase):
    def test_zero_at_truth(self):
        grid, truth, s, x = self.make_data()
        filters = [true_filter(e, grid) for e in truth]
        self.assertLessEqual(mulan_cost(unit_inverse(s), filters, x), 1e-16)

    def test_zero_z(self):
        grid, truth, _, x = self.make_data()
        filters = [true_filter(e, grid) for e in truth]
        self.assertEqual(mulan_cost(Spectrum(np.zeros(grid.count), grid), filters, x), 0.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        grid = analysis_grid(23)
        x = [Spectrum(random_complex(rng, 23), grid) for _ in range(3)]
        z = Spectrum(random_complex(rng, 23), grid)
        filters = [AnnihilatingFilter(random_complex(rng, 4)) for _ in range(3)]
        expected = sum(
            float(np.sum(np.abs(naive_valid_convolution(f.coeffs, xm.values * z.values)) ** 2))
            for f, xm in zip(filters, x))
        self.assertAlmostEqual(mulan_cost(z, filters, x) / expected, 1.0, places=12)

    def test_mismatched_inputs(self):
        grid, truth, s, x = self.make_data()
        filters = [true_filter(e, grid) for e in truth]
        with self.assertRaises(InvalidInputError):
            mulan_cost(unit_inverse(s), filters[:1], x)
        other = Spectrum(np.ones(5), analysis_grid(5))
        with self.assertRaises(InvalidInputError):
            mulan_cost(unit_inverse(s), filters, [x[0], other])


class TestAlternatingUpdates(ExactDataMixin, unittest.TestCase):
    def test_filters_from_true_z(self):
        grid, truth, s, x = self.make_data()
        z = unit_inverse(s)
        for xm, fm in zip(x, update_filters(z, x, 2)):
            residual = np.linalg.norm(toeplitz_full((xm * z).values, 3) @ fm.coeffs)
            self.assertLessEqual(residual, 1e-10)

    def test_z_from_true_filters(self):
        grid, truth, s, x = self.make_data()
        filters = [true_filter(e, grid) for e in truth]
        z = update_z(filters, x)
        self.assertLessEqual(mulan_cost(z, filters, x), 1e-12)
        self.assertAlmostEqual(abs(np.vdot(unit_inverse(s).values, z.values)), 1.0, places=8)

    def test_first_difference_gives_constant_z(self):
        grid = analysis_grid(11)
        x = [Spectrum(np.ones(11), grid)]
        z = update_z([AnnihilatingFilter([1.0, -1.0])], x)
        np.testing.assert_allclose(np.abs(z.values), 1.0 / np.sqrt(11), atol=1e-10)

    def test_q_matrix_gram(self):
        rng = np.random.default_rng(2)
        grid = analysis_grid(15)
        x = [Spectrum(random_complex(rng, 15), grid) for _ in range(2)]
        filters = [AnnihilatingFilter(random_complex(rng, 3)) for _ in range(2)]
        Q = build_q_matrix(filters, x)
        self.assertEqual(Q.shape, (2 * (15 - 2), 15))
        z = Spectrum(random_complex(rng, 15), grid)
        self.assertAlmostEqual(np.linalg.norm(Q @ z.values) ** 2 / mulan_cost(z, filters, x),
                               1.0, places=12)
        # update_z 的解就是 Q 的最小右奇异向量
        z_new = update_z(filters, x)
        sigma_min = np.linalg.svd(Q, compute_uv=False)[-1]
        self.assertAlmostEqual(np.linalg.norm(Q @ z_new.values), sigma_min, places=10)

    def test_cost_history_is_monotone(self):
        grid, truth, s, x = self.make_data()
        scale = sum(xm.norm() ** 2 for xm in x)
        for edge_guard in (True, False):
            with self.subTest(edge_guard=edge_guard):
                config = MulanConfig(n_restarts=1, max_iter=40, conv_thresh=1e-12,
                                     edge_guard=edge_guard)
                run = run_restart(x, 2, config, np.random.SeedSequence(3), 0)
                seq = run["history"].reshape(-1)
                self.assertGreater(seq.size, 2)
                self.assertTrue(np.all(np.diff(seq) <= 1e-10 * scale), msg=str(seq))
                self.assertAlmostEqual(run["cost"], seq[-1])


class TestEdgeGuard(ExactDataMixin, unittest.TestCase):
    """两端频点只被 Toep_0 部分覆盖：尾系数为零的滤波器配合端点 z 精确湮灭"""

    @staticmethod
    def tail_filters(count):
        return [AnnihilatingFilter([1.0, 0.0, 0.0]) for _ in range(count)]

    def test_edge_supported_z_is_an_exact_zero(self):
        grid, truth, s, x = self.make_data()
        z = np.zeros(grid.count, dtype=np.complex128)
        z[:2] = [0.6, 0.8j]
        filters = self.tail_filters(2)
        self.assertEqual(mulan_cost(Spectrum(z, grid), filters, x), 0.0)
        # 全局单位范数下 z 更新直接落到这个零点
        z_plain = update_z(filters, x)
        self.assertLessEqual(mulan_cost(z_plain, filters, x), 1e-20)
        self.assertAlmostEqual(np.linalg.norm(z_plain.values[:2]), 1.0, places=10)

    def test_interior_normalization_excludes_edge_zero(self):
        grid, truth, s, x = self.make_data()
        filters = self.tail_filters(2)
        z = update_z_interior(filters, x)
        inner = slice(2, grid.count - 2)
        self.assertAlmostEqual(np.linalg.norm(z.values[inner]), 1.0, places=12)
        # 对角情形：最小代价就是内部频点上 Σ_m|x_m|² 的最小值
        weights = sum(np.abs(xm.values) ** 2 for xm in x)
        np.testing.assert_allclose(mulan_cost(z, filters, x), weights[inner].min(), rtol=1e-8)

    def test_interior_update_is_constrained_minimizer(self):
        rng = np.random.default_rng(4)
        grid = analysis_grid(15)
        x = [Spectrum(random_complex(rng, 15), grid) for _ in range(2)]
        filters = [AnnihilatingFilter(random_complex(rng, 3)) for _ in range(2)]
        z = update_z_interior(filters, x)
        outer = np.r_[0:2, 13:15]
        inner = np.arange(2, 13)
        self.assertAlmostEqual(np.linalg.norm(z.values[inner]), 1.0, places=12)
        # 两端自由：先投影掉 Q_E 的列空间，再取最小奇异值
        Q = build_q_matrix(filters, x)
        q_outer, q_inner = Q[:, outer], Q[:, inner]
        projected = q_inner - q_outer @ (np.linalg.pinv(q_outer) @ q_inner)
        sigma_min = np.linalg.svd(projected, compute_uv=False)[-1]
        self.assertAlmostEqual(np.linalg.norm(Q @ z.values) / sigma_min, 1.0, places=8)
        self.assertAlmostEqual(mulan_cost(z, filters, x) / sigma_min ** 2, 1.0, places=8)

    def test_true_filters_give_true_z(self):
        grid, truth, s, x = self.make_data()
        filters = [true_filter(e, grid) for e in truth]
        z = update_z_interior(filters, x)
        scale = sum(xm.norm() ** 2 for xm in x)
        self.assertLessEqual(mulan_cost(z, filters, x), 1e-12 * scale)
        unit = z.values / np.linalg.norm(z.values)
        self.assertAlmostEqual(abs(np.vdot(unit_inverse(s).values, unit)), 1.0, places=7)

    def test_invalid_edge(self):
        grid, truth, s, x = self.make_data()
        with self.assertRaises(InvalidInputError):
            update_z_interior(self.tail_filters(2), x, edge=grid.count // 2 + 1)

    def test_whitened_start_cancels_source(self):
        grid, truth, s, x = self.make_data(seed=0)
        _, _, _, x_other = self.make_data(seed=5)
        z = whitened_initial_z(x)
        z_other = whitened_initial_z(x_other)
        for xm, xo in zip(x, x_other):
            np.testing.assert_allclose(xm.values * z, xo.values * z_other, rtol=1e-10)

    def test_whitened_start_of_silent_channels(self):
        grid = analysis_grid(9)
        silent = [Spectrum(np.zeros(9), grid), Spectrum(np.zeros(9), grid)]
        np.testing.assert_array_equal(whitened_initial_z(silent), np.zeros(9))


class TestSolverInvariants(ExactDataMixin, unittest.TestCase):
    def test_unit_norms_after_updates(self):
        grid, truth, s, x = self.make_data()
        rng = np.random.default_rng(8)
        z = Spectrum(random_complex(rng, grid.count), grid)
        filters = update_filters(z, x, 2)
        for fm in filters:
            self.assertAlmostEqual(np.linalg.norm(fm.coeffs), 1.0, places=12)
        self.assertAlmostEqual(update_z(filters, x).norm(), 1.0, places=12)
        z_inner = update_z_interior(filters, x).values[2:-2]
        self.assertAlmostEqual(np.linalg.norm(z_inner), 1.0, places=12)

    def test_root_scaling_leaves_cost_unchanged(self):
        # 根乘以单位模 γ、z 逐点乘以 γ^n：每行残差只多出因子 γ^i
        rng = np.random.default_rng(9)
        K, count = 3, 30
        grid = analysis_grid(count)
        n = np.arange(count)
        for _ in range(20):
            x = [Spectrum(random_complex(rng, count), grid) for _ in range(2)]
            z = random_complex(rng, count)
            coeffs = [random_complex(rng, K + 1) for _ in range(2)]
            base = mulan_cost(Spectrum(z, grid), [AnnihilatingFilter(c) for c in coeffs], x)
            for phase in rng.uniform(-np.pi, np.pi, 5):
                gamma = np.exp(1j * phase)
                scaled = [AnnihilatingFilter(c * gamma ** (np.arange(K + 1) - K)) for c in coeffs]
                moved = AnnihilatingFilter(coeffs[0]).roots() * gamma
                for r in scaled[0].roots():
                    self.assertLess(np.min(np.abs(moved - r)), 1e-8)
                cost = mulan_cost(Spectrum(z * gamma ** n, grid), scaled, x)
                self.assertLess(abs(cost - base) / base, 1e-12)

    def test_zero_cost_certifies_resynthesis(self):
        grid, truth, s, x = self.make_data()
        z = unit_inverse(s)
        filters = update_filters(z, x, 2)
        scale = sum(xm.norm() ** 2 for xm in x)
        self.assertLessEqual(mulan_cost(z, filters, x), 1e-10 * scale)
        for xm, fm in zip(x, filters):
            h = (xm * z).values
            synth = echo_response(extract_echoes(xm * z, fm), grid)
            alpha = np.vdot(synth, h) / np.vdot(synth, synth)
            self.assertLessEqual(np.linalg.norm(h - alpha * synth) / np.linalg.norm(h), 1e-6)


class TestAmbiguities(unittest.TestCase):
    def test_root_modulus_does_not_change_delays(self):
        roots = np.exp(-2j * np.pi * np.array([0.1, 0.37]))
        np.testing.assert_allclose(roots_to_delays(1.3 * roots, 4.5),
                                   roots_to_delays(roots, 4.5), atol=1e-14)

    def test_geometric_scaling_of_spectrum(self):
        grid = analysis_grid(41)
        truth = EchoSet([0.8e-3, 5.1e-3], [0.7, 0.4])
        h = Spectrum(np.exp(-2j * np.pi * np.outer(grid.frequencies, truth.delays))
                     @ truth.weights, grid)
        scaled = h * Spectrum(1.01 ** np.arange(grid.count), grid)
        est = extract_echoes(scaled, annihilate_nonblind(scaled, 2))
        np.testing.assert_allclose(est.delays, truth.delays, atol=1e-9)

    def test_renormalize_filter(self):
        coeffs = convolve_linear_factors([2.0 * np.exp(0.4j), 0.5 * np.exp(-1.1j)])
        filt = renormalize_filter(AnnihilatingFilter(coeffs))
        roots = filt.roots()
        np.testing.assert_allclose(np.abs(roots), 1.0, atol=1e-12)
        self.assertAlmostEqual(np.linalg.norm(filt.coeffs), 1.0, places=12)
        angles = np.sort(np.angle(roots))
        np.testing.assert_allclose(angles, [-1.1, 0.4], atol=1e-12)


class TestNormalization(unittest.TestCase):
    def test_example(self):
        out = normalize_solution([EchoSet([2e-3, 5e-3], [0.5, 0.25])])
        np.testing.assert_allclose(out[0].delays, [0.0, 3e-3], atol=1e-15)
        np.testing.assert_allclose(out[0].weights, [1.0, 0.5])

    def test_idempotent(self):
        echoes = [EchoSet([0.0, 3e-3], [1.0, 0.5]), EchoSet([1e-3, 2e-3], [0.7, 0.2])]
        out = normalize_solution(echoes)
        for a, b in zip(out, echoes):
            np.testing.assert_allclose(a.delays, b.delays)
            np.testing.assert_allclose(a.weights, b.weights)

    def test_shift_and_scale_invariance(self):
        echoes = [EchoSet([1e-3, 4e-3], [0.6, 0.3]), EchoSet([2e-3, 2.5e-3], [0.9, 0.1])]
        moved = [EchoSet(e.delays + 3e-3, 2.0 * e.weights) for e in echoes]
        for a, b in zip(normalize_solution(echoes), normalize_solution(moved)):
            np.testing.assert_allclose(a.delays, b.delays, atol=1e-15)
            np.testing.assert_allclose(a.weights, b.weights)

    def test_empty_reference(self):
        with self.assertRaises(InvalidInputError):
            normalize_solution([])
        with self.assertRaises(InvalidInputError):
            normalize_solution([EchoSet([0.0], [0.0])])

    def test_negligible_reference_weight(self):
        # c_(1,1) 远小于其余权重：除法会把权重放大到无意义的量级
        tiny = [EchoSet([1e-3, 4e-3], [2e-6, 0.9]), EchoSet([2e-3], [0.7])]
        with self.assertRaises(NumericalFailure):
            normalize_solution(tiny)
        out = normalize_solution(tiny, rtol=1e-7)
        np.testing.assert_allclose(out[0].weights, [1.0, 4.5e5])
        # 阈值相对全部通道的最大权重
        with self.assertRaises(NumericalFailure):
            normalize_solution([EchoSet([0.0], [0.5]), EchoSet([1e-3], [600.0])])

    def test_unwrap_across_period_boundary(self):
        echoes = [EchoSet([0.01, 0.09], [1.0, 0.5]), EchoSet([0.095], [0.3])]
        out = unwrap_delays(echoes, 0.1)
        np.testing.assert_allclose(out[0].delays, [0.0, 0.02], atol=1e-12)
        np.testing.assert_allclose(out[0].weights, [0.5, 1.0])
        np.testing.assert_allclose(out[1].delays, [0.005], atol=1e-12)


class TestMulanSolve(unittest.TestCase):
    def _single_echo_data(self):
        grid = analysis_grid(41)
        truth = [EchoSet([1.0e-3], [0.8]), EchoSet([3.2e-3], [0.5])]
        s = random_source_spectrum(grid, seed=11)
        return truth, exact_measurements(truth, s)

    def test_single_echo_per_channel(self):
        truth, x = self._single_echo_data()
        config = MulanConfig(n_restarts=3, max_iter=500, conv_thresh=1e-8)
        result = mulan_solve(x, 1, config)
        self.assertEqual(len(result.echoes), 2)
        self.assertAlmostEqual(result.echoes[0].delays[0], 0.0, places=15)
        self.assertAlmostEqual(result.echoes[0].weights[0], 1.0, places=12)
        self.assertAlmostEqual(result.echoes[1].delays[0], 2.2e-3, delta=1e-6)
        self.assertAlmostEqual(result.echoes[1].weights[0], 0.625, delta=1e-4)
        # 三次随机重启 + 一次白化初值
        self.assertEqual(len(result.restart_costs), 4)
        self.assertEqual(result.final_cost, min(result.restart_costs))
        self.assertEqual(result.cost_history.shape[1], 2)
        self.assertEqual(mulan_cost(result.z_estimate, result.filters, x), result.final_cost)
        for fm in result.filters:
            self.assertAlmostEqual(np.linalg.norm(fm.coeffs), 1.0, places=12)

    def test_without_warm_start(self):
        truth, x = self._single_echo_data()
        config = MulanConfig(n_restarts=3, max_iter=500, conv_thresh=1e-8, warm_start=False)
        result = mulan_solve(x, 1, config)
        self.assertEqual(len(result.restart_costs), 3)
        self.assertAlmostEqual(result.echoes[1].delays[0], 2.2e-3, delta=1e-6)

    def test_two_echoes_small_grid(self):
        grid = analysis_grid(41)
        truth = [EchoSet([1.0e-3, 4.2e-3], [1.0, 0.45]), EchoSet([2.1e-3, 7.7e-3], [0.8, 0.3])]
        x = exact_measurements(truth, random_source_spectrum(grid, seed=3))
        result = mulan_solve(x, 2, MulanConfig(n_restarts=10, max_iter=1000, conv_thresh=1e-10))
        scale = sum(xm.norm() ** 2 for xm in x)
        self.assertLessEqual(result.final_cost, 1e-10 * scale)
        for est, ref in zip(result.echoes, normalize_solution(truth)):
            np.testing.assert_allclose(est.delays, ref.delays, atol=1e-7)
            np.testing.assert_allclose(est.weights, ref.weights, atol=1e-5)

    def test_seeded_determinism(self):
        _, x = self._single_echo_data()
        config = MulanConfig(n_restarts=2, max_iter=20, rng_seed=5)
        a = mulan_solve(x, 1, config)
        b = mulan_solve(x, 1, config)
        self.assertEqual(a.final_cost, b.final_cost)
        np.testing.assert_array_equal(a.z_estimate.values, b.z_estimate.values)

    def test_parallel_matches_serial(self):
        _, x = self._single_echo_data()
        config = MulanConfig(n_restarts=2, max_iter=20, rng_seed=7)
        serial = mulan_solve(x, 1, config, jobs=1)
        with TestTimer("mulan_solve jobs=2"):
            parallel = mulan_solve(x, 1, config, jobs=2)
        self.assertEqual(serial.best_restart, parallel.best_restart)
        np.testing.assert_allclose(serial.restart_costs, parallel.restart_costs, rtol=1e-12)
        np.testing.assert_allclose(serial.echoes[1].delays, parallel.echoes[1].delays,
                                   rtol=1e-12, atol=1e-15)

    def test_invalid_arguments(self):
        _, x = self._single_echo_data()
        with self.assertRaises(InvalidInputError):
            mulan_solve(x, 0)
        with self.assertRaises(InvalidInputError):
            mulan_solve(x, 21)
        with self.assertRaises(InvalidInputError):
            mulan_solve([], 1)
        with self.assertRaises(InvalidInputError):
            MulanConfig(conv_thresh=0.0)
        with self.assertRaises(InvalidInputError):
            MulanConfig(n_restarts=0)

    @unittest.skipUnless(RUN_SLOW, "设置 MULAN_RUN_SLOW=1 运行耗时测试")
    def test_two_echoes_two_channels_exact(self):
        grid = analysis_grid()
        rng = np.random.default_rng(12)
        truth = [EchoSet([0.0, 6.3e-3], [1.0, 0.4]),
                 EchoSet.from_unsorted(rng.uniform(0, 0.02, 2), rng.uniform(0.1, 1.0, 2))]
        x = exact_measurements(truth, random_source_spectrum(grid, seed=13))
        with TestTimer("MULAN M=2 K=2 F=401"):
            result = mulan_solve(x, 2, MulanConfig(n_restarts=20, conv_thresh=1e-9))
        self.assertLessEqual(result.final_cost, 1e-10)
        expected = normalize_solution(truth)
        for est, ref in zip(result.echoes, expected):
            np.testing.assert_allclose(est.delays, ref.delays, atol=1e-9)


if __name__ == '__main__':
    unittest.main()
