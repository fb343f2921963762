# -*- coding: utf-8 -*-
"""
评估与实验协议

- match_and_rmse：两侧先归一化，再逐通道用最优指派（平方时延误差）配对，计算位置/权重 RMSE
- success_rate：位置成功比例 + 成功试验上的平均权重 RMSE
- run_sweep：K/M/F 网格扫描，每格若干离栅场景，失败的试验按不成功计
- brute_force_oracle_k1：K=1 时的穷举参考解（独立于 MULAN 的校验手段）
- run_table1：栅格/离栅 × {MULAN, CR, LASSO} 对比表
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import optimize

from mulan_echo.baseline_solvers import cr_solve, lasso_solve, peak_pick_pair
from mulan_echo.config_manager import RunConfig, config_hash
from mulan_echo.errors import EchoRetrievalError, InvalidInputError
from mulan_echo.fri_annihilation import EchoSet, recover_echoes_nonblind
from mulan_echo.logger_manager import get_logger
from mulan_echo.mulan_solver import MulanConfig, mulan_solve, normalize_solution
from mulan_echo.performance_monitor import PerformanceTimer
from mulan_echo.scenario_io import append_trial_rows, read_trial_rows
from mulan_echo.scenario_sim import (
    EchoScenario,
    make_ongrid_scenario,
    make_random_offgrid_scenario,
    make_shoebox_scenario,
)
from mulan_echo.spectral_core import (
    RealSignal,
    Spectrum,
    generalized_dft,
    make_frequency_grid,
)
from workers.cpu_tasks import run_cpu_tasks

DEFAULT_LOCATION_THRESHOLD = 1.0
DEFAULT_WEIGHT_THRESHOLD = 1e-2
TABLE1_METHODS = ("mulan", "cr", "lasso")
# 对比表场景：两通道、每通道 7 个回声
TABLE1_CHANNELS = 2
TABLE1_ECHOES = 7


@dataclass
class EvalReport:
    """一次估计相对真值的误差"""
    location_rmse: float
    weight_rmse: float
    location_success: bool
    weight_success: bool
    # 每通道 (位置 RMSE, 权重 RMSE)
    per_channel_detail: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_channel_detail"] = [list(p) for p in self.per_channel_detail]
        return d


@dataclass
class SweepSpec:
    K_values: List[int]
    M_values: List[int]
    F_values: List[int]
    trials_per_cell: int = 100
    # 位置阈值单位为采样点
    location_threshold: float = DEFAULT_LOCATION_THRESHOLD
    weight_threshold: float = DEFAULT_WEIGHT_THRESHOLD

    def __post_init__(self):
        for name in ("K_values", "M_values", "F_values"):
            values = [int(v) for v in getattr(self, name)]
            if not values:
                raise InvalidInputError(f"{name} 不能为空")
            setattr(self, name, values)
        if int(self.trials_per_cell) < 1:
            raise InvalidInputError(f"trials_per_cell 必须 ≥ 1: {self.trials_per_cell}")

    def cells(self) -> List[Tuple[int, int, int]]:
        return [(K, M, F) for F in self.F_values for M in self.M_values for K in self.K_values]

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SweepSpec":
        sw = cfg.sweep
        return cls(list(sw.K_values), list(sw.M_values), list(sw.F_values),
                   sw.trials_per_cell, sw.location_threshold, sw.weight_threshold)


@dataclass
class SweepResult:
    """每格的位置/权重成功率（键为 (K, M, F)）"""
    location_rates: Dict[Tuple[int, int, int], float]
    weight_rates: Dict[Tuple[int, int, int], float]
    rows: List[dict] = field(default_factory=list)
    config_hash: str = ""

    def summary(self) -> dict:
        cells = sorted(self.location_rates)
        return {
            "cells": [
                {"K": K, "M": M, "F": F,
                 "location_rate": self.location_rates[(K, M, F)],
                 "weight_rate": self.weight_rates[(K, M, F)]}
                for K, M, F in cells
            ],
            "trials": len(self.rows),
            "config_hash": self.config_hash,
        }


def match_and_rmse(estimated: Sequence[EchoSet], truth: Sequence[EchoSet], sample_rate: float,
                   location_threshold: float = DEFAULT_LOCATION_THRESHOLD,
                   weight_threshold: float = DEFAULT_WEIGHT_THRESHOLD) -> EvalReport:
    """归一化后逐通道最优指派，RMSE 在全部 M·K 对上计算

    位置成功：RMSE < location_threshold/Fs（严格小于）。
    """
    if len(estimated) != len(truth):
        raise InvalidInputError(f"通道数不一致: 估计 {len(estimated)}, 真值 {len(truth)}")
    for m, (e, t) in enumerate(zip(estimated, truth)):
        if e.n_echoes != t.n_echoes:
            raise InvalidInputError(f"通道 {m} 回声数不一致: 估计 {e.n_echoes}, 真值 {t.n_echoes}")
    est = normalize_solution(estimated)
    ref = normalize_solution(truth)

    loc_sq, wgt_sq, detail = [], [], []
    for e, t in zip(est, ref):
        cost = (e.delays[:, None] - t.delays[None, :]) ** 2
        rows, cols = optimize.linear_sum_assignment(cost)
        d_err = e.delays[rows] - t.delays[cols]
        w_err = e.weights[rows] - t.weights[cols]
        loc_sq.append(d_err ** 2)
        wgt_sq.append(w_err ** 2)
        detail.append((float(np.sqrt(np.mean(d_err ** 2))), float(np.sqrt(np.mean(w_err ** 2)))))

    location_rmse = float(np.sqrt(np.mean(np.concatenate(loc_sq))))
    weight_rmse = float(np.sqrt(np.mean(np.concatenate(wgt_sq))))
    return EvalReport(
        location_rmse=location_rmse,
        weight_rmse=weight_rmse,
        location_success=bool(location_rmse < location_threshold / float(sample_rate)),
        weight_success=bool(weight_rmse < weight_threshold),
        per_channel_detail=detail,
    )


def failed_report() -> EvalReport:
    """求解失败的试验：按不成功计"""
    return EvalReport(math.nan, math.nan, False, False, [])


def success_rate(reports: Sequence[EvalReport]) -> Tuple[float, Optional[float]]:
    """(位置成功比例, 位置成功试验上的平均权重 RMSE；无成功时为 None)"""
    if not reports:
        raise InvalidInputError("报告列表为空")
    good = [r for r in reports if r.location_success]
    rate = len(good) / len(reports)
    if not good:
        return rate, None
    return rate, float(np.mean([r.weight_rmse for r in good]))


def weight_success_rate(reports: Sequence[EvalReport]) -> float:
    if not reports:
        raise InvalidInputError("报告列表为空")
    return sum(1 for r in reports if r.weight_success) / len(reports)


def measurement_spectra(measurements: Sequence[RealSignal], f_min: float, f_max: float,
                        F: int) -> List[Spectrum]:
    grid = make_frequency_grid(f_min, f_max, F)
    return [generalized_dft(x, grid) for x in measurements]


@dataclass
class MethodOutcome:
    """一种方法在一个场景上的输出"""
    method: str
    echoes: List[EchoSet]
    cost: float
    iterations: int
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)


def run_method(method: str, measurements: Sequence[RealSignal], K: int, cfg: RunConfig,
               L: Optional[int] = None, source: Optional[RealSignal] = None,
               jobs: int = 1) -> MethodOutcome:
    """按名称调度求解器；基线需要 L，fri 需要源信号"""
    an, so = cfg.analysis, cfg.solver
    with PerformanceTimer(f"求解({method})") as timer:
        if method == "mulan":
            spectra = measurement_spectra(measurements, an.f_min, an.f_max, an.F)
            res = mulan_solve(spectra, K, so.mulan_config(), jobs=jobs)
            outcome = MethodOutcome(method, res.echoes, res.final_cost, res.iterations,
                                    extra={"best_restart": res.best_restart})
        elif method in ("cr", "lasso"):
            if not L:
                raise InvalidInputError(f"方法 {method} 需要滤波器长度 L")
            if len(measurements) != 2:
                raise InvalidInputError(f"方法 {method} 只支持两个通道，当前 {len(measurements)}")
            x1, x2 = measurements
            if method == "cr":
                pair = cr_solve(x1, x2, L)
            else:
                pair = lasso_solve(x1, x2, L, lam=so.lam, iters=so.lasso_iters)
            echoes = list(peak_pick_pair(pair, K, x1.sample_rate))
            outcome = MethodOutcome(method, normalize_solution(echoes), pair.residual,
                                    pair.iterations, extra={"L": int(L)})
        elif method == "fri":
            if source is None:
                raise InvalidInputError("方法 fri 需要源信号文件")
            spectra = measurement_spectra(measurements, an.f_min, an.f_max, an.F)
            s = generalized_dft(source, spectra[0].grid)
            echoes = [recover_echoes_nonblind(xm, s, K) for xm in spectra]
            outcome = MethodOutcome(method, echoes, 0.0, 0)
        else:
            raise InvalidInputError(f"未知方法: {method}")
    outcome.wall_time_s = timer.elapsed
    return outcome


def trial_seed(base_seed: int, *key: int) -> int:
    """由基础种子与格子坐标派生确定的试验种子"""
    seq = np.random.SeedSequence([int(base_seed)] + [int(k) for k in key])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _cell_name(K: int, M: int, F: int) -> str:
    return f"K{K}_M{M}_F{F}"


def _empty_row(cell: str, trial: int, seed: int, K, M, F, solver: str, chash: str) -> dict:
    """未成功评估的试验行：各项误差为 NaN，按不成功计"""
    return {"cell": cell, "trial": trial, "seed": seed, "K": K, "M": M, "F": F,
            "solver": solver, "config_hash": chash,
            "location_rmse": math.nan, "weight_rmse": math.nan,
            "location_success": False, "weight_success": False,
            "cost": math.nan, "iterations": 0, "wall_time_s": 0.0, "error": ""}


def sweep_config_hash(spec: SweepSpec, solver_config: MulanConfig, cfg: RunConfig) -> str:
    """扫描行的配置哈希：场景配置 + 实际求解配置 + 成功阈值（试验数不参与）"""
    return config_hash(cfg, {"mulan": asdict(solver_config),
                             "location_threshold": float(spec.location_threshold),
                             "weight_threshold": float(spec.weight_threshold)})


def run_sweep_trial(K: int, M: int, F: int, trial: int, seed: int,
                    solver_config: MulanConfig, cfg: RunConfig,
                    location_threshold: float, weight_threshold: float,
                    chash: str = "") -> dict:
    """单个扫描试验：生成离栅场景、运行 MULAN、评估（在工作进程中运行）"""
    sc = cfg.scenario
    row = _empty_row(_cell_name(K, M, F), trial, seed, K, M, F, "mulan", chash)
    try:
        scenario = make_random_offgrid_scenario(M, K, sc.N, sc.Fs, seed, sc.max_delay_s,
                                                tuple(sc.source_band))
        spectra = measurement_spectra(scenario.measurements, cfg.analysis.f_min,
                                      cfg.analysis.f_max, F)
        with PerformanceTimer(f"扫描试验 {row['cell']}#{trial}") as timer:
            res = mulan_solve(spectra, K, replace(solver_config, rng_seed=seed))
        report = match_and_rmse(res.echoes, scenario.echoes, sc.Fs,
                                location_threshold, weight_threshold)
        row.update(location_rmse=report.location_rmse, weight_rmse=report.weight_rmse,
                   location_success=report.location_success,
                   weight_success=report.weight_success,
                   cost=res.final_cost, iterations=res.iterations,
                   wall_time_s=timer.elapsed)
    except EchoRetrievalError as e:
        get_logger().warning(f"扫描试验失败 (seed={seed}): {e}")
        row["error"] = str(e)
    return row


def _rates_from_rows(rows: Sequence[dict]) -> Tuple[float, float]:
    n = len(rows)
    loc = sum(1 for r in rows if r["location_success"]) / n
    wgt = sum(1 for r in rows if r["weight_success"]) / n
    return loc, wgt


def run_sweep(spec: SweepSpec, solver_config: MulanConfig, cfg: Optional[RunConfig] = None,
              csv_path: Optional[str] = None, jobs: int = 1) -> SweepResult:
    """K/M/F 扫描；csv_path 已存在时跳过已完成的 (格子, 试验)

    每格写完即追加到 CSV，中断后重新运行可续跑。
    只复用配置哈希相同的行，换了场景、求解或阈值设置的旧行不参与统计。
    """
    logger = get_logger()
    cfg = cfg or RunConfig()
    base_seed = int(cfg.scenario.seed)
    chash = sweep_config_hash(spec, solver_config, cfg)
    existing = read_trial_rows(csv_path) if csv_path else []
    done = {(r["cell"], int(r["trial"])): r for r in existing if r["config_hash"] == chash}
    stale = len(existing) - sum(1 for r in existing if r["config_hash"] == chash)
    if stale:
        logger.warning(f"{csv_path} 中有 {stale} 行配置哈希不同，续跑时忽略")

    location_rates, weight_rates, all_rows = {}, {}, []
    for K, M, F in spec.cells():
        cell = _cell_name(K, M, F)
        pending, cell_rows = [], []
        for t in range(spec.trials_per_cell):
            if (cell, t) in done:
                cell_rows.append(done[(cell, t)])
            else:
                pending.append((K, M, F, t, trial_seed(base_seed, K, M, F, t), solver_config,
                                cfg, spec.location_threshold, spec.weight_threshold, chash))
        if pending:
            outcomes = run_cpu_tasks(run_sweep_trial, pending, jobs=jobs, task_prefix=cell)
            new_rows = []
            for args, outcome in zip(pending, outcomes):
                if outcome.success:
                    new_rows.append(outcome.result)
                else:
                    row = _empty_row(cell, args[3], args[4], K, M, F, "mulan", chash)
                    row.update(wall_time_s=outcome.execution_time, error=outcome.error_message)
                    new_rows.append(row)
            if csv_path:
                append_trial_rows(csv_path, new_rows)
            cell_rows.extend(new_rows)
        else:
            logger.info(f"格子 {cell} 已完成，跳过")
        cell_rows.sort(key=lambda r: int(r["trial"]))
        loc, wgt = _rates_from_rows(cell_rows)
        location_rates[(K, M, F)] = loc
        weight_rates[(K, M, F)] = wgt
        all_rows.extend(cell_rows)
        logger.info(f"格子 {cell}: 位置成功率 {loc:.2f}, 权重成功率 {wgt:.2f}")
    return SweepResult(location_rates, weight_rates, all_rows, config_hash=chash)


def brute_force_oracle_k1(x: Sequence[Spectrum], grid_resolution: float,
                          K: int = 1) -> List[EchoSet]:
    """K=1 的穷举参考解

    以通道1为参考（τ=0, c=1），对每个其余通道在 [-P/2, P/2)（P=1/Δf）上
    网格搜索时延差 δ，最大化 |Σ conj(x_1)·x_m·e^{2πifδ}|（即 ‖x_m - c·e^{-2πifδ}·x_1‖
    在全局相位自由时的最小化），再在相邻网格内做有界标量优化细化。
    与求解器一致，时延只在模 P 意义下确定，权重相位被丢弃。
    """
    if int(K) != 1:
        raise InvalidInputError(f"穷举参考解只支持 K=1，当前 K={K}")
    if len(x) < 1:
        raise InvalidInputError("至少需要一个通道")
    if not grid_resolution > 0:
        raise InvalidInputError(f"grid_resolution 必须为正: {grid_resolution}")
    grid = x[0].grid
    freqs = grid.frequencies
    period = 1.0 / grid.step
    x1 = x[0].values
    energy = float(np.vdot(x1, x1).real)
    if energy == 0:
        raise InvalidInputError("参考通道频谱全为零")

    n_fft = sp_fft.next_fast_len(max(grid.count, int(math.ceil(period / grid_resolution))))
    shifts = np.arange(n_fft) * (period / n_fft)

    result = [EchoSet([0.0], [1.0])]
    for xm in x[1:]:
        cross = np.conj(x1) * xm.values

        def score(delta: float) -> float:
            return float(np.abs(np.sum(cross * np.exp(2j * np.pi * freqs * delta))))

        # |Σ_i w_i·e^{2πi·i·Δf·δ_k}|，δ_k = k·P/n_fft，用零填充 IFFT 一次算完
        coarse = np.abs(sp_fft.ifft(cross, n_fft)) * n_fft
        best = float(shifts[int(np.argmax(coarse))])
        step = period / n_fft
        refined = optimize.minimize_scalar(lambda d: -score(d), bounds=(best - step, best + step),
                                           method="bounded", options={"xatol": 1e-13})
        delta = float(refined.x) if -refined.fun >= score(best) else best
        delta = (delta + 0.5 * period) % period - 0.5 * period
        weight = score(delta) / energy
        result.append(EchoSet([delta], [weight]))
    return result


def _table1_scenario(grid_type: str, seed: int, cfg: RunConfig) -> EchoScenario:
    sc = cfg.scenario
    if grid_type == "on-grid":
        return make_ongrid_scenario(TABLE1_CHANNELS, TABLE1_ECHOES, sc.N, sc.Fs, seed,
                                    max_length=int(round(sc.max_delay_s * sc.Fs)),
                                    band=tuple(sc.source_band))
    return make_shoebox_scenario(TABLE1_CHANNELS, sc.N, sc.Fs, seed, sc.absorption,
                                 tuple(sc.source_band), sc.sound_speed)


def run_table1_trial(grid_type: str, trial: int, seed: int, cfg: RunConfig,
                     methods: Sequence[str] = TABLE1_METHODS) -> List[dict]:
    """一个场景上依次运行各方法并评估；基线使用真实滤波器长度"""
    rows = []
    chash = config_hash(cfg)
    scenario = _table1_scenario(grid_type, seed, cfg)
    L = scenario.true_filter_length
    for method in methods:
        row = _empty_row(grid_type, trial, seed, scenario.n_echoes, scenario.n_channels,
                         cfg.analysis.F, method, chash)
        try:
            run_cfg = replace(cfg, solver=replace(cfg.solver, rng_seed=seed))
            outcome = run_method(method, scenario.measurements, scenario.n_echoes, run_cfg, L=L)
            report = match_and_rmse(outcome.echoes, scenario.echoes, scenario.sample_rate,
                                    cfg.sweep.location_threshold, cfg.sweep.weight_threshold)
            row.update(location_rmse=report.location_rmse, weight_rmse=report.weight_rmse,
                       location_success=report.location_success,
                       weight_success=report.weight_success, cost=outcome.cost,
                       iterations=outcome.iterations, wall_time_s=outcome.wall_time_s)
        except EchoRetrievalError as e:
            get_logger().warning(f"{grid_type} 试验 {trial} 方法 {method} 失败: {e}")
            row["error"] = str(e)
        rows.append(row)
    return rows


def _row_report(row: dict) -> EvalReport:
    return EvalReport(float(row["location_rmse"]), float(row["weight_rmse"]),
                      bool(row["location_success"]), bool(row["weight_success"]))


def run_table1(n_trials: int, cfg: Optional[RunConfig] = None, jobs: int = 1,
               methods: Sequence[str] = TABLE1_METHODS,
               csv_path: Optional[str] = None) -> dict:
    """栅格/离栅各 n_trials 个场景，汇总每种方法的位置成功率与成功试验的权重 RMSE"""
    cfg = cfg or RunConfig()
    base_seed = int(cfg.scenario.seed)
    table: Dict[str, Dict[str, dict]] = {}
    all_rows = []
    for g, grid_type in enumerate(("on-grid", "off-grid")):
        tasks = [(grid_type, t, trial_seed(base_seed, g, t), cfg, tuple(methods))
                 for t in range(int(n_trials))]
        outcomes = run_cpu_tasks(run_table1_trial, tasks, jobs=jobs, task_prefix=grid_type)
        rows = []
        for (_, t, seed, _, _), outcome in zip(tasks, outcomes):
            if outcome.success:
                rows.extend(outcome.result)
                continue
            for method in methods:
                row = _empty_row(grid_type, t, seed, TABLE1_ECHOES, TABLE1_CHANNELS,
                                 cfg.analysis.F, method, config_hash(cfg))
                row.update(wall_time_s=outcome.execution_time, error=outcome.error_message)
                rows.append(row)
        table[grid_type] = {}
        for method in methods:
            reports = [_row_report(r) for r in rows if r["solver"] == method]
            rate, wrmse = success_rate(reports)
            table[grid_type][method] = {"location_rate": rate, "weight_rmse": wrmse,
                                        "trials": len(reports)}
            get_logger().info(f"{grid_type} {method}: 成功率 {rate:.0%}, 权重RMSE "
                              f"{'-' if wrmse is None else f'{wrmse:.2e}'}")
        all_rows.extend(rows)
    if csv_path:
        append_trial_rows(csv_path, all_rows)
    return {"table": table, "rows": all_rows}
