# -*- coding: utf-8 -*-
"""
MULAN 盲多通道湮灭求解器

代价函数 C(z, a) = Σ_m ‖Toep(x_m ⊙ z)·a_m‖²，约束 ‖a_m‖ = 1，z 的尺度另行固定。
交替最小化：
1) 固定 z，逐通道求最小奇异向量得到 a_m；
2) 固定 a，求 Q = [Toep_0(a_1)Diag(x_1); ...] 的最小奇异向量得到 z；
直到代价相对下降低于 conv_thresh 或达到 max_iter。
多次随机初始化（可另加一次跨通道白化初值），保留最终代价最小的一次，
再逐通道求根提取回声。

边缘约束（edge_guard）：Toep_0 的前 K 列与后 K 列只被部分行覆盖，
z 的能量集中在网格两端时，滤波器首/尾系数趋零即可使代价精确为零，
这类退化解与真解在特征值求解的精度下无法区分。开启后 z 只在内部
频点 [K, F-K) 上归一化，两端频点自由取最优值，退化解不再是零代价。

随机重启互相独立，通过 workers.cpu_tasks 并行；
每次重启的种子由 rng_seed 派生，串行与并行结果一致。
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from mulan_echo.errors import InvalidInputError, NumericalFailure
from mulan_echo.fri_annihilation import (
    AnnihilatingFilter,
    EchoSet,
    annihilate_nonblind,
    extract_echoes,
)
from mulan_echo.logger_manager import get_logger
from mulan_echo.spectral_core import Spectrum
from mulan_echo.structured_linalg import (
    convolve_linear_factors,
    min_eigenvector_hermitian,
    toeplitz_full,
    toeplitz_zero,
)
from workers.cpu_tasks import run_cpu_tasks

# 相对收敛判据的分母下限
_COST_FLOOR = 1e-300

# 参考权重 c_{1,1} 相对全部权重最大值的下限
REFERENCE_WEIGHT_RTOL = 1e-3


@dataclass(frozen=True)
class MulanConfig:
    """MULAN 求解参数

    edge_guard: z 只在内部频点上归一化（见模块说明）
    warm_start: 在随机重启之外追加一次 z = Σ x̄_m / Σ|x_m|² 的确定性初值
    """
    n_restarts: int = 20
    max_iter: int = 1000
    conv_thresh: float = 1e-3
    rng_seed: int = 0
    renormalize_root_modulus: bool = False
    edge_guard: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if int(self.n_restarts) < 1:
            raise InvalidInputError(f"n_restarts 必须 ≥ 1: {self.n_restarts}")
        if int(self.max_iter) < 1:
            raise InvalidInputError(f"max_iter 必须 ≥ 1: {self.max_iter}")
        if not 0 < float(self.conv_thresh) < 1:
            raise InvalidInputError(f"conv_thresh 必须位于 (0, 1): {self.conv_thresh}")


@dataclass(eq=False)
class SolveResult:
    """求解结果（回声已按 τ_{1,1}=0, c_{1,1}=1 归一化）

    final_cost == mulan_cost(z_estimate, filters, x)；edge_guard 开启时
    z_estimate 的内部频点为单位范数，否则整体为单位范数。
    """
    echoes: List[EchoSet]
    z_estimate: Spectrum
    final_cost: float
    iterations: int
    best_restart: int
    filters: List[AnnihilatingFilter] = field(default_factory=list)
    # 每次迭代的 (a 更新后代价, z 更新后代价)
    cost_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    # 按重启编号排列；warm_start 的一次排在最后
    restart_costs: List[float] = field(default_factory=list)


def _check_channels(x: Sequence[Spectrum]) -> None:
    if len(x) < 1:
        raise InvalidInputError("至少需要一个通道")
    grid = x[0].grid
    for m, xm in enumerate(x):
        if xm.grid != grid:
            raise InvalidInputError(f"通道 {m} 的频率网格与通道 0 不一致")


def _check_filters(filters: Sequence[AnnihilatingFilter], x: Sequence[Spectrum]) -> None:
    _check_channels(x)
    if len(filters) != len(x):
        raise InvalidInputError(f"滤波器数 {len(filters)} 与通道数 {len(x)} 不一致")


def mulan_cost(z: Spectrum, filters: Sequence[AnnihilatingFilter],
               x: Sequence[Spectrum]) -> float:
    """C(z, a) = Σ_m ‖Toep(x_m ⊙ z)·a_m‖²"""
    _check_filters(filters, x)
    if z.grid != x[0].grid:
        raise InvalidInputError("z 的网格与测量不一致")
    lengths = {f.coeffs.size for f in filters}
    if len(lengths) != 1:
        raise InvalidInputError(f"滤波器长度不一致: {sorted(lengths)}")
    L = lengths.pop()
    total = 0.0
    for xm, fm in zip(x, filters):
        residual = toeplitz_full(xm.values * z.values, L) @ fm.coeffs
        total += float(np.vdot(residual, residual).real)
    return total


def update_filters(z: Spectrum, x: Sequence[Spectrum], K: int) -> List[AnnihilatingFilter]:
    """固定 z，逐通道求 Toep(x_m ⊙ z) 的最小右奇异向量"""
    _check_channels(x)
    return [annihilate_nonblind(xm * z, K) for xm in x]


def build_q_matrix(filters: Sequence[AnnihilatingFilter], x: Sequence[Spectrum]) -> np.ndarray:
    """Q = [Toep_0(a_1)Diag(x_1); ...; Toep_0(a_M)Diag(x_M)] ∈ C^{M(F-K)×F}"""
    _check_filters(filters, x)
    F = x[0].grid.count
    blocks = [toeplitz_zero(fm.coeffs, F) * xm.values[None, :] for fm, xm in zip(filters, x)]
    return np.vstack(blocks)


def _banded_gram(coeffs: np.ndarray, width: int) -> np.ndarray:
    """Toep_0(a)ᴴ·Toep_0(a)，带宽 K 的 F×F Hermitian 矩阵"""
    L = coeffs.size
    gram = np.zeros((width, width), dtype=np.complex128)
    rows_base = np.arange(width - L + 1) + (L - 1)
    for p in range(L):
        rows = rows_base - p
        for q in range(L):
            gram[rows, rows_base - q] += np.conj(coeffs[p]) * coeffs[q]
    return gram


def _q_gram(filters: Sequence[AnnihilatingFilter], x: Sequence[Spectrum]) -> np.ndarray:
    """QᴴQ = Σ_m Diag(x̄_m)·Toep_0(a_m)ᴴToep_0(a_m)·Diag(x_m)

    逐通道累加带状 Gram 矩阵，避免显式构造 M(F-K)×F 的 Q。
    """
    _check_filters(filters, x)
    F = x[0].grid.count
    gram = np.zeros((F, F), dtype=np.complex128)
    for fm, xm in zip(filters, x):
        if fm.coeffs.size > F:
            raise InvalidInputError(f"滤波器长度 {fm.coeffs.size} 超过频点数 {F}")
        gram += np.conj(xm.values)[:, None] * _banded_gram(fm.coeffs, F) * xm.values[None, :]
    return gram


def update_z(filters: Sequence[AnnihilatingFilter], x: Sequence[Spectrum]) -> Spectrum:
    """固定 a，求 ‖Q·z‖ 的单位范数最小化解"""
    gram = _q_gram(filters, x)
    return Spectrum(min_eigenvector_hermitian(gram), x[0].grid)


def update_z_interior(filters: Sequence[AnnihilatingFilter], x: Sequence[Spectrum],
                      edge: Optional[int] = None) -> Spectrum:
    """固定 a，在 ‖z[edge:F-edge]‖ = 1 下最小化 ‖Q·z‖

    两端 edge 个频点不受约束：对给定内部 z_I，最优 z_E = -G_EE⁺·G_EI·z_I，
    代入后内部由 Schur 补 G_II - G_IE·G_EE⁺·G_EI 的最小特征向量给出。
    edge 默认取滤波器阶数 K。
    """
    gram = _q_gram(filters, x)
    F = gram.shape[0]
    edge = filters[0].coeffs.size - 1 if edge is None else int(edge)
    if edge < 0 or 2 * edge >= F:
        raise InvalidInputError(f"edge={edge} 与频点数 {F} 不兼容")
    if edge == 0:
        return Spectrum(min_eigenvector_hermitian(gram), x[0].grid)

    outer = np.r_[0:edge, F - edge:F]
    inner = np.arange(edge, F - edge)
    g_oo = gram[np.ix_(outer, outer)]
    g_oi = gram[np.ix_(outer, inner)]
    coupling, *_ = linalg.lstsq(g_oo, g_oi)
    schur = gram[np.ix_(inner, inner)] - g_oi.conj().T @ coupling
    schur = 0.5 * (schur + schur.conj().T)
    z_inner = min_eigenvector_hermitian(schur)

    z = np.empty(F, dtype=np.complex128)
    z[inner] = z_inner
    z[outer] = -coupling @ z_inner
    return Spectrum(z, x[0].grid)


def renormalize_filter(filt: AnnihilatingFilter) -> AnnihilatingFilter:
    """把滤波器的根投影到单位圆后重建（单位范数）"""
    roots = filt.roots()
    mags = np.abs(roots)
    if np.any(mags == 0):
        return filt
    coeffs = convolve_linear_factors(roots / mags)
    return AnnihilatingFilter(coeffs / np.linalg.norm(coeffs))


def _scale_z(values: np.ndarray, edge: int) -> np.ndarray:
    """按内部频点（edge=0 时为全部频点）归一化"""
    inner = values[edge:values.size - edge] if edge else values
    norm = float(np.linalg.norm(inner))
    if norm == 0:
        norm = float(np.linalg.norm(values))
    return values / norm


def _random_unit_z(rng: np.random.Generator, count: int) -> np.ndarray:
    # 圆对称复高斯：实部虚部各 N(0, 1/2)
    z = (rng.standard_normal(count) + 1j * rng.standard_normal(count)) * np.sqrt(0.5)
    return z / np.linalg.norm(z)


def whitened_initial_z(x: Sequence[Spectrum]) -> np.ndarray:
    """z₀ = Σ_m x̄_m / Σ_m |x_m|²

    x_m = h_m·s 时 z₀ = (1/s)·Σ h̄_m / Σ|h_m|²，源频谱完全抵消。
    所有通道都为零的频点取 0。
    """
    _check_channels(x)
    numer = np.sum([np.conj(xm.values) for xm in x], axis=0)
    energy = np.sum([np.abs(xm.values) ** 2 for xm in x], axis=0)
    z = np.zeros(energy.size, dtype=np.complex128)
    np.divide(numer, energy, out=z, where=energy > 0)
    return z


def run_restart(x: Sequence[Spectrum], K: int, config: MulanConfig,
                seed: np.random.SeedSequence, restart_index: int,
                warm: bool = False) -> dict:
    """单次初始化的交替最小化（可在子进程中运行）"""
    logger = get_logger()
    grid = x[0].grid
    edge = int(K) if config.edge_guard else 0
    init = whitened_initial_z(x) if warm else None
    if init is None or not np.any(init):
        init = _random_unit_z(np.random.default_rng(seed), grid.count)
    z = Spectrum(_scale_z(init, edge), grid)

    history: List[Tuple[float, float]] = []
    filters: List[AnnihilatingFilter] = []
    cost = np.inf
    prev_cost: Optional[float] = None
    iterations = 0
    for iterations in range(1, int(config.max_iter) + 1):
        filters = update_filters(z, x, K)
        if config.renormalize_root_modulus:
            filters = [renormalize_filter(f) for f in filters]
        half_cost = mulan_cost(z, filters, x)
        z = update_z_interior(filters, x, edge) if edge else update_z(filters, x)
        cost = mulan_cost(z, filters, x)
        history.append((half_cost, cost))
        if not np.isfinite(cost):
            logger.warning(f"重启 {restart_index} 在第 {iterations} 次迭代发散")
            break
        if prev_cost is not None:
            decrease = (prev_cost - cost) / max(prev_cost, _COST_FLOOR)
            if decrease < config.conv_thresh:
                break
        prev_cost = cost

    logger.debug(f"重启 {restart_index}{'（白化初值）' if warm else ''}: "
                 f"迭代 {iterations} 次, 代价 {cost:.3e}")
    return {
        "restart": restart_index,
        "z": z,
        "filters": filters,
        "cost": float(cost),
        "iterations": iterations,
        "history": np.asarray(history, dtype=np.float64).reshape(-1, 2),
    }


def unwrap_delays(echoes: Sequence[EchoSet], period: float) -> List[EchoSet]:
    """消除 1/Δf 周期的时间平移缠绕

    所有通道的真实时延位于长度小于半周期的区间内，
    在圆周上最大空隙处切开，使最早的回声时延为 0。
    """
    pooled = np.concatenate([np.mod(e.delays, period) for e in echoes])
    if pooled.size == 0:
        return list(echoes)
    ordered = np.sort(pooled)
    gaps = np.diff(np.append(ordered, ordered[0] + period))
    start = ordered[(int(np.argmax(gaps)) + 1) % ordered.size]
    return [EchoSet.from_unsorted(np.mod(e.delays - start, period), e.weights) for e in echoes]


def normalize_solution(echoes: Sequence[EchoSet],
                       rtol: float = REFERENCE_WEIGHT_RTOL) -> List[EchoSet]:
    """约定 τ_{1,1} = 0、c_{1,1} = 1：所有通道减去通道1最小时延并除以其权重

    c_{1,1} 不大于 rtol·max|c| 时拒绝归一化（NumericalFailure），
    否则除法会把其余权重放大到无意义的量级。
    """
    if not echoes or echoes[0].n_echoes == 0:
        raise InvalidInputError("通道1没有回声，无法归一化")
    ref_delay = float(echoes[0].delays[0])
    ref_weight = float(echoes[0].weights[0])
    if not ref_weight > 0:
        raise InvalidInputError(f"参考权重 c_(1,1) 必须为正: {ref_weight}")
    largest = max(float(np.max(np.abs(e.weights))) for e in echoes if e.n_echoes)
    if ref_weight <= rtol * largest:
        raise NumericalFailure(f"参考权重 c_(1,1)={ref_weight:.3e} 相对最大权重 "
                               f"{largest:.3e} 过小，无法归一化")
    return [EchoSet.from_unsorted(e.delays - ref_delay, e.weights / ref_weight) for e in echoes]


def _extract_normalized(run: dict, x: Sequence[Spectrum]) -> List[EchoSet]:
    z = run["z"]
    raw = [extract_echoes(xm * z, fm) for xm, fm in zip(x, run["filters"])]
    return normalize_solution(unwrap_delays(raw, 1.0 / x[0].grid.step))


def mulan_solve(x: Sequence[Spectrum], K: int, config: Optional[MulanConfig] = None,
                jobs: int = 1) -> SolveResult:
    """MULAN 主流程：多次重启、选最优、求根提取回声、消除缠绕并归一化

    按 (代价, 重启编号) 升序尝试，参考权重过小的解被跳过并记录警告。
    """
    logger = get_logger()
    config = config or MulanConfig()
    x = list(x)
    _check_channels(x)
    K = int(K)
    F = x[0].grid.count
    if K < 1 or F < 2 * K + 1:
        raise InvalidInputError(f"需要 K ≥ 1 且 F ≥ 2K+1，当前 K={K}, F={F}")
    if len(x) == 1:
        logger.warning("单通道输入不可辨识，结果仅供参考")

    n_random = int(config.n_restarts)
    # 白化初值的种子只在 x 全零、退回随机初值时使用
    seeds = np.random.SeedSequence(int(config.rng_seed)).spawn(n_random + 1)
    tasks = [(x, K, config, seed, i) for i, seed in enumerate(seeds[:n_random])]
    if config.warm_start:
        tasks.append((x, K, config, seeds[n_random], n_random, True))
    outcomes = run_cpu_tasks(run_restart, tasks, jobs=jobs, task_prefix="mulan_restart")

    runs = []
    for outcome in outcomes:
        if outcome.success and np.isfinite(outcome.result["cost"]):
            runs.append(outcome.result)
        else:
            logger.warning(f"{outcome.task_id} 无效: {outcome.error_message or '代价非有限'}")
    if not runs:
        raise NumericalFailure(f"全部 {len(outcomes)} 次重启均发散或失败")

    # 代价相同则取编号最小的重启
    best, echoes = None, None
    for run in sorted(runs, key=lambda r: (r["cost"], r["restart"])):
        try:
            echoes = _extract_normalized(run, x)
        except NumericalFailure as e:
            logger.warning(f"重启 {run['restart']} 的解被跳过: {e}")
            continue
        best = run
        break
    if best is None:
        raise NumericalFailure(f"{len(runs)} 次有效重启均无法提取可归一化的回声")

    logger.info(f"MULAN 完成: 最优重启 {best['restart']}, 代价 {best['cost']:.3e}, "
                f"迭代 {best['iterations']} 次")
    restart_costs = [float("inf")] * len(outcomes)
    for r in runs:
        restart_costs[r["restart"]] = r["cost"]
    return SolveResult(
        echoes=echoes,
        z_estimate=best["z"],
        final_cost=best["cost"],
        iterations=best["iterations"],
        best_restart=best["restart"],
        filters=list(best["filters"]),
        cost_history=best["history"],
        restart_costs=restart_costs,
    )
