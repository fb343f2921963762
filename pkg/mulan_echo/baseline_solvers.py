# -*- coding: utf-8 -*-
"""
离散时域基线方法（两通道）

- cr_solve：交叉关系最小二乘，约束 ‖ĥ₁‖²+‖ĥ₂‖²=1，化为最小特征向量问题
- lasso_solve：带 ℓ1 惩罚的交叉关系，约束 ĥ₁(0)=1，单调加速近端梯度（MFISTA）求解
- peak_pick：按局部极大值挑选 K 个峰，得到栅格上的回声
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from mulan_echo.errors import InvalidInputError
from mulan_echo.fri_annihilation import EchoSet
from mulan_echo.logger_manager import get_logger
from mulan_echo.spectral_core import RealSignal
from mulan_echo.structured_linalg import min_right_singular_vector, toeplitz_full

DEFAULT_LASSO_LAMBDA = 1e-3
DEFAULT_LASSO_ITERS = 5000
DEFAULT_LASSO_TOL = 1e-10
_POWER_ITERS = 100

NORMALIZATION_UNIT_NORM = "unit_joint_norm"
NORMALIZATION_FIRST_TAP = "first_tap_one"


@dataclass(frozen=True, eq=False)
class DiscreteFilterPair:
    """估计的一对离散滤波器及残差"""
    h1: np.ndarray
    h2: np.ndarray
    residual: float
    normalization: str = NORMALIZATION_UNIT_NORM
    iterations: int = 0
    # LASSO 每次迭代后的目标值（首项为初始点）
    objective_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        h1 = np.asarray(self.h1, dtype=np.float64).reshape(-1)
        h2 = np.asarray(self.h2, dtype=np.float64).reshape(-1)
        if h1.size < 1 or h1.size != h2.size:
            raise InvalidInputError(f"滤波器长度无效: {h1.size}, {h2.size}")
        object.__setattr__(self, "h1", h1)
        object.__setattr__(self, "h2", h2)
        object.__setattr__(self, "residual", float(self.residual))

    @property
    def length(self) -> int:
        return int(self.h1.size)


def _check_pair(x1: RealSignal, x2: RealSignal, L: int) -> int:
    L = int(L)
    if L < 1:
        raise InvalidInputError(f"滤波器长度 L 必须 ≥ 1: {L}")
    if x1.sample_rate != x2.sample_rate:
        raise InvalidInputError("两个通道的采样率不一致")
    if x1.length != x2.length:
        raise InvalidInputError(f"两个通道长度不一致: {x1.length}, {x2.length}")
    if x1.length < 2 * L:
        raise InvalidInputError(f"信号长度 N={x1.length} 不足，至少需要 2L={2 * L}")
    if not (np.any(x1.samples) and np.any(x2.samples)):
        raise InvalidInputError("输入信号全为零")
    return L


def cross_relation_matrix(x1: RealSignal, x2: RealSignal, L: int) -> np.ndarray:
    """[Toep(x̂₂), -Toep(x̂₁)]，使其乘以 [ĥ₁; ĥ₂] 得到交叉关系残差"""
    t2 = toeplitz_full(x2.samples, L).real
    t1 = toeplitz_full(x1.samples, L).real
    return np.hstack([t2, -t1])


def cr_solve(x1: RealSignal, x2: RealSignal, L: int) -> DiscreteFilterPair:
    """交叉关系：min ‖Toep(x̂₂)ĥ₁ - Toep(x̂₁)ĥ₂‖²，‖[ĥ₁;ĥ₂]‖ = 1"""
    L = _check_pair(x1, x2, L)
    A = cross_relation_matrix(x1, x2, L)
    vec, sigma = min_right_singular_vector(A)
    # 实矩阵的零空间向量可取实数：去掉全局相位
    pivot = vec[np.argmax(np.abs(vec))]
    vec = (vec * np.conj(pivot) / abs(pivot)).real
    vec = vec / np.linalg.norm(vec)
    residual = float(np.linalg.norm(A @ vec) ** 2)
    get_logger().debug(f"CR: L={L}, 残差={residual:.3e}, σ_min={sigma:.3e}")
    return DiscreteFilterPair(vec[:L], vec[L:], residual, NORMALIZATION_UNIT_NORM)


def _soft_threshold(v: np.ndarray, thresh: float) -> np.ndarray:
    return np.sign(v) * np.maximum(0.0, np.abs(v) - thresh)


def _power_iteration(gram: np.ndarray, iters: int = _POWER_ITERS) -> float:
    """估计对称半正定矩阵的最大特征值"""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        lam = float(v @ (gram @ v))
    # 留一点余量，保证步长 1/Λ 不超过 1/Lipschitz
    return 1.01 * lam


def lasso_solve(x1: RealSignal, x2: RealSignal, L: int,
                lam: float = DEFAULT_LASSO_LAMBDA,
                iters: int = DEFAULT_LASSO_ITERS,
                tol: float = DEFAULT_LASSO_TOL) -> DiscreteFilterPair:
    """LASSO 型交叉关系：
    min ‖Toep(x̂₂)ĥ₁ - Toep(x̂₁)ĥ₂‖² + λ(‖ĥ₁‖₁+‖ĥ₂‖₁)，ĥ₁(0) = 1

    自由变量 w = [ĥ₁(1:), ĥ₂]，目标 wᵀGw - 2cᵀw + b₀ + λ‖w‖₁ + λ。
    """
    L = _check_pair(x1, x2, L)
    if lam < 0:
        raise InvalidInputError(f"λ 必须非负: {lam}")
    A = cross_relation_matrix(x1, x2, L)
    b = A[:, 0]
    B = A[:, 1:]
    gram = B.T @ B
    lin = -(B.T @ b)
    const = float(b @ b)

    def objective(w: np.ndarray) -> float:
        return float(w @ (gram @ w) - 2.0 * lin @ w + const + lam * (np.sum(np.abs(w)) + 1.0))

    lipschitz = 2.0 * _power_iteration(gram)
    w = np.zeros(B.shape[1])
    if lipschitz == 0:
        return DiscreteFilterPair(np.r_[1.0, w[:L - 1]], w[L - 1:], objective(w),
                                  NORMALIZATION_FIRST_TAP, 0)
    step = 1.0 / lipschitz

    y = w.copy()
    t = 1.0
    f_w = objective(w)
    history = [f_w]
    it = 0
    for it in range(1, int(iters) + 1):
        grad = 2.0 * (gram @ y - lin)
        candidate = _soft_threshold(y - step * grad, lam * step)
        f_c = objective(candidate)
        # 单调变体：候选点更差时保留当前点
        accepted = f_c <= f_w
        if accepted:
            w_next, f_next = candidate, f_c
        else:
            w_next, f_next = w, f_w
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_next + (t / t_next) * (candidate - w_next) + ((t - 1.0) / t_next) * (w_next - w)
        converged = accepted and abs(f_w - f_next) <= tol * max(abs(f_w), 1e-300)
        w, f_w, t = w_next, f_next, t_next
        history.append(f_w)
        if converged and it > 1:
            break

    get_logger().debug(f"LASSO: L={L}, λ={lam:g}, 迭代 {it} 次, 目标值 {f_w:.3e}")
    h1 = np.r_[1.0, w[:L - 1]]
    h2 = w[L - 1:]
    return DiscreteFilterPair(h1, h2, f_w, NORMALIZATION_FIRST_TAP, it, np.asarray(history))


def peak_pick(filt, K: int, sample_rate: float) -> EchoSet:
    """挑选 K 个局部极大值（|h(n)| ≥ |h(n±1)|）作为栅格回声

    局部极大值不足 K 个时，用剩余的全局最大幅值补足。
    """
    mags = np.abs(np.asarray(filt, dtype=np.float64).reshape(-1))
    K = int(K)
    if K > mags.size:
        raise InvalidInputError(f"K={K} 超过滤波器长度 {mags.size}")
    if K < 1:
        raise InvalidInputError(f"K 必须 ≥ 1: {K}")
    left = np.r_[-np.inf, mags[:-1]]
    right = np.r_[mags[1:], -np.inf]
    local = np.nonzero((mags >= left) & (mags >= right))[0]
    # 按幅值降序，幅值相同按下标升序
    ranked = local[np.lexsort((local, -mags[local]))]
    chosen = list(ranked[:K])
    if len(chosen) < K:
        taken = set(chosen)
        rest = [i for i in np.lexsort((np.arange(mags.size), -mags)) if i not in taken]
        chosen.extend(rest[:K - len(chosen)])
    idx = np.array(sorted(chosen), dtype=np.int64)
    return EchoSet(idx / float(sample_rate), mags[idx])


def peak_pick_pair(pair: DiscreteFilterPair, K: int, sample_rate: float) -> Tuple[EchoSet, EchoSet]:
    return peak_pick(pair.h1, K, sample_rate), peak_pick(pair.h2, K, sample_rate)
