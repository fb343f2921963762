# -*- coding: utf-8 -*-
"""
结构化线性代数内核（所有求解器共享）

卷积约定 (u ⋆ v)(n) = Σ_j u(j)·v(L-1+n-j), n = 0..D-L，即 numpy 的 'valid' 卷积。
- toeplitz_full(v, L)：Toep(v)，满足 Toep(v)·u = u ⋆ v
- toeplitz_zero(u, D)：Toep_0(u)，满足 Toep_0(u)·v = Toep(v)·u
- min_right_singular_vector：min ‖A·v‖，‖v‖=1
- polynomial_roots：P(y) = Σ a_k·y^k 的根（伴随矩阵特征值）
- filter_roots：湮灭滤波器 [1,-r] 的被湮灭比值 r
- vandermonde_weights：已知根时的最小二乘权重
"""
from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy import linalg

from mulan_echo.errors import InvalidInputError, NumericalFailure
from mulan_echo.spectral_core import Spectrum

# 多项式尾部系数裁剪阈值（相对 ‖a‖）
TRIM_RTOL = 1e-12
# 根两两最小距离，低于此值视为重根
DUPLICATE_ROOT_ATOL = 1e-9
# 列数不超过该值时直接做完整SVD，否则对 AᴴA 做 Hermitian 特征分解
_SVD_MAX_COLS = 64


def _as_vector(values, dtype=np.complex128) -> np.ndarray:
    return np.asarray(values, dtype=dtype).reshape(-1)


def toeplitz_full(v, window: int) -> np.ndarray:
    """Toep(v) ∈ C^{(D-L+1)×L}，元素 (i,j) = v[L-1+i-j]（0起始）"""
    v = _as_vector(v)
    D, L = v.size, int(window)
    if not 1 <= L <= D:
        raise InvalidInputError(f"窗口长度 L={L} 超出范围 [1, {D}]")
    return linalg.toeplitz(v[L - 1:], v[L - 1::-1])


def toeplitz_zero(u, width: int) -> np.ndarray:
    """Toep_0(u) ∈ C^{(D-L+1)×D}，每行为反转的 u 向右平移一位"""
    u = _as_vector(u)
    L, D = u.size, int(width)
    if not 1 <= L <= D:
        raise InvalidInputError(f"滤波器长度 L={L} 超出范围 [1, {D}]")
    first_col = np.zeros(D - L + 1, dtype=np.complex128)
    first_col[0] = u[-1]
    first_row = np.zeros(D, dtype=np.complex128)
    first_row[:L] = u[::-1]
    return linalg.toeplitz(first_col, first_row)


def min_eigenvector_hermitian(gram) -> np.ndarray:
    """Hermitian 矩阵最小特征值对应的单位特征向量"""
    gram = np.asarray(gram, dtype=np.complex128)
    if not np.all(np.isfinite(gram)):
        raise NumericalFailure("Gram 矩阵包含非有限值")
    _, vecs = linalg.eigh(gram, subset_by_index=[0, 0])
    vec = vecs[:, 0]
    return vec / np.linalg.norm(vec)


def min_right_singular_vector(A) -> Tuple[np.ndarray, float]:
    """返回单位范数向量 v 与 σ_min = ‖A·v‖

    向量的全局相位不确定，调用方必须对相位不敏感。
    """
    A = np.asarray(A, dtype=np.complex128)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise InvalidInputError(f"矩阵维度无效: {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericalFailure("矩阵包含非有限值")

    cols = A.shape[1]
    if cols <= _SVD_MAX_COLS:
        # 小矩阵：完整SVD，精度更好
        _, _, vh = linalg.svd(A, full_matrices=True)
        vec = vh[-1].conj()
    else:
        vec = min_eigenvector_hermitian(A.conj().T @ A)
    vec = vec / np.linalg.norm(vec)
    sigma = float(np.linalg.norm(A @ vec))
    return vec, sigma


def _trim_trailing(coeffs: np.ndarray) -> np.ndarray:
    scale = np.linalg.norm(coeffs)
    if scale == 0:
        raise InvalidInputError("多项式系数全为零")
    keep = np.nonzero(np.abs(coeffs) > TRIM_RTOL * scale)[0]
    return coeffs[: keep[-1] + 1]


def polynomial_roots(coeffs) -> np.ndarray:
    """P(y) = Σ_{k=0}^{K} a_k·y^k 的 K 个根

    先裁剪尾部近零系数，再对首一化后的伴随矩阵求特征值。
    """
    a = _trim_trailing(_as_vector(coeffs))
    if a.size < 2:
        raise InvalidInputError("裁剪后多项式次数为0，无根可求")
    # scipy 的 companion 需要最高次系数在前
    companion = linalg.companion(a[::-1] / a[-1])
    return linalg.eigvals(companion)


def convolve_linear_factors(ratios) -> np.ndarray:
    """链式卷积 [1,-r_1] ⋆ ... ⋆ [1,-r_K]，得到湮灭这些比值的滤波器"""
    coeffs = np.ones(1, dtype=np.complex128)
    for r in _as_vector(ratios):
        coeffs = np.convolve(coeffs, np.array([1.0, -r], dtype=np.complex128))
    return coeffs


def filter_roots(filter_coeffs) -> np.ndarray:
    """湮灭滤波器 a 的被湮灭比值

    a ⋆ [w^0, w^1, ...] = 0 当且仅当 Σ_k a_k·w^{K-k} = 0，
    即反转系数后的 polynomial_roots。
    """
    return polynomial_roots(_as_vector(filter_coeffs)[::-1])


def vandermonde_matrix(roots, rows: int) -> np.ndarray:
    """V[i,k] = roots_k^i, i = 0..rows-1"""
    roots = _as_vector(roots)
    return np.vander(roots, N=int(rows), increasing=True).T


def vandermonde_weights(roots, h: Spectrum, f1: float) -> np.ndarray:
    """c = |D^{-1}·V(roots)^†·h|，D = Diag(exp(-2πi·f1·τ))

    相位被丢弃，只保留非负权重。
    """
    roots = _as_vector(roots)
    K, F = roots.size, h.grid.count
    if F < K:
        raise InvalidInputError(f"频点数 F={F} 少于回声数 K={K}")
    if K > 1:
        gaps = np.abs(roots[:, None] - roots[None, :])
        gaps[np.diag_indices(K)] = np.inf
        if gaps.min() <= DUPLICATE_ROOT_ATOL:
            raise NumericalFailure(
                f"存在重根（最小间距 {gaps.min():.3g}），Vandermonde 矩阵秩亏")
    if np.any(roots == 0):
        raise NumericalFailure("根为零，无法确定时延")

    V = vandermonde_matrix(roots, F)
    coeffs, *_ = linalg.lstsq(V, h.values)
    delays = -np.angle(roots) / (2.0 * np.pi * h.grid.step)
    d_inv = np.exp(2j * np.pi * f1 * delays)
    return np.abs(d_inv * coeffs)
