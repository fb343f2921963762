# -*- coding: utf-8 -*-
"""
非盲FRI回声恢复

已知源频谱 s 时：z = 1/s，h_m = x_m ⊙ z 是 K 个等比数列的加权和，
用湮灭滤波器求比值，再由比值的辐角得到时延、由 Vandermonde 最小二乘得到权重。
F ≥ 2K+1 时无噪声数据可精确恢复。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mulan_echo.errors import InvalidInputError, NumericalFailure
from mulan_echo.logger_manager import get_logger
from mulan_echo.spectral_core import Spectrum
from mulan_echo.structured_linalg import (
    filter_roots,
    min_right_singular_vector,
    toeplitz_full,
    vandermonde_weights,
)

# 频谱求逆的默认相对下限
DEFAULT_INVERSION_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class EchoSet:
    """单通道回声：时延（秒，升序）与非负权重"""
    delays: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        delays = np.array(self.delays, dtype=np.float64, copy=True).reshape(-1)
        weights = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if delays.size != weights.size:
            raise InvalidInputError(
                f"时延数 {delays.size} 与权重数 {weights.size} 不一致")
        if not (np.all(np.isfinite(delays)) and np.all(np.isfinite(weights))):
            raise InvalidInputError("回声参数包含非有限值")
        if np.any(weights < 0):
            raise InvalidInputError("回声权重必须非负")
        if np.any(np.diff(delays) < 0):
            raise InvalidInputError("回声时延必须升序排列")
        delays.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_unsorted(cls, delays, weights) -> "EchoSet":
        """按时延排序并同步重排权重"""
        delays = np.asarray(delays, dtype=np.float64).reshape(-1)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if delays.size != weights.size:
            raise InvalidInputError(
                f"时延数 {delays.size} 与权重数 {weights.size} 不一致")
        order = np.argsort(delays, kind="stable")
        return cls(delays[order], weights[order])

    @property
    def n_echoes(self) -> int:
        return int(self.delays.size)

    def __len__(self) -> int:
        return self.n_echoes

    def to_dict(self) -> list:
        return [{"delay_s": float(d), "weight": float(w)}
                for d, w in zip(self.delays, self.weights)]

    @classmethod
    def from_dict(cls, items: list) -> "EchoSet":
        return cls.from_unsorted([float(it["delay_s"]) for it in items],
                                 [float(it["weight"]) for it in items])


@dataclass(frozen=True, eq=False)
class AnnihilatingFilter:
    """长度 K+1 的复数湮灭滤波器"""
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.complex128, copy=True).reshape(-1)
        if coeffs.size < 2:
            raise InvalidInputError("湮灭滤波器长度至少为2")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def order(self) -> int:
        """可湮灭的等比数列个数 K"""
        return int(self.coeffs.size - 1)

    def roots(self) -> np.ndarray:
        return filter_roots(self.coeffs)


def invert_spectrum(s: Spectrum, floor: float = DEFAULT_INVERSION_FLOOR) -> Spectrum:
    """z(f) = 1/s(f)；任一频点 |s| ≤ floor·max|s| 时报错"""
    mags = np.abs(s.values)
    threshold = floor * float(mags.max()) if mags.size else 0.0
    bad = np.nonzero(mags <= threshold)[0]
    if bad.size:
        idx = int(bad[0])
        freq = float(s.grid.frequencies[idx])
        raise NumericalFailure(
            f"源频谱在 {freq:.6g} Hz 处接近零（|s|={mags[idx]:.3g}），无法求逆")
    return Spectrum(1.0 / s.values, s.grid)


def annihilate_nonblind(h: Spectrum, K: int) -> AnnihilatingFilter:
    """min ‖Toep(h)·a‖，‖a‖=1，返回长度 K+1 的滤波器"""
    K = int(K)
    if K < 1:
        raise InvalidInputError(f"回声数 K 必须 ≥ 1: {K}")
    if h.grid.count < 2 * K + 1:
        raise InvalidInputError(
            f"频点数 F={h.grid.count} 不足，至少需要 2K+1={2 * K + 1}")
    vec, sigma = min_right_singular_vector(toeplitz_full(h.values, K + 1))
    get_logger().debug(f"非盲湮灭: K={K}, 残差={sigma:.3e}")
    return AnnihilatingFilter(vec)


def roots_to_delays(roots, delta_f: float) -> np.ndarray:
    """τ = -arg(r)/(2πΔf)，负值加 1/Δf 映射到 [0, 1/Δf)"""
    roots = np.asarray(roots, dtype=np.complex128).reshape(-1)
    if np.any(roots == 0):
        raise NumericalFailure("根为零，无法确定时延")
    period = 1.0 / float(delta_f)
    delays = -np.angle(roots) / (2.0 * np.pi * float(delta_f))
    delays = np.where(delays < 0, delays + period, delays)
    # arg = -π 时会得到恰好 period
    return np.where(delays >= period, delays - period, delays)


def extract_echoes(h: Spectrum, filt: AnnihilatingFilter) -> EchoSet:
    """由滤波器求根得到时延，再解 Vandermonde 得到权重"""
    roots = filt.roots()
    delays = roots_to_delays(roots, h.grid.step)
    weights = vandermonde_weights(roots, h, h.grid.f_start)
    return EchoSet.from_unsorted(delays, weights)


def recover_echoes_nonblind(x: Spectrum, s: Spectrum, K: int,
                            floor: Optional[float] = None) -> EchoSet:
    """已知源频谱的完整恢复流程"""
    z = invert_spectrum(s, DEFAULT_INVERSION_FLOOR if floor is None else floor)
    h = x * z
    filt = annihilate_nonblind(h, K)
    return extract_echoes(h, filt)
