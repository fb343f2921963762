# -*- coding: utf-8 -*-
"""
离散时间信号、等差频率网格与任意频点DFT

- RealSignal：有限长实信号及采样率
- FrequencyGrid：等差频率集合（起点、步长、点数）
- Spectrum：定义在网格上的复数值
- generalized_dft：在非标准DFT频点上直接求和，指数约定固定为 exp(-2πi·f·n/Fs)

所有类型构造后不可变，操作为纯函数，可在多线程间共享只读输入。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from mulan_echo.errors import InvalidInputError

# Nyquist 检查的相对容差，避免 2000.0000000002 之类的浮点误判
_NYQUIST_RTOL = 1e-12


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RealSignal:
    """有限长实信号"""
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = _frozen_array(self.samples, np.float64)
        if samples.size < 1:
            raise InvalidInputError("信号至少需要1个采样点")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("信号包含非有限值")
        if not (float(self.sample_rate) > 0):
            raise InvalidInputError(f"采样率必须为正: {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def length(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        """信号时长（秒）"""
        return self.length / self.sample_rate

    def __len__(self) -> int:
        return self.length


@dataclass(frozen=True)
class FrequencyGrid:
    """等差频率网格 f_i = f_start + i·step, i = 0..count-1"""
    f_start: float
    step: float
    count: int

    def __post_init__(self):
        if not (float(self.f_start) > 0):
            raise InvalidInputError(f"网格起始频率必须为正: {self.f_start}")
        if not (float(self.step) > 0):
            raise InvalidInputError(f"网格步长必须为正: {self.step}")
        if int(self.count) < 1:
            raise InvalidInputError(f"网格点数至少为1: {self.count}")
        object.__setattr__(self, "f_start", float(self.f_start))
        object.__setattr__(self, "step", float(self.step))
        object.__setattr__(self, "count", int(self.count))

    @property
    def frequencies(self) -> np.ndarray:
        return self.f_start + self.step * np.arange(self.count, dtype=np.float64)

    @property
    def max_frequency(self) -> float:
        return self.f_start + (self.count - 1) * self.step

    def fits(self, sample_rate: float) -> bool:
        """网格最高频率是否不超过 Nyquist"""
        nyquist = 0.5 * float(sample_rate)
        return self.max_frequency <= nyquist * (1.0 + _NYQUIST_RTOL)

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True, eq=False)
class Spectrum:
    """网格上的复数频谱"""
    values: np.ndarray
    grid: FrequencyGrid

    def __post_init__(self):
        values = _frozen_array(self.values, np.complex128)
        if values.size != self.grid.count:
            raise InvalidInputError(
                f"频谱长度 {values.size} 与网格点数 {self.grid.count} 不一致")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("频谱包含非有限值")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.grid.count

    def __mul__(self, other: Union["Spectrum", complex, float]) -> "Spectrum":
        """逐元素乘积（Hadamard），网格必须一致"""
        if isinstance(other, Spectrum):
            if other.grid != self.grid:
                raise InvalidInputError("两个频谱的网格不一致")
            return Spectrum(self.values * other.values, self.grid)
        return Spectrum(self.values * complex(other), self.grid)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def make_frequency_grid(f_min: float, f_max: float, count: int) -> FrequencyGrid:
    """在 [f_min, f_max] 上构造 count 个等间隔频点"""
    if not (f_min > 0):
        raise InvalidInputError(f"f_min 必须为正: {f_min}")
    if not (f_max > f_min):
        raise InvalidInputError(f"频率范围无效: [{f_min}, {f_max}]")
    if int(count) < 2:
        raise InvalidInputError(f"网格点数至少为2: {count}")
    count = int(count)
    return FrequencyGrid(f_start=f_min, step=(f_max - f_min) / (count - 1), count=count)


def evaluate_dft_at(signal: RealSignal, frequencies) -> np.ndarray:
    """在任意频率向量上直接求和：Σ x(n)·exp(-2πi·f·n/Fs)

    不做 Nyquist 检查，可用于负频率（共轭对称性验证）。
    """
    freqs = np.asarray(frequencies, dtype=np.float64).reshape(-1)
    n = np.arange(signal.length, dtype=np.float64)
    # 先取模再乘 2π，减小大相位的舍入
    cycles = np.mod(np.outer(freqs, n) / signal.sample_rate, 1.0)
    kernel = np.exp(-2j * np.pi * cycles)
    return kernel @ signal.samples


def generalized_dft(signal: RealSignal, grid: FrequencyGrid) -> Spectrum:
    """在等差网格上计算未归一化的DFT（稠密直接求值，非FFT）"""
    if not grid.fits(signal.sample_rate):
        raise InvalidInputError(
            f"网格最高频率 {grid.max_frequency:.6g} Hz 超过 Nyquist "
            f"{0.5 * signal.sample_rate:.6g} Hz")
    return Spectrum(evaluate_dft_at(signal, grid.frequencies), grid)
