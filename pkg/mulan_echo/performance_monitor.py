# -*- coding: utf-8 -*-
"""
性能监控 - 记录关键步骤的耗时与内存变化
求解结果和扫描 CSV 中的 wall time 都来自这里
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional

import psutil

from mulan_echo.logger_manager import get_logger


@dataclass
class PerformanceMetrics:
    """一次计时的结果"""
    operation: str
    wall_time_s: float
    rss_before_mb: float
    rss_after_mb: float

    @property
    def rss_delta_mb(self) -> float:
        return self.rss_after_mb - self.rss_before_mb

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rss_delta_mb"] = self.rss_delta_mb
        return d


def _rss_mb() -> float:
    try:
        return psutil.Process().memory_info().rss / 1024 / 1024
    except (psutil.Error, OSError):
        return 0.0


class PerformanceTimer:
    """性能计时器，用于监控关键操作耗时"""

    def __init__(self, operation_name: str, warn_after_s: float = 60.0):
        self.operation_name = operation_name
        self.warn_after_s = float(warn_after_s)
        self.logger = get_logger()
        self.metrics: Optional[PerformanceMetrics] = None
        self._start = 0.0
        self._rss_before = 0.0

    @property
    def elapsed(self) -> float:
        """已完成时返回总耗时，计时中返回当前耗时（秒）"""
        if self.metrics is not None:
            return self.metrics.wall_time_s
        return time.perf_counter() - self._start if self._start else 0.0

    def __enter__(self):
        self._rss_before = _rss_mb()
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        elapsed = time.perf_counter() - self._start
        self.metrics = PerformanceMetrics(self.operation_name, elapsed,
                                          self._rss_before, _rss_mb())
        if elapsed > self.warn_after_s:
            self.logger.warning(f"性能警告: {self.operation_name} 耗时 {elapsed:.2f}s")
        else:
            self.logger.debug(f"性能监控: {self.operation_name} 耗时 {elapsed:.3f}s, "
                              f"内存变化 {self.metrics.rss_delta_mb:+.1f}MB")
        return False
