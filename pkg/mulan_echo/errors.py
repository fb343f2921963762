# -*- coding: utf-8 -*-
"""
统一异常定义：
- InvalidInputError：前置条件不满足（网格、长度、K、范围、数量不匹配）
- NumericalFailure：非有限值、频谱近零、重根、所有重启发散
- ConfigError：配置解析或校验失败，携带字段与行号用于诊断
"""
from __future__ import annotations

from typing import Optional


class EchoRetrievalError(Exception):
    """回声恢复相关异常的基类"""


class InvalidInputError(EchoRetrievalError, ValueError):
    """输入不满足操作前置条件"""


class NumericalFailure(EchoRetrievalError, ArithmeticError):
    """数值计算失败"""


class ConfigError(EchoRetrievalError):
    """配置错误

    Args:
        message: 错误说明
        field: 出错字段（点分路径，如 solver.method）
        line: JSON 行号（解析错误时可用）
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"第{line}行: "
        if field:
            prefix += f"[{field}] "
        super().__init__(prefix + message)
