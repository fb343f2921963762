# -*- coding: utf-8 -*-
"""
日志管理模块：按需将日志输出到文件或控制台，格式包含时间戳与运行标识。
库默认静默（NullHandler），命令行入口负责开启控制台输出。

每次运行以配置哈希前缀作为运行标识：文件日志默认写入
``<out_dir>/mulan_<哈希前12位>.log``，同一配置的多次运行（例如断点续跑的
扫描）追加到同一文件，不同配置互不混写。
"""
import logging
import os
import sys
from typing import Optional

_LOGGER_NAME = "mulan_echo"
RUN_ID_LENGTH = 12

_logger = logging.getLogger(_LOGGER_NAME)
_logger.setLevel(logging.INFO)

# 作为库使用时不输出任何内容
if not _logger.handlers:
    _logger.addHandler(logging.NullHandler())

_file_handler: Optional[logging.FileHandler] = None
_console_handler: Optional[logging.Handler] = None
_run_id = "-"


class _RunIdFilter(logging.Filter):
    """给每条记录附加当前运行标识。"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = _run_id
        return True


def _make_formatter() -> logging.Formatter:
    # 时间、级别、运行标识、信息
    return logging.Formatter(fmt="%(asctime)s | %(levelname)s | %(run_id)s | %(message)s",
                             datefmt="%Y-%m-%d %H:%M:%S")


def _attach(handler: logging.Handler) -> None:
    handler.setFormatter(_make_formatter())
    handler.addFilter(_RunIdFilter())
    _logger.addHandler(handler)


def set_run_id(config_hash: Optional[str]) -> str:
    """以配置哈希前缀设置运行标识；空值恢复为 "-"。返回新标识。"""
    global _run_id
    _run_id = config_hash[:RUN_ID_LENGTH] if config_hash else "-"
    return _run_id


def get_run_id() -> str:
    return _run_id


def run_log_path(out_dir: str, config_hash: str) -> str:
    """按配置哈希命名的单次运行日志路径。"""
    if not config_hash:
        raise ValueError("config_hash 不能为空")
    return os.path.join(out_dir, f"mulan_{config_hash[:RUN_ID_LENGTH]}.log")


def _close_file_handler() -> None:
    global _file_handler
    if _file_handler is None:
        return
    _logger.removeHandler(_file_handler)
    try:
        _file_handler.close()
    except Exception:
        pass
    _file_handler = None


def enable_file_logging(enable: bool, log_path: Optional[str] = None) -> None:
    """根据 enable 开关文件日志输出；路径变化时切换到新文件。"""
    if enable:
        if not log_path:
            raise ValueError("开启文件日志需要 log_path")
        path = os.path.abspath(log_path)
        if _file_handler is not None and _file_handler.baseFilename != path:
            _close_file_handler()
        if _file_handler is None:
            _open_file_handler(path)
        _logger.info(f"文件日志已开启: {path}")
    else:
        if _file_handler is not None:
            _logger.info("文件日志已关闭")
        _close_file_handler()


def _open_file_handler(path: str) -> None:
    global _file_handler
    os.makedirs(os.path.dirname(path), exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    _attach(handler)
    _file_handler = handler


def current_log_path() -> Optional[str]:
    return _file_handler.baseFilename if _file_handler is not None else None


def enable_console_logging(level: int = logging.INFO) -> None:
    """开启stderr控制台日志；重复调用只调整级别。"""
    global _console_handler
    if _console_handler is None:
        handler = logging.StreamHandler(sys.stderr)
        _attach(handler)
        _console_handler = handler
    _console_handler.setLevel(level)
    _logger.setLevel(min(level, logging.INFO))


def get_logger() -> logging.Logger:
    return _logger
