# -*- coding: utf-8 -*-
"""
CPU密集型任务模块

使用multiprocessing处理CPU密集型计算任务（随机重启、批量试验）：
- 固定spawn启动方式，保证各平台行为一致
- 子进程只做纯计算，任务函数按模块名+函数名动态导入
- 异常不跨进程抛出，统一封装为 CPUTaskResult(success=False)
- jobs<=1 时在当前进程内顺序执行，结果格式完全相同
"""

import os
import time
import traceback
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import psutil

from mulan_echo.logger_manager import get_logger


@dataclass
class CPUTaskResult:
    """CPU任务结果"""
    task_id: str
    success: bool
    result: Any = None
    error_message: str = ""
    error_type: str = ""
    execution_time: float = 0.0
    worker_pid: int = 0


@dataclass
class CPUTaskRequest:
    """CPU任务请求"""
    task_id: str
    func_name: str
    func_module: str
    args: tuple
    kwargs: dict = field(default_factory=dict)


def default_jobs() -> int:
    """默认并行度：物理核数，最多8个"""
    cores = psutil.cpu_count(logical=False) or mp.cpu_count()
    return max(1, min(8, int(cores)))


def _execute_request(task_request: CPUTaskRequest) -> CPUTaskResult:
    """执行单个任务请求（可运行在子进程中）

    注意：此函数可能运行在独立进程中，不能依赖主进程的全局状态
    """
    logger = get_logger()
    start_time = time.perf_counter()
    try:
        # 动态导入函数
        module = __import__(task_request.func_module, fromlist=[task_request.func_name])
        func = getattr(module, task_request.func_name)

        result = func(*task_request.args, **task_request.kwargs)

        execution_time = time.perf_counter() - start_time
        logger.debug(f"CPU任务 {task_request.task_id} 完成，耗时: {execution_time:.3f}s")
        return CPUTaskResult(
            task_id=task_request.task_id,
            success=True,
            result=result,
            execution_time=execution_time,
            worker_pid=os.getpid(),
        )
    except Exception as e:
        execution_time = time.perf_counter() - start_time
        error_msg = f"CPU任务执行失败: {str(e)}"
        logger.warning(f"CPU任务 {task_request.task_id} 失败: {error_msg}")
        logger.debug(f"异常详情: {traceback.format_exc()}")
        return CPUTaskResult(
            task_id=task_request.task_id,
            success=False,
            error_message=error_msg,
            error_type=type(e).__name__,
            execution_time=execution_time,
            worker_pid=os.getpid(),
        )


def make_requests(func: Callable, arg_tuples: Sequence[tuple],
                  task_prefix: str = "cpu_task",
                  kwargs: Optional[Dict[str, Any]] = None) -> List[CPUTaskRequest]:
    """为模块级函数批量创建任务请求"""
    return [
        CPUTaskRequest(
            task_id=f"{task_prefix}_{i}",
            func_name=func.__name__,
            func_module=func.__module__,
            args=tuple(args),
            kwargs=dict(kwargs or {}),
        )
        for i, args in enumerate(arg_tuples)
    ]


def run_cpu_tasks(func: Callable, arg_tuples: Sequence[tuple], jobs: int = 1,
                  task_prefix: str = "cpu_task",
                  kwargs: Optional[Dict[str, Any]] = None) -> List[CPUTaskResult]:
    """运行一批CPU任务，结果顺序与参数顺序一致

    Args:
        func: 模块级函数（子进程需可导入）
        arg_tuples: 每个任务的位置参数
        jobs: 进程数；<=1 时在当前进程执行
        task_prefix: 任务ID前缀（用于日志）
        kwargs: 所有任务共享的关键字参数

    Returns:
        List[CPUTaskResult]
    """
    requests = make_requests(func, arg_tuples, task_prefix, kwargs)
    if not requests:
        return []

    workers = min(int(jobs or 1), len(requests))
    if workers <= 1:
        return [_execute_request(req) for req in requests]

    logger = get_logger()
    logger.debug(f"启动 {workers} 个CPU工作进程，任务数: {len(requests)}")
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        results = pool.map(_execute_request, requests, chunksize=1)
    failed = sum(1 for r in results if not r.success)
    if failed:
        logger.info(f"CPU任务批次完成: {len(results) - failed} 成功, {failed} 失败")
    return results
