# -*- coding: utf-8 -*-
"""
多通道湮灭盲回声恢复 - 主入口
用法示例：
    python main_mulan.py simulate --config config.json --seed 7 --out runs/s7
    python main_mulan.py solve --out runs/s7 --method mulan --jobs 4
    python main_mulan.py eval --out runs/s7
    python main_mulan.py bench --out runs/sweep --jobs 8
"""
from __future__ import annotations

import sys

from mulan_echo.cli import main


if __name__ == "__main__":
    # spawn 进程池的入口保护
    import multiprocessing
    multiprocessing.freeze_support()

    sys.exit(main())
