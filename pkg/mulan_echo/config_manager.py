# -*- coding: utf-8 -*-
"""
配置管理模块：负责加载、保存与提供默认配置。
配置以分节 JSON 文件持久化（scenario / analysis / solver / output / sweep），
便于手工编辑；未知的节或键直接报错，避免扫描参数拼写错误被静默忽略。
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

from mulan_echo.errors import ConfigError
from mulan_echo.mulan_solver import MulanConfig

CONFIG_FILE = "config.json"

SCENARIO_KINDS = ("shoebox", "offgrid", "ongrid")
SOLVER_METHODS = ("mulan", "cr", "lasso", "fri")


@dataclass
class ScenarioSection:
    # 场景类型：shoebox（一阶镜像源，K=7）、offgrid（随机离栅时延）、ongrid（稀疏离散滤波器）
    kind: str = "shoebox"
    seed: int = 0
    # 测量长度（采样点）与采样率，0.25 s @ 16 kHz
    N: int = 4000
    Fs: float = 16000.0
    # 通道数与每通道回声数（shoebox 固定为 7）
    M: int = 2
    K: int = 7
    absorption: float = 0.2
    sound_speed: float = 343.0
    room_dims_low: List[float] = field(default_factory=lambda: [4.0, 6.0, 8.0])
    room_dims_high: List[float] = field(default_factory=lambda: [5.0, 7.0, 9.0])
    # 源信号频带（Hz），需覆盖分析网格
    source_band: List[float] = field(default_factory=lambda: [150.0, 2100.0])
    # 离栅/栅格场景的最大时延（秒）
    max_delay_s: float = 0.05
    # 可选：单声道 WAV 源（为空则使用带限噪声）
    source_wav: str = ""


@dataclass
class AnalysisSection:
    f_min: float = 200.0
    f_max: float = 2000.0
    F: int = 401


@dataclass
class SolverSection:
    method: str = "mulan"
    n_restarts: int = 20
    max_iter: int = 1000
    conv_thresh: float = 1e-3
    rng_seed: int = 0
    renormalize_root_modulus: bool = False
    # z 只在内部频点上归一化；追加跨通道白化初值
    edge_guard: bool = True
    warm_start: bool = True
    # 基线滤波器长度；0 表示使用真值文件中的真实长度
    L: int = 0
    # LASSO 正则系数与迭代上限
    lam: float = 1e-3
    lasso_iters: int = 5000
    # 并行进程数
    jobs: int = 1

    def mulan_config(self) -> MulanConfig:
        return MulanConfig(
            n_restarts=self.n_restarts,
            max_iter=self.max_iter,
            conv_thresh=self.conv_thresh,
            rng_seed=self.rng_seed,
            renormalize_root_modulus=self.renormalize_root_modulus,
            edge_guard=self.edge_guard,
            warm_start=self.warm_start,
        )


@dataclass
class OutputSection:
    out_dir: str = "runs"
    measurement_file: str = "measurements.bin"
    source_file: str = "source.bin"
    truth_file: str = "truth.json"
    result_file: str = "result.json"
    report_file: str = "report.json"
    trials_csv: str = "trials.csv"
    enable_file_logging: bool = False
    # 为空时按配置哈希命名：<out_dir>/mulan_<哈希前12位>.log
    log_file: str = ""


@dataclass
class SweepSection:
    K_values: List[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    M_values: List[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    F_values: List[int] = field(default_factory=lambda: [201, 401])
    trials_per_cell: int = 100
    # 位置阈值（采样点）与权重阈值
    location_threshold: float = 1.0
    weight_threshold: float = 1e-2
    # table1 子命令每种场景的试验次数
    table1_trials: int = 100


@dataclass
class RunConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    solver: SolverSection = field(default_factory=SolverSection)
    output: OutputSection = field(default_factory=OutputSection)
    sweep: SweepSection = field(default_factory=SweepSection)


_SECTIONS = {
    "scenario": ScenarioSection,
    "analysis": AnalysisSection,
    "solver": SolverSection,
    "output": OutputSection,
    "sweep": SweepSection,
}


def _default_config_dict() -> Dict[str, Any]:
    return asdict(RunConfig())


def _coerce(value: Any, default: Any, path: str) -> Any:
    """按默认值的类型转换 JSON 值"""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("需要 true/false")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError("需要整数")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError("需要数值")
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError("需要字符串")
            return value
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError("需要列表")
            if default:
                return [_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value)]
            return list(value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"取值 {value!r} 无效: {e}", field=path) from None
    return value


def _build_section(name: str, data: Any):
    cls = _SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError("节必须是 JSON 对象", field=name)
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError("未知配置项", field=f"{name}.{key}")
        values[key] = _coerce(value, getattr(defaults, key), f"{name}.{key}")
    return replace(defaults, **values)


def validate_config(cfg: RunConfig) -> RunConfig:
    """校验取值范围，失败抛出带字段名的 ConfigError"""
    sc, an, so, sw = cfg.scenario, cfg.analysis, cfg.solver, cfg.sweep
    checks = [
        (sc.kind in SCENARIO_KINDS, "scenario.kind", f"必须是 {SCENARIO_KINDS} 之一"),
        (sc.N > 0, "scenario.N", "必须为正"),
        (sc.Fs > 0, "scenario.Fs", "必须为正"),
        (sc.M >= 1, "scenario.M", "必须 ≥ 1"),
        (sc.K >= 1, "scenario.K", "必须 ≥ 1"),
        (0 <= sc.absorption < 1, "scenario.absorption", "必须位于 [0, 1)"),
        (len(sc.room_dims_low) == 3 and len(sc.room_dims_high) == 3,
         "scenario.room_dims_low", "房间尺寸范围必须是三维"),
        (len(sc.source_band) == 2 and 0 < sc.source_band[0] < sc.source_band[1] < sc.Fs / 2,
         "scenario.source_band", "需要 0 < f_lo < f_hi < Fs/2"),
        (sc.max_delay_s > 0, "scenario.max_delay_s", "必须为正"),
        (0 < an.f_min < an.f_max <= sc.Fs / 2, "analysis.f_max", "需要 0 < f_min < f_max ≤ Fs/2"),
        (an.F >= 2, "analysis.F", "必须 ≥ 2"),
        (so.method in SOLVER_METHODS, "solver.method", f"必须是 {SOLVER_METHODS} 之一"),
        (so.n_restarts >= 1, "solver.n_restarts", "必须 ≥ 1"),
        (so.max_iter >= 1, "solver.max_iter", "必须 ≥ 1"),
        (0 < so.conv_thresh < 1, "solver.conv_thresh", "必须位于 (0, 1)"),
        (so.L >= 0, "solver.L", "必须 ≥ 0"),
        (so.lam >= 0, "solver.lam", "必须非负"),
        (so.lasso_iters >= 1, "solver.lasso_iters", "必须 ≥ 1"),
        (so.jobs >= 1, "solver.jobs", "必须 ≥ 1"),
        (bool(sw.K_values) and min(sw.K_values) >= 1, "sweep.K_values", "必须非空且 ≥ 1"),
        (bool(sw.M_values) and min(sw.M_values) >= 1, "sweep.M_values", "必须非空且 ≥ 1"),
        (bool(sw.F_values) and min(sw.F_values) >= 2, "sweep.F_values", "必须非空且 ≥ 2"),
        (sw.trials_per_cell >= 1, "sweep.trials_per_cell", "必须 ≥ 1"),
        (sw.table1_trials >= 1, "sweep.table1_trials", "必须 ≥ 1"),
    ]
    for ok, path, message in checks:
        if not ok:
            raise ConfigError(message, field=path)
    return cfg


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("配置顶层必须是 JSON 对象")
    sections = {}
    for name, section in data.items():
        if name not in _SECTIONS:
            raise ConfigError("未知配置节", field=name)
        sections[name] = _build_section(name, section)
    return validate_config(RunConfig(**sections))


def ensure_config_exists(path: Optional[str] = None) -> str:
    """确保配置文件存在；不存在则创建默认配置。
    返回配置文件绝对路径。
    """
    config_path = os.path.abspath(path or CONFIG_FILE)
    if not os.path.exists(config_path):
        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(_default_config_dict(), f, ensure_ascii=False, indent=2)
    return config_path


def load_config(path: Optional[str] = None) -> RunConfig:
    """从 JSON 读取配置；文件损坏时报错并给出行号（不自动重置）"""
    config_path = ensure_config_exists(path)
    with open(config_path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON 解析失败: {e.msg}", line=e.lineno) from None
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: Optional[str] = None) -> str:
    """保存配置到 JSON，返回保存路径。"""
    config_path = os.path.abspath(path or CONFIG_FILE)
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(asdict(cfg), f, ensure_ascii=False, indent=2)
    return config_path


def config_hash(cfg: RunConfig, extra: Optional[Dict[str, Any]] = None) -> str:
    """规范化 JSON（键排序）的 SHA-256，写入所有输出文件用于溯源

    只覆盖决定结果的设置：output 节与 solver.jobs 不参与。
    extra 为调用方追加的参数（如扫描实际使用的求解配置）。
    """
    data: Dict[str, Any] = asdict(cfg)
    data.pop("output")
    data["solver"].pop("jobs")
    if extra is not None:
        data = {"config": data, "extra": extra}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    method: Optional[str] = None, jobs: Optional[int] = None) -> RunConfig:
    """命令行参数覆盖配置（None 表示不覆盖）"""
    if seed is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, seed=int(seed)),
                      solver=replace(cfg.solver, rng_seed=int(seed)))
    if out is not None:
        cfg = replace(cfg, output=replace(cfg.output, out_dir=str(out)))
    if method is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, method=str(method)))
    if jobs is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, jobs=int(jobs)))
    return validate_config(cfg)
