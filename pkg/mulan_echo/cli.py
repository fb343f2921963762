# -*- coding: utf-8 -*-
"""
命令行入口：simulate / solve / eval / bench / table1

退出码：0 成功；1 用法、配置或输入错误；2 数值失败。
所有输出文件都写入配置哈希用于溯源。
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from mulan_echo.config_manager import RunConfig, apply_overrides, config_hash, load_config
from mulan_echo.errors import ConfigError, InvalidInputError, NumericalFailure
from mulan_echo.eval_harness import (
    SweepSpec,
    match_and_rmse,
    run_method,
    run_sweep,
    run_table1,
    success_rate,
)
from mulan_echo.logger_manager import (
    enable_console_logging,
    enable_file_logging,
    get_logger,
    run_log_path,
    set_run_id,
)
from mulan_echo.performance_monitor import PerformanceTimer
from mulan_echo.scenario_io import (
    append_trial_rows,
    read_echo_file,
    read_measurements,
    write_json,
    write_measurements,
    write_result,
    write_truth,
)
from mulan_echo.scenario_sim import (
    EchoScenario,
    make_offgrid_scenario,
    make_ongrid_scenario,
    random_offgrid_echoes,
    random_room,
    read_wav_source,
    rescale_weights,
    shoebox_first_order,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
SHOEBOX_ECHOES = 7


class UsageError(Exception):
    """命令行用法错误"""


class _Parser(argparse.ArgumentParser):
    # argparse 默认以退出码 2 退出，这里统一为 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output.out_dir, name)


def build_scenario(cfg: RunConfig) -> EchoScenario:
    """按配置生成场景；shoebox 固定 K=7"""
    sc = cfg.scenario
    band = tuple(sc.source_band)
    if sc.kind == "ongrid":
        if sc.source_wav:
            raise ConfigError("栅格场景不支持 WAV 源", field="scenario.source_wav")
        return make_ongrid_scenario(sc.M, sc.K, sc.N, sc.Fs, sc.seed,
                                    max_length=int(round(sc.max_delay_s * sc.Fs)), band=band)

    room_seed, source_seed = np.random.SeedSequence(int(sc.seed)).spawn(2)
    rng = np.random.default_rng(room_seed)
    room, scale = None, 1.0
    if sc.kind == "shoebox":
        room = random_room(rng, sc.M, sc.absorption, sc.room_dims_low, sc.room_dims_high,
                           sc.sound_speed)
        echoes, scale = rescale_weights(shoebox_first_order(room))
    else:
        echoes = random_offgrid_echoes(sc.M, sc.K, sc.Fs, sc.max_delay_s, rng)
    source = read_wav_source(sc.source_wav, sc.Fs) if sc.source_wav else None
    scenario = make_offgrid_scenario(echoes, sc.N, sc.Fs, source_seed, band, room, scale,
                                     source=source)
    scenario.seed = int(sc.seed)
    return scenario


def cmd_simulate(cfg: RunConfig) -> int:
    chash = config_hash(cfg)
    scenario = build_scenario(cfg)
    meas_path = write_measurements(_out_path(cfg, cfg.output.measurement_file),
                                   scenario.measurements, chash)
    write_measurements(_out_path(cfg, cfg.output.source_file), [scenario.source], chash)
    meta = {
        "config_hash": chash,
        "grid_type": scenario.grid_type,
        "kind": cfg.scenario.kind,
        "seed": scenario.seed,
        "sample_rate": scenario.sample_rate,
        "n_echoes": scenario.n_echoes,
        "filter_length": scenario.true_filter_length,
        "weight_scale": scenario.weight_scale,
        "room": scenario.room.to_dict() if scenario.room is not None else None,
    }
    truth_path = write_truth(_out_path(cfg, cfg.output.truth_file), scenario.echoes, meta)
    print(f"✓ 测量: {meas_path}")
    print(f"✓ 真值: {truth_path}")
    return EXIT_OK


def _expected_echoes(cfg: RunConfig, truth_meta: Optional[dict]) -> int:
    if cfg.scenario.kind == "shoebox":
        return SHOEBOX_ECHOES
    if truth_meta and truth_meta.get("n_echoes"):
        return int(truth_meta["n_echoes"])
    return int(cfg.scenario.K)


def cmd_solve(cfg: RunConfig) -> int:
    chash = config_hash(cfg)
    method = cfg.solver.method
    measurements, header = read_measurements(_out_path(cfg, cfg.output.measurement_file))
    if header["sample_rate"] != cfg.scenario.Fs:
        raise InvalidInputError(
            f"测量采样率 {header['sample_rate']} 与配置 Fs={cfg.scenario.Fs} 不一致")

    truth_meta = None
    truth_path = _out_path(cfg, cfg.output.truth_file)
    if os.path.exists(truth_path):
        _, truth_meta = read_echo_file(truth_path)
    K = _expected_echoes(cfg, truth_meta)

    L = cfg.solver.L or None
    if method in ("cr", "lasso") and L is None:
        if truth_meta is None or not truth_meta.get("filter_length"):
            raise ConfigError(f"方法 {method} 需要滤波器长度（solver.L 或真值文件）",
                              field="solver.L")
        L = int(truth_meta["filter_length"])

    source = None
    if method == "fri":
        source_path = _out_path(cfg, cfg.output.source_file)
        if not os.path.exists(source_path):
            raise ConfigError(f"方法 fri 需要源文件 {source_path}", field="output.source_file")
        source = read_measurements(source_path)[0][0]

    outcome = run_method(method, measurements, K, cfg, L=L, source=source, jobs=cfg.solver.jobs)
    meta = {
        "config_hash": chash,
        "measurement_config_hash": header["config_hash"],
        "final_cost": outcome.cost,
        "iterations": outcome.iterations,
        "wall_time_s": outcome.wall_time_s,
    }
    meta.update(outcome.extra)
    path = write_result(_out_path(cfg, cfg.output.result_file), method, outcome.echoes, meta)
    print(f"✓ 结果({method}): {path}，耗时 {outcome.wall_time_s:.2f}s")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, truth_paths: Optional[List[str]] = None,
             result_paths: Optional[List[str]] = None) -> int:
    chash = config_hash(cfg)
    truth_paths = truth_paths or [_out_path(cfg, cfg.output.truth_file)]
    result_paths = result_paths or [_out_path(cfg, cfg.output.result_file)]
    if len(truth_paths) != len(result_paths):
        raise UsageError(f"真值文件 {len(truth_paths)} 个与结果文件 {len(result_paths)} 个不匹配")
    th = cfg.sweep
    reports, rows = [], []
    for i, (tp, rp) in enumerate(zip(truth_paths, result_paths)):
        truth, truth_meta = read_echo_file(tp)
        estimate, result_meta = read_echo_file(rp)
        fs = float(truth_meta.get("sample_rate", cfg.scenario.Fs))
        report = match_and_rmse(estimate, truth, fs, th.location_threshold, th.weight_threshold)
        reports.append(report)
        rows.append({"cell": "eval", "trial": i, "seed": truth_meta.get("seed", ""),
                     "K": truth[0].n_echoes, "M": len(truth), "F": cfg.analysis.F,
                     "solver": result_meta.get("method", ""), "config_hash": chash,
                     "location_rmse": report.location_rmse, "weight_rmse": report.weight_rmse,
                     "location_success": report.location_success,
                     "weight_success": report.weight_success,
                     "cost": result_meta.get("final_cost", ""),
                     "iterations": result_meta.get("iterations", ""),
                     "wall_time_s": result_meta.get("wall_time_s", "")})

    rate, wrmse = success_rate(reports)
    summary = {
        "config_hash": chash,
        "location_rate": rate,
        "weight_rmse_successes": wrmse,
        "reports": [r.to_dict() for r in reports],
    }
    write_json(_out_path(cfg, cfg.output.report_file), summary)
    append_trial_rows(_out_path(cfg, cfg.output.trials_csv), rows)
    wtext = "-" if wrmse is None else f"{wrmse:.3e}"
    print(f"位置完全恢复比例: {rate:.0%} ({sum(r.location_success for r in reports)}/{len(reports)})"
          f"，成功试验权重RMSE: {wtext}")
    return EXIT_OK


def _write_rates_csv(path: str, result) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "M", "F", "location_rate", "weight_rate", "config_hash"])
        for K, M, F in sorted(result.location_rates):
            writer.writerow([K, M, F, result.location_rates[(K, M, F)],
                             result.weight_rates[(K, M, F)], result.config_hash])


def cmd_bench(cfg: RunConfig, trials: Optional[int] = None) -> int:
    spec = SweepSpec.from_config(cfg)
    if trials:
        spec.trials_per_cell = int(trials)
    os.makedirs(cfg.output.out_dir, exist_ok=True)
    with PerformanceTimer("扫描", warn_after_s=3600.0):
        result = run_sweep(spec, cfg.solver.mulan_config(), cfg,
                           csv_path=_out_path(cfg, "sweep_trials.csv"), jobs=cfg.solver.jobs)
    summary = result.summary()
    write_json(_out_path(cfg, "sweep_summary.json"), summary)
    _write_rates_csv(_out_path(cfg, "sweep_rates.csv"), result)
    print(f"✓ 扫描完成: {len(result.location_rates)} 个格子，{len(result.rows)} 个试验")
    return EXIT_OK


def cmd_table1(cfg: RunConfig, trials: Optional[int] = None) -> int:
    n_trials = int(trials or cfg.sweep.table1_trials)
    os.makedirs(cfg.output.out_dir, exist_ok=True)
    out = run_table1(n_trials, cfg, jobs=cfg.solver.jobs,
                     csv_path=_out_path(cfg, "table1_trials.csv"))
    write_json(_out_path(cfg, "table1.json"),
               {"config_hash": config_hash(cfg), "trials": n_trials, "table": out["table"]})
    for grid_type, methods in out["table"].items():
        for method, cell in methods.items():
            w = cell["weight_rmse"]
            print(f"{grid_type:9s} {method:6s} 成功率 {cell['location_rate']:6.1%} "
                  f"权重RMSE {'-' if w is None else f'{w:.2e}'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="配置文件路径（默认 ./config.json）")
    common.add_argument("--seed", type=int, default=None, help="覆盖场景与求解器种子")
    common.add_argument("--out", default=None, help="输出目录")
    common.add_argument("--method", choices=["mulan", "cr", "lasso", "fri"], default=None)
    common.add_argument("--jobs", type=int, default=None, help="并行进程数")
    common.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")

    parser = _Parser(prog="mulan", description="多通道湮灭盲回声恢复")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("simulate", parents=[common], help="生成场景与测量文件")
    sub.add_parser("solve", parents=[common], help="从测量文件恢复回声")
    p_eval = sub.add_parser("eval", parents=[common], help="比较结果与真值")
    p_eval.add_argument("--truth", nargs="+", default=None)
    p_eval.add_argument("--result", nargs="+", default=None)
    p_bench = sub.add_parser("bench", parents=[common], help="K/M/F 扫描")
    p_bench.add_argument("--trials", type=int, default=None, help="覆盖每格试验数")
    p_table = sub.add_parser("table1", parents=[common], help="栅格/离栅方法对比")
    p_table.add_argument("--trials", type=int, default=None, help="覆盖每种场景试验数")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logger = get_logger()
    try:
        args = build_parser().parse_args(argv)
        enable_console_logging(logging.DEBUG if args.verbose else logging.INFO)
        cfg = apply_overrides(load_config(args.config), seed=args.seed, out=args.out,
                              method=args.method, jobs=args.jobs)
        chash = config_hash(cfg)
        set_run_id(chash)
        if cfg.output.enable_file_logging:
            enable_file_logging(True, cfg.output.log_file or run_log_path(cfg.output.out_dir, chash))

        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.truth, args.result)
        if args.command == "bench":
            return cmd_bench(cfg, args.trials)
        return cmd_table1(cfg, args.trials)
    except UsageError as e:
        print(f"用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidInputError) as e:
        logger.error(f"配置或输入错误: {e}")
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        logger.error(f"文件错误: {e}")
        return EXIT_USAGE
    except NumericalFailure as e:
        logger.error(f"数值失败: {e}")
        return EXIT_NUMERICAL
