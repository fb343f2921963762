# -*- coding: utf-8 -*-
"""
场景与结果的文件格式

- 测量文件：小端二进制，固定头（magic、版本、M、N、Fs、配置哈希）+ M×N float64
- 真值 / 结果 / 报告：UTF-8 JSON，回声为每通道 [{delay_s, weight}, ...]
- 试验 CSV：每行一个试验并带配置哈希，续跑时只复用哈希相同的 (格子, 试验)
"""
from __future__ import annotations

import csv
import json
import os
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from mulan_echo.errors import InvalidInputError
from mulan_echo.fri_annihilation import EchoSet
from mulan_echo.spectral_core import RealSignal

MEASUREMENT_MAGIC = b"MULANMEA"
FORMAT_VERSION = 1

HEADER_DTYPE = np.dtype([
    ("magic", "S8"),
    ("version", "<u4"),
    ("channels", "<u4"),
    ("length", "<u8"),
    ("sample_rate", "<f8"),
    ("config_hash", "S64"),
])
_SAMPLE_DTYPE = np.dtype("<f8")

TRIAL_FIELDS = [
    "cell", "trial", "seed", "K", "M", "F", "solver", "config_hash",
    "location_rmse", "weight_rmse", "location_success", "weight_success",
    "cost", "iterations", "wall_time_s", "error",
]


def _ensure_parent(path: str) -> str:
    path = os.path.abspath(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def write_measurements(path: str, signals: Sequence[RealSignal], config_hash: str = "") -> str:
    """写入 M 个等长、同采样率的测量"""
    if not signals:
        raise InvalidInputError("没有可写入的测量")
    lengths = {s.length for s in signals}
    rates = {s.sample_rate for s in signals}
    if len(lengths) != 1 or len(rates) != 1:
        raise InvalidInputError("所有通道的长度与采样率必须一致")
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = MEASUREMENT_MAGIC
    header["version"] = FORMAT_VERSION
    header["channels"] = len(signals)
    header["length"] = lengths.pop()
    header["sample_rate"] = rates.pop()
    header["config_hash"] = config_hash.encode("ascii")
    data = np.vstack([s.samples for s in signals]).astype(_SAMPLE_DTYPE)
    path = _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(data.tobytes())
    return path


def read_measurements(path: str) -> Tuple[List[RealSignal], Dict[str, Any]]:
    """读取测量文件，返回 (信号列表, 头信息)"""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise InvalidInputError(f"测量文件过短: {path}")
    header = np.frombuffer(raw[:HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if bytes(header["magic"]) != MEASUREMENT_MAGIC:
        raise InvalidInputError(f"不是测量文件（magic 不匹配）: {path}")
    if int(header["version"]) != FORMAT_VERSION:
        raise InvalidInputError(f"不支持的测量文件版本 {int(header['version'])}: {path}")
    M, N = int(header["channels"]), int(header["length"])
    payload = raw[HEADER_DTYPE.itemsize:]
    if len(payload) != M * N * _SAMPLE_DTYPE.itemsize:
        raise InvalidInputError(f"测量文件数据长度与头信息不符: {path}")
    data = np.frombuffer(payload, dtype=_SAMPLE_DTYPE).reshape(M, N)
    fs = float(header["sample_rate"])
    meta = {
        "channels": M,
        "length": N,
        "sample_rate": fs,
        "config_hash": bytes(header["config_hash"]).decode("ascii"),
    }
    return [RealSignal(row, fs) for row in data], meta


def write_json(path: str, data: Dict[str, Any]) -> str:
    path = _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    return path


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise InvalidInputError(f"JSON 顶层必须是对象: {path}")
    return data


def echoes_to_json(echoes: Sequence[EchoSet]) -> List[list]:
    return [e.to_dict() for e in echoes]


def echoes_from_json(channels: Iterable[list]) -> List[EchoSet]:
    try:
        return [EchoSet.from_dict(items) for items in channels]
    except (KeyError, TypeError) as e:
        raise InvalidInputError(f"回声 JSON 格式错误: {e}") from None


def write_truth(path: str, echoes: Sequence[EchoSet], meta: Dict[str, Any]) -> str:
    """真值 JSON：channels + 任意元信息（grid_type、seed、config_hash 等）"""
    data = dict(meta)
    data["channels"] = echoes_to_json(echoes)
    return write_json(path, data)


def read_echo_file(path: str) -> Tuple[List[EchoSet], Dict[str, Any]]:
    """读取真值或结果 JSON，返回 (回声, 其余字段)"""
    data = read_json(path)
    if "channels" not in data:
        raise InvalidInputError(f"缺少 channels 字段: {path}")
    echoes = echoes_from_json(data.pop("channels"))
    return echoes, data


def write_result(path: str, method: str, echoes: Sequence[EchoSet], meta: Dict[str, Any]) -> str:
    data = {"method": method}
    data.update(meta)
    data["channels"] = echoes_to_json(echoes)
    return write_json(path, data)


def _csv_value(value: Any) -> Any:
    if isinstance(value, (bool, np.bool_)):
        return int(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def append_trial_rows(path: str, rows: Sequence[Dict[str, Any]]) -> str:
    """追加试验行；文件不存在时先写表头"""
    path = _ensure_parent(path)
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRIAL_FIELDS, extrasaction="ignore")
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k, "")) for k in TRIAL_FIELDS})
    return path


def _parse_number(text: str) -> Any:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_trial_rows(path: str) -> List[Dict[str, Any]]:
    """读取试验 CSV；成功标志还原为 bool，数值列还原为数字"""
    if not os.path.exists(path):
        return []
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for raw in csv.DictReader(f):
            row = {k: _parse_number(v) for k, v in raw.items() if k in TRIAL_FIELDS}
            for key in ("location_success", "weight_success"):
                row[key] = bool(row.get(key) or 0)
            row["solver"] = str(row.get("solver") or "")
            row["cell"] = str(row.get("cell") or "")
            row["error"] = str(row.get("error") or "")
            # 十六进制哈希可能形如 "12e4…"，不能按数字解析
            row["config_hash"] = raw.get("config_hash") or ""
            rows.append(row)
    return rows
