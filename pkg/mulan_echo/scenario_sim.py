# -*- coding: utf-8 -*-
"""
场景生成与测量合成

- shoebox_first_order：鞋盒房间一阶镜像声源（直达声 + 6 面墙各一次反射）
- synth_bandlimited_source：带限噪声源（代替语音），保证分析网格上频谱有下限
- render_offgrid：频域相位斜坡实现任意分数时延，测量精确满足 x(f) = h(f)·s(f)
- render_ongrid：与稀疏离散滤波器做 'valid' 线性卷积
- sample_smoothed_filter：sinc 平滑后的离散滤波器（基失配演示）

所有随机生成器均由种子确定，重复调用结果逐位一致。
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sp_fft
from scipy import special as sp_special

from mulan_echo.errors import InvalidInputError, NumericalFailure
from mulan_echo.fri_annihilation import EchoSet
from mulan_echo.logger_manager import get_logger
from mulan_echo.spectral_core import RealSignal, evaluate_dft_at

SeedLike = Union[int, np.random.SeedSequence, None]

DEFAULT_SOUND_SPEED = 343.0
DEFAULT_SOURCE_BAND = (150.0, 2100.0)
# 带边高斯平滑的标准差（Hz），0 表示硬掩模
DEFAULT_EDGE_WIDTH_HZ = 100.0
# 源频谱下限（相对最大值）
SPECTRAL_FLOOR = 1e-3
GRID_ON = "on-grid"
GRID_OFF = "off-grid"
ROOM_DIMS_LOW = (4.0, 6.0, 8.0)
ROOM_DIMS_HIGH = (5.0, 7.0, 9.0)
_WALL_MARGIN = 0.5
_MIN_SOURCE_DISTANCE = 1.0
_PAD_EXTRA = 1024


def _rng(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class ShoeboxSpec:
    """鞋盒房间几何与吸声参数"""
    room_dims: np.ndarray
    source_pos: np.ndarray
    mic_pos: np.ndarray
    absorption: float = 0.2
    sound_speed: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        dims = np.asarray(self.room_dims, dtype=np.float64).reshape(-1)
        src = np.asarray(self.source_pos, dtype=np.float64).reshape(-1)
        mics = np.atleast_2d(np.asarray(self.mic_pos, dtype=np.float64))
        if dims.size != 3 or src.size != 3 or mics.shape[1] != 3:
            raise InvalidInputError("房间尺寸与位置都必须是三维坐标")
        if np.any(dims <= 0):
            raise InvalidInputError(f"房间尺寸必须为正: {dims}")
        for name, pos in [("声源", src)] + [(f"麦克风{m}", p) for m, p in enumerate(mics)]:
            if np.any(pos <= 0) or np.any(pos >= dims):
                raise InvalidInputError(f"{name}位置 {pos} 不在房间内部")
        if not 0 <= float(self.absorption) < 1:
            raise InvalidInputError(f"吸声系数必须位于 [0, 1): {self.absorption}")
        if not float(self.sound_speed) > 0:
            raise InvalidInputError(f"声速必须为正: {self.sound_speed}")
        object.__setattr__(self, "room_dims", dims)
        object.__setattr__(self, "source_pos", src)
        object.__setattr__(self, "mic_pos", mics)
        object.__setattr__(self, "absorption", float(self.absorption))
        object.__setattr__(self, "sound_speed", float(self.sound_speed))

    @property
    def n_mics(self) -> int:
        return int(self.mic_pos.shape[0])

    def to_dict(self) -> dict:
        return {
            "room_dims": self.room_dims.tolist(),
            "source_pos": self.source_pos.tolist(),
            "mic_pos": self.mic_pos.tolist(),
            "absorption": self.absorption,
            "sound_speed": self.sound_speed,
        }


@dataclass(eq=False)
class EchoScenario:
    """一次实验的真值与测量"""
    echoes: List[EchoSet]
    source: RealSignal
    measurements: List[RealSignal]
    grid_type: str
    # 权重全局缩放因子（未缩放为 1.0）
    weight_scale: float = 1.0
    seed: Optional[int] = None
    # 栅格场景下的真实稀疏滤波器
    filters: Optional[List[np.ndarray]] = None
    room: Optional[ShoeboxSpec] = None

    def __post_init__(self):
        if len(self.echoes) < 1 or len(self.echoes) != len(self.measurements):
            raise InvalidInputError("通道数必须 ≥ 1 且真值与测量一致")
        counts = {e.n_echoes for e in self.echoes}
        if len(counts) != 1:
            raise InvalidInputError(f"各通道回声数不一致: {sorted(counts)}")
        lengths = {m.length for m in self.measurements}
        if len(lengths) != 1:
            raise InvalidInputError(f"各通道测量长度不一致: {sorted(lengths)}")

    @property
    def n_channels(self) -> int:
        return len(self.echoes)

    @property
    def n_echoes(self) -> int:
        return self.echoes[0].n_echoes

    @property
    def sample_rate(self) -> float:
        return self.source.sample_rate

    @property
    def true_filter_length(self) -> int:
        """覆盖所有回声所需的离散滤波器长度"""
        if self.filters is not None:
            return int(max(f.size for f in self.filters))
        max_delay = max(float(e.delays.max()) for e in self.echoes)
        return int(math.ceil(max_delay * self.sample_rate)) + 1


def _image_positions(spec: ShoeboxSpec) -> Tuple[np.ndarray, np.ndarray]:
    """直达声源 + 6 个一阶镜像源的位置与反射次数"""
    src = spec.source_pos
    images = [src.copy()]
    bounces = [0]
    for axis in range(3):
        low = src.copy()
        low[axis] = -src[axis]
        high = src.copy()
        high[axis] = 2.0 * spec.room_dims[axis] - src[axis]
        images.extend([low, high])
        bounces.extend([1, 1])
    return np.vstack(images), np.asarray(bounces)


def shoebox_first_order(spec: ShoeboxSpec) -> List[EchoSet]:
    """每个麦克风 7 个回声：时延 = 距离/声速，权重 = ρ^b/距离，ρ = sqrt(1-吸声系数)"""
    images, bounces = _image_positions(spec)
    rho = math.sqrt(1.0 - spec.absorption)
    echoes = []
    for m, mic in enumerate(spec.mic_pos):
        dist = np.linalg.norm(images - mic[None, :], axis=1)
        if np.any(dist <= 0):
            raise InvalidInputError(f"麦克风{m}与声源重合")
        echoes.append(EchoSet.from_unsorted(dist / spec.sound_speed, rho ** bounces / dist))
    return echoes


def rescale_weights(echoes: Sequence[EchoSet]) -> Tuple[List[EchoSet], float]:
    """权重超过 1 时按最大权重整体缩放，返回 (回声, 缩放因子)"""
    peak = max(float(e.weights.max()) for e in echoes if e.n_echoes)
    if peak <= 1.0:
        return list(echoes), 1.0
    scale = 1.0 / peak
    get_logger().info(f"真值权重最大为 {peak:.4g}，整体缩放 {scale:.4g}")
    return [EchoSet(e.delays, e.weights * scale) for e in echoes], scale


def random_room(rng: np.random.Generator, n_mics: int = 2, absorption: float = 0.2,
                dims_low: Sequence[float] = ROOM_DIMS_LOW,
                dims_high: Sequence[float] = ROOM_DIMS_HIGH,
                sound_speed: float = DEFAULT_SOUND_SPEED) -> ShoeboxSpec:
    """随机鞋盒房间；声源与麦克风离墙至少 0.5 m，相互距离至少 1 m"""
    dims = rng.uniform(dims_low, dims_high)
    lo, hi = _WALL_MARGIN, dims - _WALL_MARGIN
    source = rng.uniform(lo, hi)
    mics = []
    while len(mics) < n_mics:
        mic = rng.uniform(lo, hi)
        if np.linalg.norm(mic - source) >= _MIN_SOURCE_DISTANCE:
            mics.append(mic)
    return ShoeboxSpec(dims, source, np.vstack(mics), absorption, sound_speed)


def random_offgrid_echoes(n_channels: int, n_echoes: int, sample_rate: float,
                          max_delay: float, rng: np.random.Generator,
                          weight_range: Tuple[float, float] = (0.1, 1.0)) -> List[EchoSet]:
    """随机离栅回声：时延在 [0, max_delay) 均匀分布且两两相距至少一个采样周期"""
    min_sep = 1.0 / float(sample_rate)
    if n_echoes * min_sep >= max_delay:
        raise InvalidInputError(f"max_delay={max_delay} 放不下 {n_echoes} 个回声")
    echoes = []
    for _ in range(int(n_channels)):
        while True:
            delays = np.sort(rng.uniform(0.0, max_delay, int(n_echoes)))
            if n_echoes < 2 or np.min(np.diff(delays)) >= min_sep:
                break
        weights = rng.uniform(weight_range[0], weight_range[1], int(n_echoes))
        echoes.append(EchoSet(delays, weights))
    return echoes


def quiet_margin(sample_rate: float, edge_width_hz: float) -> int:
    """高斯带边对应的时域拖尾长度（衰减到 1e-13 以下）"""
    if edge_width_hz <= 0:
        return 0
    sigma_t = float(sample_rate) / (2.0 * math.pi * float(edge_width_hz))
    return int(math.ceil(8.0 * sigma_t)) + 1


def _band_mask(freqs: np.ndarray, band: Tuple[float, float], edge_width_hz: float) -> np.ndarray:
    """矩形带通与高斯（标准差 edge_width_hz）的卷积，时域核带高斯包络

    正负频率两侧叠加，使掩模在 f=0 处也光滑。
    """
    f_lo, f_hi = band
    if edge_width_hz <= 0:
        return ((freqs >= f_lo) & (freqs <= f_hi)).astype(np.float64)
    scale = math.sqrt(2.0) * float(edge_width_hz)

    def one_side(f: np.ndarray) -> np.ndarray:
        return 0.5 * (sp_special.erf((f - f_lo) / scale) - sp_special.erf((f - f_hi) / scale))

    return one_side(freqs) + one_side(-freqs)


def source_floor_ok(signal: RealSignal, band: Tuple[float, float],
                    floor: float = SPECTRAL_FLOOR) -> bool:
    """在带内稠密频点上检查 min|s| ≥ floor·max|s|"""
    f_lo, f_hi = band
    n_check = max(64, int(math.ceil(4.0 * (f_hi - f_lo) * signal.length / signal.sample_rate)))
    mags = np.abs(evaluate_dft_at(signal, np.linspace(f_lo, f_hi, n_check)))
    return bool(mags.max() > 0 and mags.min() >= floor * mags.max())


def synth_bandlimited_source(N: int, sample_rate: float,
                             band: Tuple[float, float] = DEFAULT_SOURCE_BAND,
                             seed: SeedLike = None,
                             edge_width_hz: float = DEFAULT_EDGE_WIDTH_HZ,
                             max_tries: int = 50) -> RealSignal:
    """带限噪声源：时间受限的白噪声经频域掩模滤波

    噪声只占中间部分，两端各留 quiet_margin 个采样的静音区，
    使源在长度 N 内完整包含（拖尾低于 1e-13）。频谱下限不满足时重新生成。
    """
    N = int(N)
    f_lo, f_hi = (float(band[0]), float(band[1]))
    if not 0 < f_lo < f_hi < 0.5 * sample_rate:
        raise InvalidInputError(f"频带无效: [{f_lo}, {f_hi}]，Fs/2 = {0.5 * sample_rate}")
    lead = quiet_margin(sample_rate, edge_width_hz)
    active = N - 2 * lead
    if active < 16:
        raise InvalidInputError(f"N={N} 太短，静音区共需 {2 * lead} 个采样")

    padded = sp_fft.next_fast_len(2 * N)
    mask = _band_mask(sp_fft.rfftfreq(padded, 1.0 / sample_rate), (f_lo, f_hi), edge_width_hz)
    rng = _rng(seed)
    for attempt in range(1, int(max_tries) + 1):
        noise = np.zeros(padded)
        noise[lead:lead + active] = rng.standard_normal(active)
        samples = sp_fft.irfft(sp_fft.rfft(noise) * mask, padded)[:N]
        samples /= np.max(np.abs(samples))
        signal = RealSignal(samples, sample_rate)
        if source_floor_ok(signal, (f_lo, f_hi)):
            if attempt > 1:
                get_logger().debug(f"源信号第 {attempt} 次生成满足频谱下限")
            return signal
    raise NumericalFailure(f"{max_tries} 次尝试后源信号仍不满足频谱下限")


def render_offgrid(source: RealSignal, echoes: Sequence[EchoSet], N: int) -> List[RealSignal]:
    """x_m(n) = Σ_k c_{m,k}·s(n - Fs·τ_{m,k})，n = 0..N-1

    分数时延通过补零后的频域相位斜坡 exp(-2πi·f·τ) 实现。
    """
    N = int(N)
    fs = source.sample_rate
    all_delays = np.concatenate([e.delays for e in echoes]) if echoes else np.zeros(0)
    if all_delays.size and all_delays.min() < 0:
        raise InvalidInputError("时延必须非负")
    max_shift = float(all_delays.max()) * fs if all_delays.size else 0.0
    if source.length + math.ceil(max_shift) > N:
        raise InvalidInputError(
            f"源长度 {source.length} + 最大时延 {max_shift:.1f} 个采样超出测量长度 N={N}")

    padded = sp_fft.next_fast_len(max(N, source.length) + int(math.ceil(max_shift)) + _PAD_EXTRA)
    if max_shift >= padded:
        raise InvalidInputError("时延超出补零窗口")
    spectrum = sp_fft.rfft(source.samples, padded)
    freqs = sp_fft.rfftfreq(padded, 1.0 / fs)
    outputs = []
    for e in echoes:
        response = np.exp(-2j * np.pi * np.outer(freqs, e.delays)) @ e.weights
        outputs.append(RealSignal(sp_fft.irfft(spectrum * response, padded)[:N], fs))
    return outputs


def render_ongrid(source: RealSignal, sparse_filters: Sequence[np.ndarray]) -> List[RealSignal]:
    """x_m = ĥ_m ⋆ ŝ（'valid' 卷积，输出长度 len(ŝ) - L + 1，L 为最长滤波器）"""
    filters = [np.asarray(f, dtype=np.float64).reshape(-1) for f in sparse_filters]
    if not filters:
        raise InvalidInputError("至少需要一个滤波器")
    L = max(f.size for f in filters)
    if L > source.length:
        raise InvalidInputError(f"滤波器长度 {L} 超过源长度 {source.length}")
    outputs = []
    for f in filters:
        padded = np.zeros(L)
        padded[:f.size] = f
        outputs.append(RealSignal(np.convolve(source.samples, padded, mode="valid"),
                                  source.sample_rate))
    return outputs


def sample_smoothed_filter(echoes: EchoSet, sample_rate: float, L: int) -> np.ndarray:
    """ĥ(n) = Σ_k c_k·sinc(n - Fs·τ_k)，n = 0..L-1"""
    L = int(L)
    if L < 1:
        raise InvalidInputError(f"滤波器长度 L 必须 ≥ 1: {L}")
    n = np.arange(L, dtype=np.float64)
    return np.sinc(n[:, None] - float(sample_rate) * echoes.delays[None, :]) @ echoes.weights


def make_offgrid_scenario(echoes: Sequence[EchoSet], N: int, sample_rate: float,
                          seed: SeedLike = None,
                          band: Tuple[float, float] = DEFAULT_SOURCE_BAND,
                          room: Optional[ShoeboxSpec] = None,
                          weight_scale: float = 1.0,
                          source: Optional[RealSignal] = None) -> EchoScenario:
    """给定真值回声渲染离栅测量；未提供源时生成恰好容纳最大时延的带限噪声源"""
    if source is None:
        max_delay = max(float(e.delays.max()) for e in echoes)
        source_len = int(N) - int(math.ceil(max_delay * sample_rate)) - 1
        source = synth_bandlimited_source(source_len, sample_rate, band, seed)
    elif source.sample_rate != float(sample_rate):
        raise InvalidInputError(f"源采样率 {source.sample_rate} 与 Fs={sample_rate} 不一致")
    measurements = render_offgrid(source, echoes, N)
    return EchoScenario(list(echoes), source, measurements, GRID_OFF,
                        weight_scale=weight_scale,
                        seed=seed if isinstance(seed, int) else None, room=room)


def make_shoebox_scenario(n_mics: int, N: int, sample_rate: float, seed: int,
                          absorption: float = 0.2,
                          band: Tuple[float, float] = DEFAULT_SOURCE_BAND,
                          sound_speed: float = DEFAULT_SOUND_SPEED) -> EchoScenario:
    """随机鞋盒房间 + 一阶镜像源的离栅场景（K=7）"""
    room_seed, source_seed = np.random.SeedSequence(int(seed)).spawn(2)
    room = random_room(_rng(room_seed), n_mics, absorption, sound_speed=sound_speed)
    echoes, scale = rescale_weights(shoebox_first_order(room))
    scenario = make_offgrid_scenario(echoes, N, sample_rate, source_seed, band, room, scale)
    scenario.seed = int(seed)
    return scenario


def make_random_offgrid_scenario(n_channels: int, n_echoes: int, N: int, sample_rate: float,
                                 seed: int, max_delay: float = 0.05,
                                 band: Tuple[float, float] = DEFAULT_SOURCE_BAND) -> EchoScenario:
    """随机时延/权重的离栅场景（用于 K/M/F 扫描）"""
    echo_seed, source_seed = np.random.SeedSequence(int(seed)).spawn(2)
    echoes = random_offgrid_echoes(n_channels, n_echoes, sample_rate, max_delay, _rng(echo_seed))
    scenario = make_offgrid_scenario(echoes, N, sample_rate, source_seed, band)
    scenario.seed = int(seed)
    return scenario


def make_ongrid_scenario(n_channels: int, n_echoes: int, N: int, sample_rate: float,
                         seed: int, max_length: Optional[int] = None,
                         band: Tuple[float, float] = DEFAULT_SOURCE_BAND,
                         weight_range: Tuple[float, float] = (0.1, 1.0)) -> EchoScenario:
    """K 个非零抽头的稀疏离散滤波器与源做 'valid' 卷积（栅格场景）

    源信号只在 [L-1, N-1] 内非零，使每个整数时延的副本都完整落在测量窗口内。
    """
    max_length = int(max_length or round(0.05 * sample_rate))
    if n_echoes > max_length:
        raise InvalidInputError(f"K={n_echoes} 超过滤波器最大长度 {max_length}")
    filt_seed, source_seed = np.random.SeedSequence(int(seed)).spawn(2)
    rng = _rng(filt_seed)
    filters, echoes = [], []
    for _ in range(int(n_channels)):
        taps = np.sort(rng.choice(max_length, size=int(n_echoes), replace=False))
        weights = rng.uniform(weight_range[0], weight_range[1], int(n_echoes))
        h = np.zeros(int(taps.max()) + 1)
        h[taps] = weights
        filters.append(h)
        echoes.append(EchoSet(taps / float(sample_rate), weights))
    L = max(f.size for f in filters)
    core = synth_bandlimited_source(int(N) - L + 1, sample_rate, band, source_seed)
    padded = RealSignal(np.concatenate([np.zeros(L - 1), core.samples, np.zeros(L - 1)]),
                        sample_rate)
    measurements = render_ongrid(padded, filters)
    # 记录的源以 core 为时间原点：x_m(n) = Σ_j ĥ_m(j)·core(n - j)
    return EchoScenario(echoes, core, measurements, GRID_ON, seed=int(seed),
                        filters=filters)


def read_wav_source(path: str, expected_rate: float) -> RealSignal:
    """读取单声道 WAV（PCM16 或 float32）作为源信号，采样率必须一致"""
    import soundfile as sf

    info = sf.info(path)
    if info.channels != 1:
        raise InvalidInputError(f"WAV 必须为单声道，实际 {info.channels} 声道: {path}")
    if info.subtype not in ("PCM_16", "FLOAT"):
        raise InvalidInputError(f"不支持的 WAV 编码 {info.subtype}: {path}")
    if float(info.samplerate) != float(expected_rate):
        raise InvalidInputError(
            f"WAV 采样率 {info.samplerate} 与配置 {expected_rate} 不一致（不做重采样）")
    data, rate = sf.read(path, dtype="float64", always_2d=True)
    return RealSignal(data[:, 0], float(rate))
