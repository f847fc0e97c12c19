"""
Prediction-error and single-stream link metrics: NMSE, RMSE, per-frame and ergodic capacity,
outage probability and active-tap-normalized capacity.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from utils.errors import ArgumentError, UndefinedReferenceError

logger = logging.getLogger(__name__)

NMSE_FLOOR_DB = -300.0
DEFAULT_ACTIVE_FRACTION = 0.99
_COVER_RTOL = 1e-12


@dataclass
class LinkParams:
    snr_linear: float
    target_rate: float = 0.0

    def __post_init__(self):
        if not self.snr_linear >= 0:
            raise ArgumentError("snr_linear must be >= 0")
        if not self.target_rate >= 0:
            raise ArgumentError("target_rate must be >= 0")

    @classmethod
    def from_db(cls, snr_db: float, target_rate: float = 0.0) -> "LinkParams":
        return cls(snr_linear=db_to_linear(snr_db), target_rate=target_rate)


@dataclass
class MetricReport:
    nmse_db: float
    rmse: float
    ergodic_capacity: float
    outage: float
    active_tap_capacity: float
    config: Dict[str, object] = field(default_factory=dict)


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def _flatten_pair(preds, truths):
    if len(preds) != len(truths):
        raise ArgumentError(f"{len(preds)} predictions against {len(truths)} truths")
    if len(preds) == 0:
        raise ArgumentError("metric needs at least one sample")
    p = np.concatenate([np.ravel(np.asarray(x)) for x in preds])
    t = np.concatenate([np.ravel(np.asarray(x)) for x in truths])
    if p.shape != t.shape:
        raise ArgumentError("prediction and truth samples differ in size")
    return p, t


def nmse_db(preds: Sequence, truths: Sequence) -> float:
    """NMSE (dB) = 10·log₁₀(Σ‖x̂−x‖² / Σ‖x‖²), chặn dưới ở −300 dB khi dự đoán chính xác"""
    p, t = _flatten_pair(preds, truths)
    den = float(np.sum(np.abs(t) ** 2))
    if den == 0.0:
        raise UndefinedReferenceError("NMSE is undefined against an all-zero reference")
    num = float(np.sum(np.abs(p - t) ** 2))
    if num == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(num / den), NMSE_FLOOR_DB)


def rmse(preds: Sequence, truths: Sequence) -> float:
    """RMSE = √((1/I)·Σ‖x̂_i − x_i‖²) với I là số mẫu"""
    _flatten_pair(preds, truths)
    total = sum(float(np.sum(np.abs(np.asarray(p) - np.asarray(t)) ** 2)) for p, t in zip(preds, truths))
    return math.sqrt(total / len(preds))


def _check_rho(rho: float):
    if not rho >= 0:
        raise ArgumentError("SNR must be >= 0")


def frame_capacity(H: np.ndarray, rho: float) -> float:
    """Dung lượng một frame: trung bình log₂(1 + ρ|H|²) trên mọi bin"""
    _check_rho(rho)
    H = np.asarray(H)
    if H.size == 0:
        raise ArgumentError("frame has no bins")
    return float(np.mean(np.log2(1.0 + rho * np.abs(H) ** 2)))


def ergodic_capacity(frames: Sequence[np.ndarray], rho: float) -> float:
    """Dung lượng ergodic: trung bình dung lượng các frame"""
    if len(frames) == 0:
        raise ArgumentError("ergodic capacity needs at least one frame")
    return float(np.mean([frame_capacity(H, rho) for H in frames]))


def outage_probability(frames: Sequence[np.ndarray], rho: float, target_rate: float) -> float:
    """Tỉ lệ frame có dung lượng nhỏ hơn hẳn R₀"""
    if len(frames) == 0:
        raise ArgumentError("outage needs at least one frame")
    if not target_rate >= 0:
        raise ArgumentError("target rate must be >= 0")
    caps = np.array([frame_capacity(H, rho) for H in frames])
    return float(np.mean(caps < target_rate))


def outage_curve(frames: Sequence[np.ndarray], rho: float, rates: Sequence[float]) -> List[float]:
    """Xác suất outage cho từng R₀ trong `rates`"""
    if len(frames) == 0:
        raise ArgumentError("outage needs at least one frame")
    caps = np.array([frame_capacity(H, rho) for H in frames])
    out = []
    for rate in rates:
        if not rate >= 0:
            raise ArgumentError("target rate must be >= 0")
        out.append(float(np.mean(caps < rate)))
    return out


def active_taps(H: np.ndarray, energy_fraction: float = DEFAULT_ACTIVE_FRACTION) -> np.ndarray:
    """Chỉ số phẳng của các tap mạnh nhất cùng chiếm `energy_fraction` năng lượng frame"""
    if not 0.0 < energy_fraction <= 1.0:
        raise ArgumentError("energy_fraction must lie in (0, 1]")
    power = np.abs(np.ravel(np.asarray(H))) ** 2
    total = float(power.sum())
    if total == 0.0:
        raise UndefinedReferenceError("active taps are undefined on a zero-energy frame")
    order = np.argsort(-power, kind="stable")
    covered = np.cumsum(power[order])
    k = int(np.searchsorted(covered, energy_fraction * total * (1.0 - _COVER_RTOL), side="left")) + 1
    return order[:min(k, power.size)]


def active_tap_capacity(H: np.ndarray, rho: float, energy_fraction: float = DEFAULT_ACTIVE_FRACTION) -> float:
    """Dung lượng trên các tap hoạt động sau khi chuẩn hoá công suất trung bình về 1"""
    _check_rho(rho)
    power = np.abs(np.ravel(np.asarray(H))) ** 2
    selected = power[active_taps(H, energy_fraction)]
    normalized = selected / selected.mean()
    return float(np.mean(np.log2(1.0 + rho * normalized)))


def effective_slice(ref: np.ndarray, n_doppler: int, n_delay: int) -> np.ndarray:
    """(1/√N_t)·1ᵀ·H_ref dưới dạng bản đồ delay–Doppler M_τ × N_ν"""
    ref = np.asarray(ref)
    if ref.ndim != 2 or ref.shape[1] != n_doppler * n_delay:
        raise ArgumentError(f"reference matrix {ref.shape} does not hold a {n_delay}x{n_doppler} grid")
    combined = ref.sum(axis=0) / math.sqrt(ref.shape[0])
    return combined.reshape(n_delay, n_doppler)


def summarize(preds: Sequence, truths: Sequence, frames: Sequence[np.ndarray], link: LinkParams,
              energy_fraction: float = DEFAULT_ACTIVE_FRACTION,
              config: Optional[Dict[str, object]] = None) -> MetricReport:
    """Gom các chỉ số dự đoán và chỉ số đường truyền vào một MetricReport"""
    return MetricReport(
        nmse_db=nmse_db(preds, truths),
        rmse=rmse(preds, truths),
        ergodic_capacity=ergodic_capacity(frames, link.snr_linear),
        outage=outage_probability(frames, link.snr_linear, link.target_rate),
        active_tap_capacity=float(np.mean([active_tap_capacity(H, link.snr_linear, energy_fraction)
                                           for H in frames])),
        config=dict(config or {}),
    )
