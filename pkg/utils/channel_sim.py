"""
Delay–Doppler channel simulator for a LEO satellite downlink received by a fluid-antenna rail.

Each frame is a complex tensor over (port, transmit element, Doppler bin, delay bin) holding
a Ricean mixture of one line-of-sight tap at (ν_LoS, 0) and P scattered taps, each confined
to a single delay–Doppler bin and rotated frame by frame by its Doppler phase.

Two generation modes are supported:
    correlated  - ports vary through the Bessel-law correlation factor applied to z_p
    phase_ramp  - ports are exact phase-ramped copies of port 1, the structure assumed by
                  reference-port reconstruction
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy import linalg, special

from utils.errors import ArgumentError, ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

MODES = ("correlated", "phase_ramp")

# Frames spanned by one full Doppler rotation of the median bin
COHERENCE_FRAMES = 35


def default_doppler_resolution(n_doppler: int, frame_duration_s: float,
                               coherence_frames: int = COHERENCE_FRAMES) -> float:
    """Độ phân giải Doppler (Hz/bin) để bin trung vị quay một vòng sau `coherence_frames` frame"""
    median_bin = max((n_doppler - 1) / 2.0, 1.0)
    return 1.0 / (coherence_frames * median_bin * frame_duration_s)


@dataclass
class FasGeometry:
    """Thanh fluid antenna tuyến tính đều, nhìn dưới góc ngẩng θ"""
    n_ports: int = 16
    spacing_over_lambda: float = 0.1
    elevation_rad: float = 1.0
    loading_eps: float = 1e-6

    def __post_init__(self):
        if int(self.n_ports) < 1:
            raise ConfigurationError("geometry.n_ports", "must be >= 1")
        if not self.spacing_over_lambda > 0:
            raise ConfigurationError("geometry.spacing_over_lambda", "must be > 0")
        if not 0.0 <= self.elevation_rad <= math.pi / 2:
            raise ConfigurationError("geometry.elevation_rad", "must lie in [0, pi/2]")
        if not self.loading_eps > 0:
            raise ConfigurationError("geometry.loading_eps", "must be > 0")
        self.n_ports = int(self.n_ports)


@dataclass
class GridConfig:
    """Kích thước mảng phát, lưới delay–Doppler và thời lượng frame"""
    n_tx: int = 8
    n_doppler: int = 32
    n_delay: int = 32
    frame_duration_s: float = 1e-3
    doppler_res_hz: Optional[float] = None

    def __post_init__(self):
        for name in ("n_tx", "n_doppler", "n_delay"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"grid.{name}", "must be >= 1")
            setattr(self, name, int(getattr(self, name)))
        if not self.frame_duration_s > 0:
            raise ConfigurationError("grid.frame_duration_s", "must be > 0")
        if self.doppler_res_hz is None:
            self.doppler_res_hz = default_doppler_resolution(self.n_doppler, self.frame_duration_s)
        elif not self.doppler_res_hz > 0:
            raise ConfigurationError("grid.doppler_res_hz", "must be > 0")

    @property
    def n_bins(self) -> int:
        return self.n_delay * self.n_doppler


@dataclass
class ScatterPath:
    delay_bin: int
    doppler_bin: int
    power: float
    rx_vector: np.ndarray
    tx_gains: np.ndarray


@dataclass
class ScattererSet:
    """Tham số LoS và các đường tán xạ của một chuỗi; a_t = 1 cho mọi phần tử"""
    rice_kappa: float
    los_doppler_bin: int
    paths: List[ScatterPath] = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def total_power(self) -> float:
        return float(sum(p.power for p in self.paths))

    def amplitudes(self):
        """Trọng số biên độ (LoS, tán xạ): √(κ/(κ+1)) và √(1/(κ+1))"""
        kappa = self.rice_kappa
        if math.isinf(kappa):
            return 1.0, 0.0
        return math.sqrt(kappa / (kappa + 1.0)), math.sqrt(1.0 / (kappa + 1.0))


@dataclass
class ChannelTensor:
    """H(q) với shape (N_p, N_t, N_ν, M_τ)"""
    data: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ArgumentError(f"channel tensor must be 4-D, got shape {self.data.shape}")
        if self.frame_index < 0:
            raise ArgumentError("frame_index must be >= 0")

    @property
    def n_ports(self) -> int:
        return self.data.shape[0]

    def energy(self) -> float:
        return float(np.vdot(self.data, self.data).real)

    def port_energies(self) -> np.ndarray:
        """Bình phương chuẩn Frobenius của từng lát port"""
        return np.sum(np.abs(self.data) ** 2, axis=(1, 2, 3))


@dataclass
class CorrelationMatrix:
    entries: np.ndarray
    sqrt_factor: np.ndarray

    @property
    def los_signature(self) -> np.ndarray:
        """b_n, cột đầu của thừa số Cholesky đã cộng tải"""
        return self.sqrt_factor[:, 0]


def bessel_j0(x):
    """Hàm Bessel loại một bậc 0 (vô hướng vào thì vô hướng ra)"""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("bessel_j0 needs finite arguments")
    out = special.j0(arr)
    return float(out) if out.ndim == 0 else out


def build_fas_correlation(geom: FasGeometry) -> CorrelationMatrix:
    """Ma trận tương quan J₀ giữa các port cùng thừa số Cholesky của nó"""
    lags = np.arange(geom.n_ports, dtype=float)
    args = 2.0 * np.pi * geom.spacing_over_lambda * lags * math.sin(geom.elevation_rad)
    first_row = np.where(args == 0.0, 1.0, bessel_j0(args))
    entries = linalg.toeplitz(first_row)
    np.fill_diagonal(entries, 1.0)
    try:
        factor = linalg.cholesky(entries + geom.loading_eps * np.eye(geom.n_ports), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            f"Cholesky failed after loading with eps={geom.loading_eps:g}; increase geometry.loading_eps"
        ) from exc
    return CorrelationMatrix(entries=entries, sqrt_factor=factor.astype(complex))


def port_phasors(geom: FasGeometry) -> np.ndarray:
    """Φ_{n_p} = exp(−j2π(n_p−1)(d_r/λ)sinθ) for n_p = 1..N_p"""
    steps = np.arange(geom.n_ports, dtype=float)
    phase = -2.0 * np.pi * steps * geom.spacing_over_lambda * math.sin(geom.elevation_rad)
    return np.exp(1j * phase)


def _complex_gaussian(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_scatterers(cfg: GridConfig, n_paths: int, kappa: float, seed: int,
                    n_ports: int = 1, los_doppler_bin: Optional[int] = None) -> ScattererSet:
    """Rút bin Doppler của LoS và P đường tán xạ; bin trễ 0 dành riêng cho tap LoS"""
    if n_paths < 0:
        raise ArgumentError("n_paths must be >= 0")
    if not kappa >= 0:
        raise ArgumentError("kappa must be >= 0")
    available = (cfg.n_delay - 1) * cfg.n_doppler
    if n_paths >= cfg.n_bins or n_paths > available:
        raise ConfigurationError(
            "scatterers.n_paths",
            f"cannot place {n_paths} distinct paths on {available} non-LoS delay–Doppler bins",
        )
    if los_doppler_bin is not None and not 0 <= los_doppler_bin < cfg.n_doppler:
        raise ConfigurationError("scatterers.los_doppler_bin", f"must lie in [0, {cfg.n_doppler})")

    bins_seq, power_seq, vector_seq = np.random.SeedSequence(seed).spawn(3)
    bins_rng = np.random.default_rng(bins_seq)
    if los_doppler_bin is None:
        los_doppler_bin = int(bins_rng.integers(cfg.n_doppler))
    flat = bins_rng.choice(available, size=n_paths, replace=False) if n_paths else np.zeros(0, dtype=int)

    powers = np.random.default_rng(power_seq).exponential(1.0, size=n_paths)
    if n_paths:
        powers = powers / powers.sum()

    vector_rng = np.random.default_rng(vector_seq)
    z = _complex_gaussian(vector_rng, (n_paths, n_ports), 0.5)
    g = _complex_gaussian(vector_rng, (n_paths, cfg.n_tx), 0.5)

    paths = [
        ScatterPath(
            delay_bin=int(1 + flat[p] // cfg.n_doppler),
            doppler_bin=int(flat[p] % cfg.n_doppler),
            power=float(powers[p]),
            rx_vector=z[p],
            tx_gains=g[p],
        )
        for p in range(n_paths)
    ]
    logger.debug("Drew %d scattered paths, LoS Doppler bin %d", n_paths, los_doppler_bin)
    return ScattererSet(rice_kappa=float(kappa), los_doppler_bin=int(los_doppler_bin), paths=paths)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")


def generate_frame(q: int, geom: FasGeometry, cfg: GridConfig, scat: ScattererSet,
                   corr: CorrelationMatrix, mode: str = "phase_ramp") -> ChannelTensor:
    """Tạo tensor kênh delay–Doppler của frame q"""
    _check_mode(mode)
    if corr.sqrt_factor.shape != (geom.n_ports, geom.n_ports):
        raise ArgumentError("correlation factor does not match the port count")
    if not 0 <= scat.los_doppler_bin < cfg.n_doppler:
        raise ArgumentError("LoS Doppler bin outside the grid")

    data = np.zeros((geom.n_ports, cfg.n_tx, cfg.n_doppler, cfg.n_delay), dtype=complex)
    t = q * cfg.frame_duration_s
    los_amp, nlos_amp = scat.amplitudes()
    ramp = port_phasors(geom)

    if mode == "correlated":
        los_rx = corr.los_signature
    else:
        los_rx = ramp * corr.sqrt_factor[0, 0]
    los_phase = np.exp(2j * np.pi * scat.los_doppler_bin * cfg.doppler_res_hz * t)
    data[:, :, scat.los_doppler_bin, 0] += (los_amp * los_phase * los_rx)[:, None]

    for path in scat.paths:
        if path.rx_vector.shape != (geom.n_ports,) or path.tx_gains.shape != (cfg.n_tx,):
            raise ArgumentError("scatterer vectors do not match the geometry/grid")
        if mode == "correlated":
            rx = corr.sqrt_factor @ path.rx_vector
        else:
            rx = ramp * (corr.sqrt_factor[0, :] @ path.rx_vector)
        phase = np.exp(2j * np.pi * path.doppler_bin * cfg.doppler_res_hz * t)
        coeff = nlos_amp * math.sqrt(path.power) * phase
        data[:, :, path.doppler_bin, path.delay_bin] += coeff * np.outer(rx, path.tx_gains)

    return ChannelTensor(data=data, frame_index=int(q))


def iter_frames(n_frames: int, geom: FasGeometry, cfg: GridConfig, n_paths: int, kappa: float,
                seed: int, mode: str = "phase_ramp",
                los_doppler_bin: Optional[int] = None) -> Iterator[ChannelTensor]:
    """Sinh lần lượt các frame q = 0..n_frames−1 từ một lần rút tán xạ"""
    if n_frames < 1:
        raise ArgumentError("n_frames must be >= 1")
    _check_mode(mode)
    corr = build_fas_correlation(geom)
    scat = draw_scatterers(cfg, n_paths, kappa, seed, n_ports=geom.n_ports,
                           los_doppler_bin=los_doppler_bin)
    for q in range(n_frames):
        yield generate_frame(q, geom, cfg, scat, corr, mode)


def generate_sequence(n_frames: int, geom: FasGeometry, cfg: GridConfig, n_paths: int,
                      kappa: float, seed: int, mode: str = "phase_ramp",
                      los_doppler_bin: Optional[int] = None) -> List[ChannelTensor]:
    """Tạo toàn bộ chuỗi frame trong bộ nhớ"""
    return list(iter_frames(n_frames, geom, cfg, n_paths, kappa, seed, mode, los_doppler_bin))


def generate_sequences(seeds: Sequence[int], n_frames: int, geom: FasGeometry, cfg: GridConfig,
                       n_paths: int, kappa: float, mode: str = "phase_ramp",
                       max_workers: int = 1) -> List[List[ChannelTensor]]:
    """Sinh một chuỗi cho mỗi seed trên thread pool, giữ thứ tự seed"""
    def _one(seed):
        return generate_sequence(n_frames, geom, cfg, n_paths, kappa, seed, mode)

    if max_workers <= 1:
        return [_one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(_one, seeds))
