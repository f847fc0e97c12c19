"""
Two-stage channel compression: reference-port selection followed by separable PCA.

A frame H(q) is reduced to its reference-port matrix H_ref(q) (N_t × M_τN_ν, column
col = m_τ·N_ν + n_d) and then to the code C(q) = A_sᴴ H_ref(q) A_d. Reconstruction runs
the same steps backwards: unvectorise, expand in the PCA subspaces, replicate across
ports with the deterministic phase ramp.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from utils.channel_sim import ChannelTensor, FasGeometry, GridConfig, port_phasors
from utils.errors import ArgumentError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.90
_RATIO_TOL = 1e-12
_TIE_RTOL = 1e-9


@dataclass
class RefMatrix:
    data: np.ndarray
    frame_index: int = 0


@dataclass
class PcaBasis:
    A_s: np.ndarray
    A_d: np.ndarray
    eig_s: np.ndarray
    eig_d: np.ndarray
    energy_threshold: float = DEFAULT_THRESHOLD
    ref_port: int = 0
    grid_shape: Optional[Tuple[int, int]] = None  # (n_doppler, n_delay)

    @property
    def r_s(self) -> int:
        return self.A_s.shape[1]

    @property
    def r_d(self) -> int:
        return self.A_d.shape[1]

    @property
    def code_size(self) -> int:
        return self.r_s * self.r_d

    @property
    def spatial_ratio(self) -> float:
        return float(self.eig_s[:self.r_s].sum() / self.eig_s.sum())

    @property
    def doppler_ratio(self) -> float:
        return float(self.eig_d[:self.r_d].sum() / self.eig_d.sum())

    @property
    def reduction(self) -> float:
        """Tỉ lệ hệ số của port tham chiếu được code loại bỏ"""
        raw = self.A_s.shape[0] * self.A_d.shape[0]
        return 1.0 - self.code_size / raw


@dataclass
class Code:
    """C(q); `vec` là vector hoá theo cột c(q)"""
    matrix: np.ndarray
    frame_index: int = 0

    @property
    def vec(self) -> np.ndarray:
        return self.matrix.reshape(-1, order="F")


@dataclass
class PhaseRamp:
    phasors: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=complex))

    @property
    def n_ports(self) -> int:
        return self.phasors.shape[0]


def extract_reference(tensor: ChannelTensor, port: int = 0) -> RefMatrix:
    """Lấy ma trận N_t × (M_τN_ν) của port tham chiếu, cột theo thứ tự trễ rồi Doppler"""
    if not 0 <= port < tensor.n_ports:
        raise ArgumentError(f"port {port} outside [0, {tensor.n_ports})")
    n_t, n_doppler, n_delay = tensor.data.shape[1:]
    data = tensor.data[port].transpose(0, 2, 1).reshape(n_t, n_delay * n_doppler)
    return RefMatrix(data=data, frame_index=tensor.frame_index)


def ref_to_grid(data: np.ndarray, n_doppler: int, n_delay: int) -> np.ndarray:
    """Đưa N_t × (M_τN_ν) về lại N_t × N_ν × M_τ"""
    n_t = data.shape[0]
    return data.reshape(n_t, n_delay, n_doppler).transpose(0, 2, 1)


def select_reference_port(train: Iterable[ChannelTensor]) -> int:
    """Chọn port có năng lượng lát trung bình lớn nhất; khi gần bằng nhau lấy chỉ số nhỏ nhất.

    Các frame được đọc lần lượt từng cái, nên generator trên file memmap chỉ giữ một frame
    trong bộ nhớ.
    """
    total, count = None, 0
    for frame in train:
        energies = frame.port_energies()
        total = energies if total is None else total + energies
        count += 1
    if count == 0:
        raise ArgumentError("reference-port selection needs at least one training frame")
    energies = total / count
    peak = energies.max()
    return int(np.flatnonzero(energies >= peak * (1.0 - _TIE_RTOL))[0])


def _eig_descending(cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Phân rã trị riêng Hermite theo thứ tự giảm; phần tử lớn nhất của mỗi vector là số thực dương"""
    try:
        w, U = linalg.eigh(0.5 * (cov + cov.conj().T))
    except linalg.LinAlgError as exc:
        raise NumericalError("Hermitian eigendecomposition failed") from exc
    if not np.all(np.isfinite(w)):
        raise NumericalError("eigensolver returned non-finite eigenvalues")
    w = np.clip(w[::-1], 0.0, None)
    U = U[:, ::-1]
    pivots = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    U = U * (np.conj(pivots) / np.abs(pivots))[None, :]
    return w, U


def rank_for_threshold(eigvals: np.ndarray, threshold: float) -> int:
    """r nhỏ nhất mà r trị riêng đầu giữ được ít nhất `threshold` tổng năng lượng"""
    total = eigvals.sum()
    if not total > 0:
        raise NumericalError("training set carries no energy")
    ratios = np.cumsum(eigvals) / total
    r = int(np.searchsorted(ratios, threshold - _RATIO_TOL, side="left")) + 1
    return min(r, eigvals.shape[0])


def covariances(train_refs: Sequence[RefMatrix]) -> Tuple[np.ndarray, np.ndarray]:
    """R_s = trung bình H Hᴴ và R_d = trung bình Hᴴ H trên các frame huấn luyện"""
    stack = np.stack([ref.data for ref in train_refs])
    n_frames, n_t, n_bins = stack.shape
    wide = stack.transpose(1, 0, 2).reshape(n_t, n_frames * n_bins)
    tall = stack.reshape(n_frames * n_t, n_bins)
    R_s = (wide @ wide.conj().T) / n_frames
    R_d = (tall.conj().T @ tall) / n_frames
    return R_s, R_d


def fit_pca(train_refs: Sequence[RefMatrix], threshold: float = DEFAULT_THRESHOLD) -> PcaBasis:
    """Học cơ sở PCA tách biến không gian và Doppler từ các frame huấn luyện"""
    if len(train_refs) == 0:
        raise ArgumentError("fit_pca needs at least one training frame")
    if not 0.0 < threshold <= 1.0:
        raise ArgumentError("threshold must lie in (0, 1]")
    shape = train_refs[0].data.shape
    if any(ref.data.shape != shape for ref in train_refs):
        raise ArgumentError("training reference matrices differ in shape")

    R_s, R_d = covariances(train_refs)
    eig_s, U_s = _eig_descending(R_s)
    eig_d, U_d = _eig_descending(R_d)
    r_s = rank_for_threshold(eig_s, threshold)
    r_d = rank_for_threshold(eig_d, threshold)
    basis = PcaBasis(A_s=U_s[:, :r_s].copy(), A_d=U_d[:, :r_d].copy(), eig_s=eig_s, eig_d=eig_d,
                     energy_threshold=float(threshold))
    logger.info("PCA fitted on %d frames: r_s=%d (%.4f), r_d=%d (%.4f)",
                len(train_refs), r_s, basis.spatial_ratio, r_d, basis.doppler_ratio)
    return basis


def compress(ref: RefMatrix, basis: PcaBasis) -> Code:
    """Nén: C = A_sᴴ H A_d"""
    if ref.data.shape != (basis.A_s.shape[0], basis.A_d.shape[0]):
        raise ArgumentError(
            f"reference matrix {ref.data.shape} does not match basis "
            f"({basis.A_s.shape[0]}, {basis.A_d.shape[0]})"
        )
    return Code(matrix=basis.A_s.conj().T @ ref.data @ basis.A_d, frame_index=ref.frame_index)


def code_from_vector(vec: np.ndarray, r_s: int, r_d: int, frame_index: int = 0) -> Code:
    vec = np.asarray(vec)
    if vec.shape != (r_s * r_d,):
        raise ArgumentError(f"code vector of length {vec.shape} cannot be unvectorised to {r_s}x{r_d}")
    return Code(matrix=vec.reshape((r_s, r_d), order="F"), frame_index=frame_index)


def reconstruct_ref(code: Code, basis: PcaBasis) -> RefMatrix:
    """Dựng lại: Ĥ = A_s C A_dᴴ"""
    if code.matrix.shape != (basis.r_s, basis.r_d):
        raise ArgumentError(f"code {code.matrix.shape} does not match ranks ({basis.r_s}, {basis.r_d})")
    return RefMatrix(data=basis.A_s @ code.matrix @ basis.A_d.conj().T, frame_index=code.frame_index)


def make_phase_ramp(geom: FasGeometry) -> PhaseRamp:
    """Pha tuyến tính giữa các port theo hình học thanh ăng-ten"""
    return PhaseRamp(phasors=port_phasors(geom))


def replicate_ports(ref: RefMatrix, ramp: PhaseRamp, cfg: GridConfig, ref_port: int = 0) -> ChannelTensor:
    """Ĥ = Φ ⊙ Ĥ_ref; ramp được quy chiếu lại khi port lưu không phải port 1"""
    if ref.data.shape != (cfg.n_tx, cfg.n_bins):
        raise ArgumentError(f"reference matrix {ref.data.shape} does not match grid ({cfg.n_tx}, {cfg.n_bins})")
    if not 0 <= ref_port < ramp.n_ports:
        raise ArgumentError("reference port outside the ramp")
    phasors = ramp.phasors
    if ref_port:
        phasors = phasors * np.conj(phasors[ref_port])
    grid = ref_to_grid(ref.data, cfg.n_doppler, cfg.n_delay)
    return ChannelTensor(data=phasors[:, None, None, None] * grid[None], frame_index=ref.frame_index)


def delta_encode(vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Tách chuỗi code (T, K) thành vector đầu và T−1 hiệu liên tiếp"""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ArgumentError("delta encoding needs a non-empty (T, K) sequence")
    return vectors[0].copy(), np.diff(vectors, axis=0)


def delta_decode(first: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Cộng dồn các hiệu để khôi phục chuỗi code"""
    first = np.asarray(first)
    deltas = np.asarray(deltas)
    if deltas.ndim != 2 or deltas.shape[1] != first.shape[0]:
        raise ArgumentError("delta width does not match the first vector")
    return np.vstack([first[None, :], first[None, :] + np.cumsum(deltas, axis=0)])


def reconstruction_report(refs: Sequence[RefMatrix], basis: PcaBasis) -> Dict[str, float]:
    """Sai số nén rồi dựng lại trên cả tập frame, kèm giá trị tính bằng phép chiếu tường minh"""
    P_s = basis.A_s @ basis.A_s.conj().T
    P_d = basis.A_d @ basis.A_d.conj().T
    total = residual = projector_residual = 0.0
    for ref in refs:
        rebuilt = reconstruct_ref(compress(ref, basis), basis).data
        projected = P_s @ ref.data @ P_d
        total += float(np.sum(np.abs(ref.data) ** 2))
        residual += float(np.sum(np.abs(ref.data - rebuilt) ** 2))
        projector_residual += float(np.sum(np.abs(ref.data - projected) ** 2))
    if not total > 0:
        raise NumericalError("frame set carries no energy")
    floor = 1e-30
    return {
        "total_energy": total,
        "residual_energy": residual,
        "projector_residual_energy": projector_residual,
        "nmse_db": 10.0 * np.log10(max(residual / total, floor)),
        "projector_nmse_db": 10.0 * np.log10(max(projector_residual / total, floor)),
        "discarded_spatial": float(basis.eig_s[basis.r_s:].sum()) * len(refs),
        "discarded_doppler": float(basis.eig_d[basis.r_d:].sum()) * len(refs),
    }
