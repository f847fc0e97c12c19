"""
Binary artefact codecs.

Every file is: 5-byte magic, 1-byte version, N little-endian uint32 dimensions, payload of
little-endian float64 values (complex values stored as interleaved real/imag pairs).

    DDCH1  channel tensors   dims (n_frames, N_p, N_t, N_ν, M_τ); frame-major, then port, tx, Doppler, delay
    DDCD1  code vectors      dims (n_frames, r_s, r_d); one column-major vec(C(q)) per frame
    DDPB1  PCA basis         dims (N_t, N_ν, M_τ, r_s, r_d, ref_port);
                             payload threshold, eig_s, eig_d, A_s, A_d
    DDMD1  model checkpoint  dims (D, D_h, h, L, r, M, N, ff_mult, delta, has_normalizer, linear_skip);
                             payload α, parameters in declaration order, then normalizer mean/std
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from utils.channel_sim import ChannelTensor
from utils.compression import Code, PcaBasis
from utils.errors import BadMagicError, FormatError
from utils.micro_model import MicroModel, ModelConfig, parameter_shapes
from utils.training import Normalizer

logger = logging.getLogger(__name__)

VERSION = 1
MAGIC_CHANNELS = b"DDCH1"
MAGIC_CODES = b"DDCD1"
MAGIC_BASIS = b"DDPB1"
MAGIC_MODEL = b"DDMD1"

_F8 = np.dtype("<f8")
_C16 = np.dtype("<c16")


def header_size(n_dims: int) -> int:
    return len(MAGIC_CHANNELS) + 1 + 4 * n_dims


def _pack_header(magic: bytes, dims: Iterable[int]) -> bytes:
    dims = [int(d) for d in dims]
    return magic + struct.pack("<B", VERSION) + struct.pack(f"<{len(dims)}I", *dims)


def _read_header(fh, path: str, magic: bytes, n_dims: int) -> Tuple[int, ...]:
    head = fh.read(header_size(n_dims))
    if len(head) < len(magic) or head[:len(magic)] != magic:
        raise BadMagicError(f"bad magic, expected {magic.decode()}", path)
    if len(head) < header_size(n_dims):
        raise FormatError("truncated header", path)
    version = head[len(magic)]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path)
    return struct.unpack(f"<{n_dims}I", head[len(magic) + 1:])


def _read_payload(path: str, magic: bytes, n_dims: int) -> Tuple[Tuple[int, ...], bytes]:
    with open(path, "rb") as fh:
        dims = _read_header(fh, path, magic, n_dims)
        payload = fh.read()
    return dims, payload


class _Cursor:
    """Sequential float64/complex128 reader over a payload with an exact-length check"""

    def __init__(self, payload: bytes, path: str):
        self.payload, self.path, self.offset = payload, path, 0

    def take(self, dtype: np.dtype, count: int) -> np.ndarray:
        if count == 0:
            return np.zeros(0, dtype=dtype.newbyteorder("="))
        nbytes = dtype.itemsize * count
        if self.offset + nbytes > len(self.payload):
            raise FormatError("payload shorter than its header dimensions", self.path)
        out = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset).astype(dtype.newbyteorder("="))
        self.offset += nbytes
        return out

    def finish(self):
        if self.offset != len(self.payload):
            raise FormatError(f"{len(self.payload) - self.offset} trailing payload bytes", self.path)


# ---------------------------------------------------------------- DDCH1

class ChannelWriter:
    """Append frames one at a time; the frame count in the header is fixed up on close"""

    def __init__(self, path: str, n_ports: int, n_tx: int, n_doppler: int, n_delay: int):
        self.path = path
        self.shape = (n_ports, n_tx, n_doppler, n_delay)
        self.n_frames = 0
        self._fh = open(path, "wb")
        self._fh.write(_pack_header(MAGIC_CHANNELS, (0,) + self.shape))

    def write(self, frame: ChannelTensor):
        if frame.data.shape != self.shape:
            raise FormatError(f"frame shape {frame.data.shape} differs from file shape {self.shape}", self.path)
        self._fh.write(np.ascontiguousarray(frame.data, dtype=_C16).tobytes())
        self.n_frames += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(len(MAGIC_CHANNELS) + 1)
        self._fh.write(struct.pack("<I", self.n_frames))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_channels(path: str, frames: Iterable[ChannelTensor]) -> int:
    """Ghi chuỗi frame ra file DDCH1, trả về số frame đã ghi"""
    frames = iter(frames)
    first = next(frames, None)
    if first is None:
        raise FormatError("cannot write an empty channel sequence", path)
    with ChannelWriter(path, *first.data.shape) as writer:
        writer.write(first)
        for frame in frames:
            writer.write(frame)
    return writer.n_frames


@dataclass
class ChannelFile:
    path: str
    data: np.ndarray  # read-only memmap (n_frames, N_p, N_t, N_ν, M_τ)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def frame(self, q: int) -> ChannelTensor:
        return ChannelTensor(data=np.array(self.data[q], dtype=complex), frame_index=q)

    def __iter__(self):
        for q in range(self.n_frames):
            yield self.frame(q)

    def __len__(self):
        return self.n_frames


def read_channels(path: str) -> ChannelFile:
    """Mở file DDCH1 dưới dạng memmap chỉ đọc"""
    with open(path, "rb") as fh:
        dims = _read_header(fh, path, MAGIC_CHANNELS, 5)
    offset = header_size(5)
    expected = int(np.prod(dims)) * _C16.itemsize
    actual = os.path.getsize(path) - offset
    if actual != expected:
        raise FormatError(f"payload is {actual} bytes, header implies {expected}", path)
    if dims[0] == 0:
        raise FormatError("channel file holds no frames", path)
    data = np.memmap(path, dtype=_C16, mode="r", offset=offset, shape=tuple(dims))
    return ChannelFile(path=path, data=data)


# ---------------------------------------------------------------- DDCD1

def write_codes(path: str, codes: List[Code]) -> None:
    """Ghi các code ra file DDCD1"""
    if not codes:
        raise FormatError("cannot write an empty code sequence", path)
    r_s, r_d = codes[0].matrix.shape
    if any(code.matrix.shape != (r_s, r_d) for code in codes):
        raise FormatError("codes differ in shape", path)
    vectors = np.stack([code.vec for code in codes]).astype(_C16)
    with open(path, "wb") as fh:
        fh.write(_pack_header(MAGIC_CODES, (len(codes), r_s, r_d)))
        fh.write(vectors.tobytes())


def read_codes(path: str) -> Tuple[np.ndarray, int, int]:
    """(n_frames, r_s·r_d) complex code vectors plus the code ranks"""
    (n_frames, r_s, r_d), payload = _read_payload(path, MAGIC_CODES, 3)
    cursor = _Cursor(payload, path)
    vectors = cursor.take(_C16, n_frames * r_s * r_d).reshape(n_frames, r_s * r_d)
    cursor.finish()
    return vectors, r_s, r_d


# ---------------------------------------------------------------- DDPB1

def write_basis(path: str, basis: PcaBasis) -> None:
    """Ghi cơ sở PCA ra file DDPB1"""
    if basis.grid_shape is None:
        raise FormatError("basis carries no grid shape", path)
    n_doppler, n_delay = basis.grid_shape
    dims = (basis.A_s.shape[0], n_doppler, n_delay, basis.r_s, basis.r_d, basis.ref_port)
    with open(path, "wb") as fh:
        fh.write(_pack_header(MAGIC_BASIS, dims))
        fh.write(np.asarray([basis.energy_threshold], dtype=_F8).tobytes())
        fh.write(np.asarray(basis.eig_s, dtype=_F8).tobytes())
        fh.write(np.asarray(basis.eig_d, dtype=_F8).tobytes())
        fh.write(np.ascontiguousarray(basis.A_s, dtype=_C16).tobytes())
        fh.write(np.ascontiguousarray(basis.A_d, dtype=_C16).tobytes())


def read_basis(path: str) -> PcaBasis:
    """Đọc cơ sở PCA từ file DDPB1"""
    (n_t, n_doppler, n_delay, r_s, r_d, ref_port), payload = _read_payload(path, MAGIC_BASIS, 6)
    n_bins = n_doppler * n_delay
    if r_s > n_t or r_d > n_bins:
        raise FormatError("basis ranks exceed their dimensions", path)
    cursor = _Cursor(payload, path)
    threshold = float(cursor.take(_F8, 1)[0])
    eig_s = cursor.take(_F8, n_t)
    eig_d = cursor.take(_F8, n_bins)
    A_s = cursor.take(_C16, n_t * r_s).reshape(n_t, r_s)
    A_d = cursor.take(_C16, n_bins * r_d).reshape(n_bins, r_d)
    cursor.finish()
    return PcaBasis(A_s=A_s, A_d=A_d, eig_s=eig_s, eig_d=eig_d, energy_threshold=threshold,
                    ref_port=int(ref_port), grid_shape=(int(n_doppler), int(n_delay)))


# ---------------------------------------------------------------- DDMD1

@dataclass
class Checkpoint:
    model: MicroModel
    normalizer: Optional[Normalizer] = None
    delta: bool = False


def write_model(path: str, model: MicroModel, normalizer: Optional[Normalizer] = None,
                delta: bool = False) -> None:
    """Ghi checkpoint model (kèm normalizer nếu có) ra file DDMD1"""
    cfg = model.config
    dims = (cfg.feature_dim, cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.lora_rank, cfg.horizon,
            cfg.past_window, cfg.ff_mult, int(delta), int(normalizer is not None), int(cfg.linear_skip))
    with open(path, "wb") as fh:
        fh.write(_pack_header(MAGIC_MODEL, dims))
        fh.write(np.asarray([cfg.lora_alpha], dtype=_F8).tobytes())
        for name in model.names():
            fh.write(np.ascontiguousarray(model.params[name], dtype=_F8).tobytes())
        if normalizer is not None:
            fh.write(np.asarray(normalizer.mean, dtype=_F8).tobytes())
            fh.write(np.asarray(normalizer.std, dtype=_F8).tobytes())


def read_model(path: str) -> Checkpoint:
    """Đọc checkpoint DDMD1"""
    dims, payload = _read_payload(path, MAGIC_MODEL, 11)
    D, d_model, n_heads, n_layers, rank, horizon, past, ff_mult, delta, has_norm, skip = dims
    cursor = _Cursor(payload, path)
    alpha = float(cursor.take(_F8, 1)[0])
    try:
        cfg = ModelConfig(feature_dim=D, d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                          lora_rank=rank, lora_alpha=alpha, horizon=horizon, past_window=past,
                          ff_mult=ff_mult, linear_skip=bool(skip))
    except ValueError as exc:
        raise FormatError(f"inconsistent model header ({exc})", path) from exc
    params = {}
    for name, shape in parameter_shapes(cfg):
        params[name] = cursor.take(_F8, int(np.prod(shape, dtype=int))).reshape(shape)
    normalizer = None
    if has_norm:
        normalizer = Normalizer(mean=cursor.take(_F8, D), std=cursor.take(_F8, D))
    cursor.finish()
    return Checkpoint(model=MicroModel(cfg, params), normalizer=normalizer, delta=bool(delta))
