"""
Reference forecasters evaluated on the same windows as the transformer
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from utils.errors import ArgumentError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_AR_ORDER = 8
DEFAULT_AR_RIDGE = 1e-3


def persistence_predict(history: np.ndarray, horizon: int) -> np.ndarray:
    """Lặp lại vector cuối cùng M lần"""
    history = np.asarray(history)
    if history.ndim != 2 or history.shape[0] < 1:
        raise ArgumentError("persistence needs a non-empty (T, D) history")
    if horizon < 1:
        raise ArgumentError("horizon must be >= 1")
    return np.repeat(history[-1:], horizon, axis=0)


@dataclass
class ArModel:
    """coefficients[d, k] multiplies x_d[t−1−k]"""
    coefficients: np.ndarray
    ridge: float

    @property
    def order(self) -> int:
        return self.coefficients.shape[1]


def ar_fit(history: np.ndarray, order: int = DEFAULT_AR_ORDER, ridge: float = DEFAULT_AR_RIDGE) -> ArModel:
    """Bình phương tối thiểu có ridge cho từng feature, không có hệ số tự do"""
    history = np.asarray(history)
    if history.ndim == 1:
        history = history[:, None]
    if order < 1:
        raise ArgumentError("AR order must be >= 1")
    if ridge < 0:
        raise ArgumentError("ridge must be >= 0")
    n_frames, n_feat = history.shape
    if n_frames <= order:
        raise ArgumentError(f"AR({order}) needs more than {order} frames, got {n_frames}")

    rows = n_frames - order
    coefficients = np.zeros((n_feat, order), dtype=np.result_type(history.dtype, float))
    for d in range(n_feat):
        x = history[:, d]
        lagged = np.stack([x[order - 1 - k:n_frames - 1 - k] for k in range(order)], axis=1)
        target = x[order:]
        gram = lagged.conj().T @ lagged + ridge * np.eye(order)
        rhs = lagged.conj().T @ target
        if ridge == 0 and np.linalg.matrix_rank(gram) < order:
            raise NumericalError(f"singular AR normal equations for feature {d} with ridge=0")
        try:
            coefficients[d] = linalg.solve(gram, rhs, assume_a="her")
        except linalg.LinAlgError as exc:
            raise NumericalError(f"AR normal equations for feature {d} could not be solved") from exc
    logger.debug("AR(%d) fitted on %d rows x %d features", order, rows, n_feat)
    return ArModel(coefficients=coefficients, ridge=float(ridge))


def ar_predict(model: ArModel, history: np.ndarray, horizon: int) -> np.ndarray:
    """Lặp hồi quy thêm M bước từ cuối `history`"""
    history = np.asarray(history)
    if history.ndim == 1:
        history = history[:, None]
    if history.shape[0] < model.order:
        raise ArgumentError(f"AR prediction needs at least {model.order} frames of history")
    if history.shape[1] != model.coefficients.shape[0]:
        raise ArgumentError("history width does not match the fitted AR model")
    buf = list(history[-model.order:])
    out = []
    for _ in range(horizon):
        lags = np.stack(buf[::-1][:model.order], axis=1)  # (D, order), column k = x[t−1−k]
        nxt = np.sum(model.coefficients * lags, axis=1)
        out.append(nxt)
        buf.append(nxt)
    return np.asarray(out)
