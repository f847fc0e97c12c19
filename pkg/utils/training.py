"""
Training loop for the micro forecaster: code realification, z-score normalization,
sliding windows over a contiguous temporal split, AdamW/SGD updates and inference.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from utils.errors import ArgumentError, ConfigurationError, NumericalError, TrainingError
from utils.link_metrics import nmse_db
from utils.micro_model import TRAIN_MODES, MicroModel, backward, forward, loss_denominator, skip_forecast

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")
TRAIN_FRACTION = 0.8
SKIP_RIDGE = 1e-9


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    seed: int = 42
    eps: float = 1e-8
    mode: str = "lora_only"
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    threads: int = 1
    skip_ridge: float = SKIP_RIDGE

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("train.lr", "must be > 0")
        if not self.eps > 0:
            raise ConfigurationError("train.eps", "must be > 0")
        if int(self.batch_size) < 1:
            raise ConfigurationError("train.batch_size", "must be >= 1")
        if int(self.epochs) < 1:
            raise ConfigurationError("train.epochs", "must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError("train.mode", f"must be one of {TRAIN_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError("train.optimizer", f"must be one of {OPTIMIZERS}")
        if self.weight_decay < 0:
            raise ConfigurationError("train.weight_decay", "must be >= 0")
        if int(self.threads) < 1:
            raise ConfigurationError("train.threads", "must be >= 1")
        if self.skip_ridge < 0:
            raise ConfigurationError("train.skip_ridge", "must be >= 0")
        self.batch_size, self.epochs, self.threads = int(self.batch_size), int(self.epochs), int(self.threads)


def realify(codes: np.ndarray) -> np.ndarray:
    """(…, K) complex → (…, 2K) real: real parts first, then imaginary parts"""
    codes = np.asarray(codes)
    return np.concatenate([codes.real, codes.imag], axis=-1)


def complexify(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape[-1] % 2:
        raise ArgumentError("feature width must be even to recombine real and imaginary parts")
    half = features.shape[-1] // 2
    return features[..., :half] + 1j * features[..., half:]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalizer":
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ArgumentError("normalizer needs a non-empty (T, D) feature matrix")
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=mean, std=std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return features * self.std + self.mean


@dataclass
class Window:
    X: np.ndarray  # (B, N, D)
    Y: np.ndarray  # (B, M, D)

    def __len__(self):
        return self.X.shape[0]


def build_windows(features: np.ndarray, past_window: int, horizon: int) -> Window:
    """Stride-1 windows: past frames t..t+N−1, targets t+N..t+N+M−1"""
    features = np.asarray(features, dtype=float)
    count = features.shape[0] - past_window - horizon + 1
    if count < 1:
        raise ArgumentError(
            f"{features.shape[0]} frames cannot hold one window of {past_window} past + {horizon} future frames"
        )
    starts = np.arange(count)[:, None]
    X = features[starts + np.arange(past_window)[None, :]]
    Y = features[starts + past_window + np.arange(horizon)[None, :]]
    return Window(X=X, Y=Y)


@dataclass
class PreparedData:
    train: Window
    val: Window
    normalizer: Normalizer
    delta: bool
    n_train_frames: int


def split_point(n_frames: int, train_fraction: float = TRAIN_FRACTION) -> int:
    return int(math.floor(train_fraction * n_frames))


def prepare_dataset(codes: np.ndarray, past_window: int, horizon: int, delta: bool = False,
                    train_fraction: float = TRAIN_FRACTION) -> PreparedData:
    """Normalized training and held-out windows from a (T, K) complex code sequence.

    The first `train_fraction` of frames feed training windows and the normalizer; held-out
    windows start at the first frame after the training range.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ArgumentError("codes must be a (T, K) sequence")
    n_train = split_point(codes.shape[0], train_fraction)
    features = realify(codes)
    if delta:
        features = np.diff(features, axis=0)
        n_train -= 1
    train_feats, val_feats = features[:n_train], features[n_train:]
    try:
        normalizer = Normalizer.fit(train_feats)
        train = build_windows(normalizer.transform(train_feats), past_window, horizon)
        val = build_windows(normalizer.transform(val_feats), past_window, horizon)
    except ArgumentError as exc:
        raise ArgumentError(f"insufficient frames for the temporal split: {exc}") from exc
    logger.info("Prepared %d training and %d held-out windows (N=%d, M=%d, delta=%s)",
                len(train), len(val), past_window, horizon, delta)
    return PreparedData(train=train, val=val, normalizer=normalizer, delta=delta,
                        n_train_frames=split_point(codes.shape[0], train_fraction))


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, grad in grads.items():
            param = params[name]
            if self.weight_decay:
                param *= 1.0 - self.lr * self.weight_decay
            param -= self.lr * grad


class AdamW:
    """Adam with decoupled weight decay; state is kept only for the parameters it updates"""

    def __init__(self, lr: float, weight_decay: float = 0.0, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        for name, grad in grads.items():
            param = params[name]
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= self.b1
            m += (1 - self.b1) * grad
            v *= self.b2
            v += (1 - self.b2) * grad * grad
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            if self.weight_decay:
                param *= 1.0 - self.lr * self.weight_decay
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.weight_decay)
    return AdamW(cfg.lr, cfg.weight_decay)


def batch_gradients(model: MicroModel, X: np.ndarray, Y: np.ndarray, eps: float,
                    trainable: Sequence[str], executor: Optional[ThreadPoolExecutor] = None,
                    n_chunks: int = 1):
    """Loss and gradients of one batch; chunked on the executor and summed in chunk order"""
    denom = loss_denominator(model, X, Y, eps)
    if executor is None or n_chunks <= 1 or X.shape[0] < 2:
        return backward(model, X, Y, trainable=trainable, denominator=denom)

    chunks = [idx for idx in np.array_split(np.arange(X.shape[0]), n_chunks) if idx.size]
    results = list(executor.map(
        lambda idx: backward(model, X[idx], Y[idx], trainable=trainable, denominator=denom), chunks
    ))
    loss = 0.0
    grads = {name: np.zeros_like(model.params[name]) for name in trainable}
    for chunk_loss, chunk_grads in results:
        loss += chunk_loss
        for name in trainable:
            grads[name] += chunk_grads[name]
    return loss, grads


def fit_linear_skip(model: MicroModel, window: Window, ridge: float = SKIP_RIDGE) -> float:
    """Fit the skip path of `model` on `window` and return the head scale.

    One next-frame recursion over the N past frames is shared by every feature and solved by ridge
    least squares (the load is `ridge` times the mean Gram diagonal). It is unrolled M steps into
    W_skip, so horizon m feeds back the m−1 earlier forecasts. The head scale is the RMS residual
    the skip path leaves on the window, or 1 when that residual vanishes.
    """
    cfg = model.config
    if not cfg.linear_skip:
        raise ArgumentError("model has no linear skip path")
    if ridge < 0:
        raise ArgumentError("ridge must be >= 0")
    N, M = cfg.past_window, cfg.horizon
    lags = np.swapaxes(window.X, 1, 2).reshape(-1, N)  # one row per (window, feature), oldest frame first
    target = window.Y[:, 0, :].reshape(-1)
    gram = lags.T @ lags
    trace = float(np.trace(gram))
    load = ridge * (trace / N if trace > 0 else 1.0)
    try:
        coeffs = linalg.solve(gram + load * np.eye(N), lags.T @ target, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise NumericalError("linear skip normal equations could not be solved") from exc

    # row i expresses frame i of past+future as a combination of the N inputs
    rows = np.zeros((N + M, N))
    rows[:N] = np.eye(N)
    for m in range(M):
        rows[N + m] = coeffs @ rows[m:m + N]
    model.params["W_skip"] = rows[N:].T.copy()

    residual = window.Y - skip_forecast(model, window.X)
    rms = float(np.sqrt(np.mean(residual ** 2)))
    scale = rms if rms > 0 and math.isfinite(rms) else 1.0
    model.params["head_scale"] = np.array([scale])
    logger.info("Linear skip fitted on %d rows: residual RMS %.3g of the normalized targets", lags.shape[0], rms)
    return scale


def validation_nmse_db(model: MicroModel, window: Window, normalizer: Normalizer) -> float:
    """Held-out NMSE (dB) on de-normalized features"""
    pred = normalizer.inverse(forward(model, window.X))
    truth = normalizer.inverse(window.Y)
    return nmse_db(pred.reshape(-1), truth.reshape(-1))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_nmse_db: float


@dataclass
class TrainResult:
    model: MicroModel
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [rec.loss for rec in self.history]


def train(model: MicroModel, data: PreparedData, cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Mini-batch NMSE training; updates `model.params` in place.

    A model with a skip path has it solved first; the transformer then learns the residual.
    """
    if model.config.feature_dim != data.normalizer.dim:
        raise ArgumentError(
            f"model feature_dim {model.config.feature_dim} does not match data width {data.normalizer.dim}"
        )
    if model.config.linear_skip:
        try:
            fit_linear_skip(model, data.train, cfg.skip_ridge)
        except NumericalError as exc:
            raise TrainingError(0, str(exc)) from exc
    trainable = model.trainable_names(cfg.mode)
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_windows = len(data.train)
    result = TrainResult(model=model)
    logger.info("Training %d/%d parameters (%s, %s) on %d windows for %d epochs",
                sum(model.params[n].size for n in trainable), model.n_params, cfg.mode,
                cfg.optimizer, n_windows, cfg.epochs)

    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n_windows)
            losses = []
            for start in range(0, n_windows, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                try:
                    loss, grads = batch_gradients(model, data.train.X[idx], data.train.Y[idx], cfg.eps,
                                                  trainable, executor, cfg.threads)
                except NumericalError as exc:
                    raise TrainingError(epoch, str(exc)) from exc
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingError(epoch, "non-finite gradients")
                optimizer.step(model.params, grads)
                losses.append(loss)

            try:
                val_db = validation_nmse_db(model, data.val, data.normalizer)
            except NumericalError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            record = EpochRecord(epoch=epoch, loss=float(np.mean(losses)), val_nmse_db=val_db)
            if not math.isfinite(record.loss):
                raise TrainingError(epoch, "training loss diverged")
            result.history.append(record)
            logger.info("Epoch %d/%d: loss=%.6g, val NMSE=%.2f dB", epoch, cfg.epochs, record.loss, val_db)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if executor is not None:
            executor.shutdown()
    return result


def predict_codes(model: MicroModel, history: np.ndarray, normalizer: Normalizer,
                  delta: bool = False) -> np.ndarray:
    """Forecast the next M complex code vectors from the most recent codes in `history` (T, K)"""
    history = np.asarray(history)
    N = model.config.past_window
    needed = N + 1 if delta else N
    if history.ndim != 2 or history.shape[0] < needed:
        raise ArgumentError(f"history must hold at least {needed} code vectors")
    features = realify(history[-needed:])
    if delta:
        features = np.diff(features, axis=0)
    pred = normalizer.inverse(forward(model, normalizer.transform(features)[None])[0])
    if delta:
        pred = realify(history[-1])[None, :] + np.cumsum(pred, axis=0)
    return complexify(pred)
