"""
Micro-scale forecasting transformer with LoRA adapters on the query and value projections.

Forward pass:
    X_emb = X W_in + b_in + PE                      past frames, (B, N, D_h)
    Z_0   = [X_emb, Q]                              M learnable query tokens appended
    Z_l   = pre-LN blocks: Z + MHSA(LN(Z)), Z + FFN(LN(Z)); full attention over N+M positions
    Ŷ     = LN(Z_L)[:, −M:, :] W_out + b_out       (B, M, D)

With `linear_skip` the head forecasts the residual of a linear recursion shared by all features:
    Ŷ     = s·(LN(Z_L)[:, −M:, :] W_out + b_out) + Σ_n X[:, n, :] W_skip[n, :]

W_skip and s are solved in closed form before training (see `training.fit_linear_skip`) and are
never updated by the optimizer. W_q and W_v are used through W + α·A·B. Gradients are computed by
hand in `backward`; every weight matrix multiplies from the right (x @ W).
"""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from utils.errors import ArgumentError, ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
OUTPUT_INIT_STD = 0.02
TRAIN_MODES = ("full", "lora_only")
_LORA_SUFFIXES = ("A_q", "B_q", "A_v", "B_v")
FITTED_NAMES = ("W_skip", "head_scale")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class ModelConfig:
    feature_dim: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    lora_rank: int = 8
    lora_alpha: float = 1.0
    horizon: int = 10
    past_window: int = 50
    ff_mult: int = 4
    linear_skip: bool = False

    def __post_init__(self):
        for name in ("feature_dim", "d_model", "n_heads", "n_layers", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"model.{name}", "must be >= 1")
            setattr(self, name, int(getattr(self, name)))
        if self.d_model % self.n_heads:
            raise ConfigurationError("model.n_heads", f"d_model={self.d_model} is not divisible by n_heads")
        if not 0 <= int(self.lora_rank) <= self.d_model:
            raise ConfigurationError("model.lora_rank", "must lie in [0, d_model]")
        if int(self.horizon) < 1:
            raise ConfigurationError("horizon", "must be >= 1")
        if int(self.past_window) < 1:
            raise ConfigurationError("past_window", "must be >= 1")
        self.lora_rank = int(self.lora_rank)
        self.horizon = int(self.horizon)
        self.past_window = int(self.past_window)
        self.lora_alpha = float(self.lora_alpha)
        self.linear_skip = bool(self.linear_skip)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in declaration order (also the checkpoint order)"""
    D, H, r = config.feature_dim, config.d_model, config.lora_rank
    F = config.ff_mult * H
    shapes = [("W_in", (D, H)), ("b_in", (H,)), ("Q", (config.horizon, H))]
    for layer in range(config.n_layers):
        pre = f"blocks.{layer}."
        shapes += [
            (pre + "ln1_g", (H,)), (pre + "ln1_b", (H,)),
            (pre + "W_q", (H, H)), (pre + "W_k", (H, H)), (pre + "W_v", (H, H)), (pre + "W_o", (H, H)),
            (pre + "A_q", (H, r)), (pre + "B_q", (r, H)), (pre + "A_v", (H, r)), (pre + "B_v", (r, H)),
            (pre + "ln2_g", (H,)), (pre + "ln2_b", (H,)),
            (pre + "W_1", (H, F)), (pre + "b_1", (F,)), (pre + "W_2", (F, H)), (pre + "b_2", (H,)),
        ]
    shapes += [("lnf_g", (H,)), ("lnf_b", (H,)), ("W_out", (H, D)), ("b_out", (D,))]
    if config.linear_skip:
        shapes += [("W_skip", (config.past_window, config.horizon)), ("head_scale", (1,))]
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "W_skip":
            params[name] = np.zeros(shape)
        elif leaf.endswith("_g") or leaf == "head_scale":
            params[name] = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b") or leaf in ("B_q", "B_v"):
            params[name] = np.zeros(shape)
        elif leaf == "W_out" or leaf == "Q":
            params[name] = rng.normal(0.0, OUTPUT_INIT_STD, shape)
        elif leaf in ("A_q", "A_v"):
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return params


def positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length, dtype=float)[:, None]
    idx = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / width)
    return np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))


class MicroModel:
    """Parameter container; computation lives in `forward` / `backward`"""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = dict(parameter_shapes(config))
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ArgumentError(f"parameter {name} missing or not of shape {shape}")
        self.positional = positional_encoding(config.past_window, config.d_model)

    def names(self) -> List[str]:
        return [name for name, _ in parameter_shapes(self.config)]

    def trainable_names(self, mode: str) -> List[str]:
        if mode not in TRAIN_MODES:
            raise ArgumentError(f"training mode must be one of {TRAIN_MODES}")
        if mode == "full":
            return [n for n in self.names() if n not in FITTED_NAMES]
        return [n for n in self.names() if n.endswith(_LORA_SUFFIXES) or n in ("Q", "W_out", "b_out")]

    def copy(self) -> "MicroModel":
        return MicroModel(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)


def attention(Qm: np.ndarray, Km: np.ndarray, Vm: np.ndarray, return_weights: bool = False):
    """softmax(Q Kᵀ / √d_k) V over the last two axes"""
    if Qm.shape[-1] != Km.shape[-1] or Km.shape[-2] != Vm.shape[-2]:
        raise ArgumentError(f"attention shapes disagree: Q{Qm.shape} K{Km.shape} V{Vm.shape}")
    if not (np.all(np.isfinite(Qm)) and np.all(np.isfinite(Km)) and np.all(np.isfinite(Vm))):
        raise NumericalError("non-finite attention input")
    scores = (Qm @ np.swapaxes(Km, -1, -2)) / math.sqrt(Qm.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ Vm
    return (out, weights) if return_weights else out


def lora_effective(W: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float) -> np.ndarray:
    """W + α·A·B"""
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != W.shape[0] or B.shape[1] != W.shape[1] \
            or A.shape[1] != B.shape[0]:
        raise ArgumentError(f"LoRA shapes disagree: W{W.shape} A{A.shape} B{B.shape}")
    if A.shape[1] > min(W.shape):
        raise ArgumentError("LoRA rank exceeds the adapted width")
    return W + alpha * (A @ B)


def nmse_loss(Yhat: np.ndarray, Y: np.ndarray, eps: float = 1e-8) -> float:
    """Σ(Ŷ−Y)² / (ΣY² + ε)"""
    if Yhat.shape != Y.shape:
        raise ArgumentError(f"prediction {Yhat.shape} and target {Y.shape} differ in shape")
    return float(np.sum((Yhat - Y) ** 2) / (np.sum(Y ** 2) + eps))


def _layer_norm(x, gain, bias):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv_std = cache
    dxhat = dy * gain
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, np.sum(dy * xhat, axis=(0, 1)), np.sum(dy, axis=(0, 1))


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def _split_heads(x, n_heads):
    B, T, H = x.shape
    return x.reshape(B, T, n_heads, H // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * d)


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _check_input(model: MicroModel, X: np.ndarray):
    cfg = model.config
    if X.ndim != 3 or X.shape[1:] != (cfg.past_window, cfg.feature_dim):
        raise ArgumentError(
            f"input window must be (B, {cfg.past_window}, {cfg.feature_dim}), got {X.shape}"
        )


def forward(model: MicroModel, X: np.ndarray, return_cache: bool = False):
    cfg, p = model.config, model.params
    X = np.asarray(X, dtype=float)
    _check_input(model, X)
    B, N, _ = X.shape
    M = cfg.horizon

    emb = X @ p["W_in"] + p["b_in"] + model.positional[:N]
    Z = np.concatenate([emb, np.broadcast_to(p["Q"], (B, M, cfg.d_model))], axis=1)
    layers = []
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        a, ln1 = _layer_norm(Z, p[pre + "ln1_g"], p[pre + "ln1_b"])
        Wq = lora_effective(p[pre + "W_q"], p[pre + "A_q"], p[pre + "B_q"], cfg.lora_alpha)
        Wv = lora_effective(p[pre + "W_v"], p[pre + "A_v"], p[pre + "B_v"], cfg.lora_alpha)
        q = _split_heads(a @ Wq, cfg.n_heads)
        k = _split_heads(a @ p[pre + "W_k"], cfg.n_heads)
        v = _split_heads(a @ Wv, cfg.n_heads)
        heads, weights = attention(q, k, v, return_weights=True)
        merged = _merge_heads(heads)
        Z = Z + merged @ p[pre + "W_o"]

        c, ln2 = _layer_norm(Z, p[pre + "ln2_g"], p[pre + "ln2_b"])
        h1 = c @ p[pre + "W_1"] + p[pre + "b_1"]
        u, t = _gelu(h1)
        Z = Z + u @ p[pre + "W_2"] + p[pre + "b_2"]
        layers.append({"a": a, "ln1": ln1, "Wq": Wq, "Wv": Wv, "q": q, "k": k, "v": v,
                       "weights": weights, "merged": merged, "c": c, "ln2": ln2, "h1": h1, "u": u, "t": t})

    zf, lnf = _layer_norm(Z, p["lnf_g"], p["lnf_b"])
    h_pred = zf[:, -M:, :]
    head = h_pred @ p["W_out"] + p["b_out"]
    if cfg.linear_skip:
        Yhat = p["head_scale"][0] * head + skip_forecast(model, X)
    else:
        Yhat = head
    if not return_cache:
        return Yhat
    return Yhat, {"X": X, "layers": layers, "lnf": lnf, "zf": zf, "h_pred": h_pred, "head": head}


def skip_forecast(model: MicroModel, X: np.ndarray) -> np.ndarray:
    """Linear-recursion part of the forecast, zero when the model has no skip path"""
    X = np.asarray(X, dtype=float)
    if not model.config.linear_skip:
        return np.zeros((X.shape[0], model.config.horizon, X.shape[2]))
    return np.einsum("bnd,nm->bmd", X, model.params["W_skip"])


def loss_denominator(model: MicroModel, X: np.ndarray, Y: np.ndarray, eps: float = 1e-8) -> float:
    """ΣY² + ε, or the residual energy left by the skip path (ε scaled by s²) when there is one"""
    Y = np.asarray(Y, dtype=float)
    if not model.config.linear_skip:
        return float(np.sum(Y ** 2) + eps)
    scale = float(model.params["head_scale"][0])
    residual = Y - skip_forecast(model, X)
    return float(np.sum(residual ** 2) + eps * scale ** 2)


def backward(model: MicroModel, X: np.ndarray, Y: np.ndarray, eps: float = 1e-8,
             trainable: Optional[Iterable[str]] = None,
             denominator: Optional[float] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """NMSE loss and its exact gradients for the names in `trainable` (all when None).

    `denominator` replaces ΣY² + ε, so that chunks of one batch can be differentiated
    separately against the batch-wide normalization.
    """
    cfg, p = model.config, model.params
    Yhat, cache = forward(model, X, return_cache=True)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != Yhat.shape:
        raise ArgumentError(f"target {Y.shape} does not match prediction {Yhat.shape}")
    denom = loss_denominator(model, X, Y, eps) if denominator is None else float(denominator)
    loss = float(np.sum((Yhat - Y) ** 2) / denom)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")

    N, M, alpha = cfg.past_window, cfg.horizon, cfg.lora_alpha
    scale = 1.0 / math.sqrt(cfg.head_dim)
    g: Dict[str, np.ndarray] = {}

    dY = 2.0 * (Yhat - Y) / denom
    if cfg.linear_skip:
        g["W_skip"] = np.einsum("bnd,bmd->nm", cache["X"], dY)
        g["head_scale"] = np.array([np.sum(dY * cache["head"])])
        dY = dY * p["head_scale"][0]
    g["W_out"] = _wgrad(cache["h_pred"], dY)
    g["b_out"] = dY.sum(axis=(0, 1))
    dzf = np.zeros_like(cache["zf"])
    dzf[:, -M:, :] = dY @ p["W_out"].T
    dZ, g["lnf_g"], g["lnf_b"] = _layer_norm_backward(dzf, p["lnf_g"], cache["lnf"])

    for layer in reversed(range(cfg.n_layers)):
        pre = f"blocks.{layer}."
        c = cache["layers"][layer]

        g[pre + "W_2"] = _wgrad(c["u"], dZ)
        g[pre + "b_2"] = dZ.sum(axis=(0, 1))
        dh1 = (dZ @ p[pre + "W_2"].T) * _gelu_grad(c["h1"], c["t"])
        g[pre + "W_1"] = _wgrad(c["c"], dh1)
        g[pre + "b_1"] = dh1.sum(axis=(0, 1))
        dZ_ffn, g[pre + "ln2_g"], g[pre + "ln2_b"] = _layer_norm_backward(
            dh1 @ p[pre + "W_1"].T, p[pre + "ln2_g"], c["ln2"])
        dZ = dZ + dZ_ffn

        g[pre + "W_o"] = _wgrad(c["merged"], dZ)
        dheads = _split_heads(dZ @ p[pre + "W_o"].T, cfg.n_heads)
        weights = c["weights"]
        dweights = dheads @ np.swapaxes(c["v"], -1, -2)
        dv = np.swapaxes(weights, -1, -2) @ dheads
        dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
        dq = _merge_heads(dscores @ c["k"] * scale)
        dk = _merge_heads(np.swapaxes(dscores, -1, -2) @ c["q"] * scale)
        dv = _merge_heads(dv)

        dWq = _wgrad(c["a"], dq)
        dWv = _wgrad(c["a"], dv)
        g[pre + "W_q"] = dWq
        g[pre + "W_k"] = _wgrad(c["a"], dk)
        g[pre + "W_v"] = dWv
        g[pre + "A_q"] = alpha * dWq @ p[pre + "B_q"].T
        g[pre + "B_q"] = alpha * p[pre + "A_q"].T @ dWq
        g[pre + "A_v"] = alpha * dWv @ p[pre + "B_v"].T
        g[pre + "B_v"] = alpha * p[pre + "A_v"].T @ dWv

        da = dq @ c["Wq"].T + dk @ p[pre + "W_k"].T + dv @ c["Wv"].T
        dZ_att, g[pre + "ln1_g"], g[pre + "ln1_b"] = _layer_norm_backward(da, p[pre + "ln1_g"], c["ln1"])
        dZ = dZ + dZ_att

    demb = dZ[:, :N, :]
    g["Q"] = dZ[:, N:, :].sum(axis=0)
    g["W_in"] = _wgrad(cache["X"], demb)
    g["b_in"] = demb.sum(axis=(0, 1))

    names = model.names() if trainable is None else list(trainable)
    return loss, {name: g[name] for name in names}
