import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tests.conftest import random_params
from utils.errors import ArgumentError, ConfigurationError, NumericalError
from utils.micro_model import (
    FITTED_NAMES,
    MicroModel,
    ModelConfig,
    attention,
    backward,
    forward,
    lora_effective,
    loss_denominator,
    nmse_loss,
    parameter_shapes,
    skip_forecast,
)


def naive_attention(Q, K, V):
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        scores = [sum(Q[i, d] * K[j, d] for d in range(Q.shape[1])) / math.sqrt(Q.shape[1])
                  for j in range(K.shape[0])]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(K.shape[0]):
            out[i] += weights[j] / total * V[j]
    return out


def straight_line_forward(model, x):
    """Token-by-token composition of one sample, independent of the batched implementation"""
    p, cfg = model.params, model.config
    H, heads = cfg.d_model, cfg.n_heads
    dh = H // heads

    def layer_norm(v, g, b):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / math.sqrt(var + 1e-5) * g + b

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    def pe(pos):
        return np.array([
            math.sin(pos / 10000 ** (2 * (i // 2) / H)) if i % 2 == 0 else math.cos(pos / 10000 ** (2 * (i // 2) / H))
            for i in range(H)
        ])

    tokens = [x[n] @ p["W_in"] + p["b_in"] + pe(n) for n in range(cfg.past_window)]
    tokens += [p["Q"][m].copy() for m in range(cfg.horizon)]
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        Wq = p[pre + "W_q"] + cfg.lora_alpha * p[pre + "A_q"] @ p[pre + "B_q"]
        Wv = p[pre + "W_v"] + cfg.lora_alpha * p[pre + "A_v"] @ p[pre + "B_v"]
        normed = [layer_norm(z, p[pre + "ln1_g"], p[pre + "ln1_b"]) for z in tokens]
        q = [a @ Wq for a in normed]
        k = [a @ p[pre + "W_k"] for a in normed]
        v = [a @ Wv for a in normed]
        updated = []
        for i, z in enumerate(tokens):
            merged = np.zeros(H)
            for hd in range(heads):
                s = slice(hd * dh, (hd + 1) * dh)
                scores = [q[i][s] @ k[j][s] / math.sqrt(dh) for j in range(len(tokens))]
                top = max(scores)
                w = [math.exp(sc - top) for sc in scores]
                merged[s] = sum(w[j] / sum(w) * v[j][s] for j in range(len(tokens)))
            updated.append(z + merged @ p[pre + "W_o"])
        tokens = []
        for z in updated:
            c = layer_norm(z, p[pre + "ln2_g"], p[pre + "ln2_b"])
            tokens.append(z + gelu(c @ p[pre + "W_1"] + p[pre + "b_1"]) @ p[pre + "W_2"] + p[pre + "b_2"])
    out = [layer_norm(z, p["lnf_g"], p["lnf_b"]) @ p["W_out"] + p["b_out"] for z in tokens[-cfg.horizon:]]
    return np.array(out)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigurationError) as info:
            ModelConfig(feature_dim=4, d_model=10, n_heads=4)
        assert info.value.field == "model.n_heads"

    def test_rank_bounded_by_width(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(feature_dim=4, d_model=8, n_heads=2, lora_rank=9)

    def test_initial_lora_is_zero_update(self):
        model = MicroModel(ModelConfig(feature_dim=4, d_model=8, n_heads=2, horizon=2, past_window=3))
        assert_array_equal(model.params["blocks.0.B_q"], 0)
        assert np.any(model.params["blocks.0.A_q"] != 0)

    def test_declaration_order(self):
        names = [n for n, _ in parameter_shapes(ModelConfig(feature_dim=2, d_model=4, n_heads=1, n_layers=2,
                                                            horizon=1, past_window=1, lora_rank=1))]
        assert names[:3] == ["W_in", "b_in", "Q"]
        assert names[-4:] == ["lnf_g", "lnf_b", "W_out", "b_out"]
        assert names.index("blocks.0.W_q") < names.index("blocks.1.W_q")


class TestAttention:
    def test_singleton_sequence(self, rng):
        V = rng.standard_normal((1, 3))
        out = attention(rng.standard_normal((2, 4)), rng.standard_normal((1, 4)), V)
        assert_array_equal(out, np.repeat(V, 2, axis=0))

    def test_identical_keys_average_values(self, rng):
        K = np.tile(rng.standard_normal((1, 4)), (5, 1))
        V = rng.standard_normal((5, 3))
        out = attention(rng.standard_normal((2, 4)), K, V)
        assert np.max(np.abs(out - V.mean(axis=0))) <= 1e-12

    def test_matches_naive_loops(self, rng):
        Q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert np.max(np.abs(attention(Q, K, V) - naive_attention(Q, K, V))) <= 1e-12

    def test_rows_sum_to_one(self, rng):
        _, weights = attention(rng.standard_normal((2, 6, 4)), rng.standard_normal((2, 7, 4)),
                               rng.standard_normal((2, 7, 3)), return_weights=True)
        assert np.max(np.abs(weights.sum(axis=-1) - 1)) <= 1e-12

    def test_non_finite(self, rng):
        Q = rng.standard_normal((2, 2))
        Q[0, 0] = np.nan
        with pytest.raises(NumericalError):
            attention(Q, Q, Q)


class TestLora:
    def test_zero_alpha_and_zero_b(self, rng):
        W, A, B = rng.standard_normal((4, 4)), rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
        assert_array_equal(lora_effective(W, A, B, 0.0), W)
        assert_array_equal(lora_effective(W, A, np.zeros((2, 4)), 1.3), W)

    def test_rank_one_unit(self, rng):
        W = rng.standard_normal((3, 3))
        A = np.zeros((3, 1)); A[0, 0] = 1
        B = np.zeros((1, 3)); B[0, 0] = 1
        expected = W.copy(); expected[0, 0] += 0.5
        assert_array_equal(lora_effective(W, A, B, 0.5), expected)

    def test_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            lora_effective(np.zeros((3, 3)), np.zeros((4, 1)), np.zeros((1, 3)), 1.0)

    def test_forward_matches_base_when_update_vanishes(self, tiny_model, rng):
        X = rng.standard_normal((2, 4, 6))
        base_cfg = ModelConfig(**{**tiny_model.config.__dict__, "lora_rank": 0})
        base_params = {n: v for n, v in tiny_model.params.items() if not n.endswith(("A_q", "B_q", "A_v", "B_v"))}
        base_params.update({n: np.zeros(s) for n, s in parameter_shapes(base_cfg) if n not in base_params})
        base = MicroModel(base_cfg, base_params)

        no_alpha = tiny_model.copy()
        no_alpha.config.lora_alpha = 0.0
        assert_array_equal(forward(no_alpha, X), forward(base, X))

        zero_b = tiny_model.copy()
        zero_b.params["blocks.0.B_q"][:] = 0
        zero_b.params["blocks.0.B_v"][:] = 0
        assert_array_equal(forward(zero_b, X), forward(base, X))


class TestForward:
    def test_shape(self, tiny_model, rng):
        assert forward(tiny_model, rng.standard_normal((3, 4, 6))).shape == (3, 2, 6)

    def test_bad_shape(self, tiny_model):
        with pytest.raises(ArgumentError):
            forward(tiny_model, np.zeros((1, 5, 6)))

    def test_matches_straight_line_composition(self, rng):
        cfg = ModelConfig(feature_dim=2, d_model=4, n_heads=2, n_layers=1, lora_rank=1, lora_alpha=0.5,
                          horizon=1, past_window=2, ff_mult=2)
        model = random_params(MicroModel(cfg), rng, scale=0.5)
        x = rng.standard_normal((1, 2, 2))
        assert np.max(np.abs(forward(model, x)[0] - straight_line_forward(model, x[0]))) <= 1e-12

    def test_batch_rows_independent(self, tiny_model, rng):
        x = rng.standard_normal((1, 4, 6))
        out = forward(tiny_model, np.concatenate([x, rng.standard_normal((1, 4, 6)), x]))
        assert_allclose(out[0], out[2], rtol=0, atol=1e-14)
        assert_allclose(out[0], forward(tiny_model, x)[0], rtol=0, atol=1e-14)

    def test_deterministic(self, tiny_model, rng):
        x = rng.standard_normal((2, 4, 6))
        assert_array_equal(forward(tiny_model, x), forward(tiny_model, x))


class TestLoss:
    def test_examples(self, rng):
        Y = rng.standard_normal((2, 3, 4))
        energy = np.sum(Y ** 2)
        assert nmse_loss(Y, Y) == 0.0
        assert nmse_loss(np.zeros_like(Y), Y, 1e-8) == pytest.approx(energy / (energy + 1e-8), rel=1e-15)
        assert nmse_loss(2 * Y, Y, 1e-8) == pytest.approx(energy / (energy + 1e-8), rel=1e-12)
        assert nmse_loss(np.zeros_like(Y), Y, 1e-8) < 1


class TestBackward:
    def test_zero_gradient_at_exact_fit(self, tiny_model, rng):
        X = rng.standard_normal((2, 4, 6))
        loss, grads = backward(tiny_model, X, forward(tiny_model, X))
        assert loss == 0.0
        for g in grads.values():
            assert np.max(np.abs(g)) <= 1e-12

    def test_matches_central_differences(self, tiny_model, rng):
        X = rng.standard_normal((2, 4, 6))
        Y = rng.standard_normal((2, 2, 6))
        _, grads = backward(tiny_model, X, Y)
        for name, value in tiny_model.params.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                orig = value[idx]
                step = 1e-5 * max(1.0, abs(orig))
                value[idx] = orig + step
                up = nmse_loss(forward(tiny_model, X), Y)
                value[idx] = orig - step
                down = nmse_loss(forward(tiny_model, X), Y)
                value[idx] = orig
                numeric[idx] = (up - down) / (2 * step)
            err = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-12)
            assert err <= 1e-4, name

    def test_lora_only_gradient_set(self, tiny_model, rng):
        X, Y = rng.standard_normal((2, 4, 6)), rng.standard_normal((2, 2, 6))
        trainable = tiny_model.trainable_names("lora_only")
        _, grads = backward(tiny_model, X, Y, trainable=trainable)
        assert set(grads) == {"Q", "W_out", "b_out", "blocks.0.A_q", "blocks.0.B_q", "blocks.0.A_v", "blocks.0.B_v"}
        for frozen in ("blocks.0.W_q", "blocks.0.W_k", "blocks.0.W_v", "blocks.0.W_o", "W_in"):
            assert frozen not in grads

    def test_chunked_gradients_sum_to_batch(self, tiny_model, rng):
        X, Y = rng.standard_normal((4, 4, 6)), rng.standard_normal((4, 2, 6))
        loss, grads = backward(tiny_model, X, Y)
        denom = float(np.sum(Y ** 2) + 1e-8)
        l1, g1 = backward(tiny_model, X[:2], Y[:2], denominator=denom)
        l2, g2 = backward(tiny_model, X[2:], Y[2:], denominator=denom)
        assert l1 + l2 == pytest.approx(loss, rel=1e-12)
        for name in grads:
            assert_allclose(g1[name] + g2[name], grads[name], rtol=1e-10, atol=1e-14)

    def test_non_finite_loss(self, tiny_model, rng):
        X = rng.standard_normal((1, 4, 6))
        Y = np.full((1, 2, 6), np.inf)
        with pytest.raises(NumericalError):
            backward(tiny_model, X, Y)


@pytest.fixture
def skip_model(rng):
    cfg = ModelConfig(feature_dim=6, d_model=8, n_heads=2, n_layers=1, lora_rank=2, lora_alpha=0.7,
                      horizon=2, past_window=4, ff_mult=2, linear_skip=True)
    return random_params(MicroModel(cfg, seed=3), rng)


class TestLinearSkip:
    def test_fresh_skip_path_is_inert(self, rng):
        cfg = ModelConfig(feature_dim=6, d_model=8, n_heads=2, n_layers=1, lora_rank=2,
                          horizon=2, past_window=4, ff_mult=2)
        plain = MicroModel(cfg, seed=5)
        skipped = MicroModel(ModelConfig(**{**cfg.__dict__, "linear_skip": True}), seed=5)
        assert_array_equal(skipped.params["W_skip"], np.zeros((4, 2)))
        assert_array_equal(skipped.params["head_scale"], [1.0])
        X = rng.standard_normal((3, 4, 6))
        assert_array_equal(forward(skipped, X), forward(plain, X))

    def test_forward_is_scaled_head_plus_recursion(self, skip_model, rng):
        X = rng.standard_normal((3, 4, 6))
        head_cfg = ModelConfig(**{**skip_model.config.__dict__, "linear_skip": False})
        head = MicroModel(head_cfg, {n: v for n, v in skip_model.params.items() if n not in FITTED_NAMES})
        expected = skip_model.params["head_scale"][0] * forward(head, X)
        for m in range(2):
            for n in range(4):
                expected[:, m, :] += skip_model.params["W_skip"][n, m] * X[:, n, :]
        assert_allclose(forward(skip_model, X), expected, rtol=0, atol=1e-13)

    def test_fitted_parameters_are_never_trainable(self, skip_model):
        names = set(skip_model.names())
        assert set(FITTED_NAMES) <= names
        assert set(skip_model.trainable_names("full")) == names - set(FITTED_NAMES)
        assert not set(FITTED_NAMES) & set(skip_model.trainable_names("lora_only"))

    def test_denominator_is_residual_energy(self, skip_model, rng):
        X, Y = rng.standard_normal((2, 4, 6)), rng.standard_normal((2, 2, 6))
        s = skip_model.params["head_scale"][0]
        expected = np.sum((Y - skip_forecast(skip_model, X)) ** 2) + 1e-8 * s ** 2
        assert loss_denominator(skip_model, X, Y) == pytest.approx(expected, rel=1e-14)
        loss, _ = backward(skip_model, X, Y)
        assert loss == pytest.approx(np.sum((forward(skip_model, X) - Y) ** 2) / expected, rel=1e-12)

    def test_matches_central_differences(self, skip_model, rng):
        X = rng.standard_normal((2, 4, 6))
        Y = rng.standard_normal((2, 2, 6))
        denom = loss_denominator(skip_model, X, Y)
        _, grads = backward(skip_model, X, Y, denominator=denom)
        assert set(grads) == set(skip_model.names())
        for name, value in skip_model.params.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                orig = value[idx]
                step = 1e-5 * max(1.0, abs(orig))
                value[idx] = orig + step
                up = np.sum((forward(skip_model, X) - Y) ** 2) / denom
                value[idx] = orig - step
                down = np.sum((forward(skip_model, X) - Y) ** 2) / denom
                value[idx] = orig
                numeric[idx] = (up - down) / (2 * step)
            err = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-12)
            assert err <= 1e-4, name
