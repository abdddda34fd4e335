import math

import numpy as np
import pytest

from probseq.autodiff import Tensor, backward
from probseq.errors import ConfigError
from probseq.layers import LstmStack, MlpHead, MultiHeadAttention, count_parameters, xavier_uniform


def zero_all(module):
    for _, p in module.named_parameters():
        p.data = np.zeros_like(p.data)


def test_xavier_bounds(rng):
    w = xavier_uniform(rng, 30, 50).data
    limit = math.sqrt(6.0 / 80)
    assert w.shape == (30, 50) and np.abs(w).max() <= limit and np.abs(w).max() > 0.8 * limit


def test_lstm_init_forget_bias_and_width(rng):
    stack = LstmStack(5, 3, 2, rng)
    assert stack.output_dim == 6
    for layer in stack.layers:
        for direction in (layer.forward_dir, layer.backward_dir):
            b = direction.bias.data
            np.testing.assert_array_equal(b[3:6], 1.0)
            np.testing.assert_array_equal(np.delete(b, np.s_[3:6]), 0.0)
    out = stack(Tensor(rng.normal(size=(2, 4, 5))), np.ones((2, 4), bool))
    assert out.shape == (2, 4, 6)


def test_lstm_zero_weights_give_zero_output(rng):
    stack = LstmStack(4, 3, 1, rng)
    zero_all(stack)
    out = stack(Tensor(rng.normal(size=(2, 5, 4))), np.ones((2, 5), bool))
    np.testing.assert_array_equal(out.data, 0.0)


def test_lstm_single_step(rng):
    stack = LstmStack(4, 3, 1, rng)
    x = Tensor(rng.normal(size=(1, 1, 4)))
    out = stack(x, np.ones((1, 1), bool)).data
    assert out.shape == (1, 1, 6)
    # with one step both directions start from zero state and read the same input
    fwd = stack.layers[0].forward_dir(x, np.ones((1, 1), bool)).data
    bwd = stack.layers[0].backward_dir(x, np.ones((1, 1), bool), reverse=True).data
    np.testing.assert_array_equal(out[..., :3], fwd)
    np.testing.assert_array_equal(out[..., 3:], bwd)


def test_lstm_padding_matches_truncated_run(rng):
    stack = LstmStack(4, 3, 2, rng)
    X = rng.normal(size=(1, 3, 4))
    padded = X.copy()
    padded[0, 2] = 1e6
    full = stack(Tensor(padded), np.array([[True, True, False]])).data
    short = stack(Tensor(X[:, :2]), np.ones((1, 2), bool)).data
    np.testing.assert_array_equal(full[:, :2], short)
    np.testing.assert_array_equal(full[:, 2], 0.0)


def test_lstm_rejects_wrong_width(rng):
    with pytest.raises(ConfigError):
        LstmStack(4, 3, 1, rng)(Tensor(np.zeros((1, 2, 5))), np.ones((1, 2), bool))


def brute_force_attention(mha, H, mask, residual):
    """Per-batch, per-head, per-query loops in plain numpy."""
    B, T, M = H.shape
    h = mha.num_heads
    dk = M // h

    def lin(layer, x):
        return x @ layer.weight.data + layer.bias.data

    out = np.zeros_like(H)
    for b in range(B):
        q, k, v = lin(mha.query, H[b]), lin(mha.key, H[b]), lin(mha.value, H[b])
        context = np.zeros((T, M))
        for head in range(h):
            cols = slice(head * dk, (head + 1) * dk)
            for i in range(T):
                if not mask[b, i]:
                    continue
                scores = [q[i, cols] @ k[j, cols] / math.sqrt(dk) for j in range(T) if mask[b, j]]
                valid = [j for j in range(T) if mask[b, j]]
                w = np.exp(np.array(scores) - max(scores))
                w /= w.sum()
                context[i, cols] = sum(wj * v[j, cols] for wj, j in zip(w, valid))
        out[b] = lin(mha.out, context) + (H[b] if residual else 0.0)
    return out


@pytest.mark.parametrize("residual", [True, False])
def test_attention_matches_brute_force(rng, residual):
    mha = MultiHeadAttention(6, 3, rng)
    H = rng.normal(size=(2, 3, 6))
    mask = np.array([[True, True, True], [True, True, False]])
    got = mha(Tensor(H), mask, residual=residual).data
    want = brute_force_attention(mha, H, mask, residual)
    np.testing.assert_allclose(got[mask], want[mask], atol=1e-10, rtol=0)


def test_attention_zero_projections_is_identity(rng):
    mha = MultiHeadAttention(4, 2, rng)
    zero_all(mha)
    H = rng.normal(size=(1, 3, 4))
    np.testing.assert_array_equal(mha(Tensor(H), np.ones((1, 3), bool)).data, H)


def test_attention_single_step_attends_to_itself(rng):
    mha = MultiHeadAttention(4, 2, rng)
    H = rng.normal(size=(1, 1, 4))
    v = H[0] @ mha.value.weight.data + mha.value.bias.data
    want = v @ mha.out.weight.data + mha.out.bias.data + H[0]
    np.testing.assert_allclose(mha(Tensor(H), np.ones((1, 1), bool)).data[0], want, atol=1e-14)


def test_attention_head_divisibility(rng):
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, rng)


def test_mlp_head_constant_and_passthrough(rng):
    head = MlpHead(3, (), rng)
    zero_all(head)
    head.layers[0].bias.data[:] = 2.5
    np.testing.assert_array_equal(head(Tensor(rng.normal(size=(4, 3)))).data, 2.5)
    ident = MlpHead(1, (), rng)
    ident.layers[0].weight.data[:] = 1.0
    ident.layers[0].bias.data[:] = 0.0
    x = rng.normal(size=(5, 1))
    np.testing.assert_array_equal(ident(Tensor(x)).data, x)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mlp_head_matches_manual_chain(rng, activation):
    head = MlpHead(2, (3,), rng, activation)
    w1 = np.array([[1.0, -1.0, 0.5], [2.0, 0.0, -0.5]])
    b1 = np.array([0.1, 0.2, -0.3])
    w2 = np.array([[1.0], [-2.0], [3.0]])
    b2 = np.array([0.25])
    head.layers[0].weight.data, head.layers[0].bias.data = w1, b1
    head.layers[1].weight.data, head.layers[1].bias.data = w2, b2
    x = np.array([[0.5, -1.0], [1.5, 2.0]])
    act = (lambda z: np.maximum(z, 0)) if activation == "relu" else np.tanh
    np.testing.assert_array_equal(head(Tensor(x)).data, act(x @ w1 + b1) @ w2 + b2)
    # the last layer is linear: a negative raw output survives
    head.layers[1].bias.data = np.array([-100.0])
    assert (head(Tensor(x)).data < 0).all()


def test_unknown_activation(rng):
    with pytest.raises(ConfigError):
        MlpHead(2, (3,), rng, "gelu")


def test_module_parameter_walk(rng):
    stack = LstmStack(3, 2, 2, rng)
    names = [n for n, _ in stack.named_parameters()]
    assert names[0] == "layers.0.forward_dir.w_input"
    assert len(names) == len(set(names)) == 12
    # per direction: 4H(D + H) + 4H
    assert count_parameters(stack) == 2 * (8 * 5 + 8) + 2 * (8 * 6 + 8)


def test_zero_grad_clears(rng):
    head = MlpHead(2, (3,), rng)
    backward(head(Tensor(rng.normal(size=(4, 2)))).sum())
    assert all(p.grad is not None for _, p in head.named_parameters())
    head.zero_grad()
    assert all(p.grad is None for _, p in head.named_parameters())
