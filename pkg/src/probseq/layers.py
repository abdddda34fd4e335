"""Network building blocks: bidirectional LSTM stack, masked multi-head
self-attention with residual, and MLP output heads."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, concat, masked_softmax, stack, where
from .errors import ConfigError


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered from attributes in
    definition order, which fixes the naming used by checkpoints."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_parameters(module):
    return int(sum(p.size for p in module.parameters().values()))


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = xavier_uniform(rng, in_dim, out_dim)
        self.bias = zeros_param(out_dim)

    def forward(self, x):
        return x @ self.weight + self.bias


class LstmDirection(Module):
    """One direction of one LSTM layer; gate order is input, forget, cell, output."""

    def __init__(self, input_dim, hidden_dim, rng):
        self.hidden_dim = hidden_dim
        self.w_input = xavier_uniform(rng, input_dim, 4 * hidden_dim)
        self.w_recurrent = xavier_uniform(rng, hidden_dim, 4 * hidden_dim)
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim : 2 * hidden_dim] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def forward(self, X, mask, reverse=False):
        B, T, _ = X.shape
        H = self.hidden_dim
        projected = X @ self.w_input + self.bias
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        blank = Tensor(np.zeros((B, H)))
        outputs = [blank] * T
        for t in reversed(range(T)) if reverse else range(T):
            valid = mask[:, t : t + 1]
            if not valid.any():
                continue
            gates = projected[:, t, :] + h @ self.w_recurrent
            i = gates[:, :H].sigmoid()
            f = gates[:, H : 2 * H].sigmoid()
            g = gates[:, 2 * H : 3 * H].tanh()
            o = gates[:, 3 * H :].sigmoid()
            c_new = f * c + i * g
            h_new = o * c_new.tanh()
            # padded steps carry state through untouched
            h = where(valid, h_new, h)
            c = where(valid, c_new, c)
            outputs[t] = where(valid, h_new, blank)
        return stack(outputs, axis=1)


class LstmStack(Module):
    def __init__(self, input_dim, hidden_dim, num_layers, rng):
        if num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.layers = []
        width = input_dim
        for _ in range(num_layers):
            self.layers.append(
                _BiLayer(LstmDirection(width, hidden_dim, rng), LstmDirection(width, hidden_dim, rng))
            )
            width = 2 * hidden_dim

    @property
    def output_dim(self):
        return 2 * self.hidden_dim

    def forward(self, X, mask):
        if X.ndim != 3 or X.shape[-1] != self.input_dim:
            raise ConfigError(f"LSTM expects B x T x {self.input_dim} input, got {X.shape}")
        mask = np.asarray(mask, dtype=bool)
        # zero the padding so garbage there cannot reach gradients via 0 * NaN
        out = where(mask[:, :, None], X, 0.0)
        for layer in self.layers:
            out = concat(
                [layer.forward_dir(out, mask, reverse=False), layer.backward_dir(out, mask, reverse=True)],
                axis=-1,
            )
        return out


class _BiLayer(Module):
    def __init__(self, forward_dir, backward_dir):
        self.forward_dir = forward_dir
        self.backward_dir = backward_dir


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention, ``A = attn(H) + H`` when residual."""

    def __init__(self, model_dim, num_heads, rng):
        if num_heads < 1 or model_dim % num_heads:
            raise ConfigError(f"model_dim {model_dim} not divisible by {num_heads} heads")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.query = Linear(model_dim, model_dim, rng)
        self.key = Linear(model_dim, model_dim, rng)
        self.value = Linear(model_dim, model_dim, rng)
        self.out = Linear(model_dim, model_dim, rng)

    def forward(self, H, mask, residual=True):
        B, T, M = H.shape
        if M != self.model_dim:
            raise ConfigError(f"attention expects width {self.model_dim}, got {M}")
        heads, dk = self.num_heads, M // self.num_heads

        def split(x):
            return x.reshape(B, T, heads, dk).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(H)), split(self.key(H)), split(self.value(H))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        weights = masked_softmax(scores, mask)
        context = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, M)
        attended = self.out(context)
        return attended + H if residual else attended


ACTIVATIONS = {
    "relu": lambda x: x.relu(),
    "tanh": lambda x: x.tanh(),
}


class MlpHead(Module):
    """Affine stack ending in a single raw (unactivated) output."""

    def __init__(self, in_dim, hidden_widths, rng, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        widths = [in_dim, *hidden_widths, 1]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, a):
        act = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            a = act(layer(a))
        return self.layers[-1](a)
