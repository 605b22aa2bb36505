"""Parameter containers and the layers the occupancy network is built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        bound = 1.0 / math.sqrt(cin)
        self.weight = parameter(rng.uniform(-bound, bound, (cin, cout)))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, dilation=1):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = parameter(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.dilation = dilation

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation)


class LayerNorm(Module):
    def __init__(self, c):
        self.gamma = parameter(np.ones(c))
        self.beta = parameter(np.zeros(c))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, cin, hidden, cout, rng):
        self.fc1 = Linear(cin, hidden, rng)
        self.fc2 = Linear(hidden, cout, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, c, heads, rng):
        if c % heads:
            raise T.ConfigError(f"width {c} not divisible by heads={heads}")
        self.heads = heads
        self.wq = Linear(c, c, rng)
        self.wk = Linear(c, c, rng)
        self.wv = Linear(c, c, rng)
        self.wo = Linear(c, c, rng)

    def forward(self, q, kv, return_weights=False):
        return T.cross_attention(self.wq(q), self.wk(kv), self.wv(kv), self.heads,
                                 self.wo.weight, self.wo.bias, return_weights=return_weights)


class AttentionBlock(Module):
    """Pre-norm attention + feed-forward, each with a residual connection."""

    def __init__(self, c, heads, rng, ffn_mult=2, cross=True):
        self.norm_q = LayerNorm(c)
        self.norm_kv = LayerNorm(c) if cross else None
        self.attn = MultiHeadAttention(c, heads, rng)
        self.norm_ff = LayerNorm(c)
        self.ffn = MLP(c, ffn_mult * c, c, rng)

    def forward(self, q, kv=None):
        qn = self.norm_q(q)
        kvn = qn if self.norm_kv is None else self.norm_kv(kv)
        x = q + self.attn(qn, kvn)
        return x + self.ffn(self.norm_ff(x))
