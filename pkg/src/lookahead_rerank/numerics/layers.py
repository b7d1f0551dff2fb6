"""Building blocks shared by the evaluator and the generator.

Layers hold parameter names, not arrays; the arrays live in a ParameterSet so
optimizer state and checkpoints see one flat namespace.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParameterSet


class Linear:
    def __init__(self, ps: ParameterSet, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.ps, self.name = ps, name
        self.fan_in, self.fan_out = fan_in, fan_out
        ps.init_uniform(f"{name}.weight", (fan_in, fan_out), fan_in, rng)
        self.bias = bias
        if bias:
            ps.init_uniform(f"{name}.bias", (fan_out,), fan_in, rng)

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.ps[f"{self.name}.weight"])
        if self.bias:
            out = out + self.ps[f"{self.name}.bias"]
        return out


class Embedding:
    def __init__(self, ps: ParameterSet, name: str, n: int, dim: int, rng: np.random.Generator):
        self.ps, self.name, self.n = ps, name, n
        ps.init_uniform(f"{name}.table", (n, dim), dim, rng)

    def __call__(self, index: np.ndarray) -> Tensor:
        return ag.embedding(self.ps[f"{self.name}.table"], index)


class LayerNorm:
    """Layer norm over the last axis; ``groups`` > 0 gives each group its own gain/bias."""

    def __init__(self, ps: ParameterSet, name: str, dim: int, groups: int = 0):
        self.ps, self.name = ps, name
        shape = (groups, dim) if groups else (dim,)
        ps.init_const(f"{name}.gain", shape, 1.0)
        ps.init_const(f"{name}.bias", shape, 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.ps[f"{self.name}.gain"], self.ps[f"{self.name}.bias"])


class MultiHeadAttention:
    def __init__(self, ps: ParameterSet, name: str, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.ps, self.name = ps, name
        self.dim, self.n_heads = dim, n_heads
        # no key bias: softmax is shift invariant, so its gradient is identically zero
        self.qkv = Linear(ps, f"{name}.qkv", dim, 3 * dim, rng, bias=False)
        ps.init_uniform(f"{name}.q_bias", (dim,), dim, rng)
        ps.init_uniform(f"{name}.v_bias", (dim,), dim, rng)
        self.out = Linear(ps, f"{name}.out", dim, dim, rng)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        # x: (B, T, D)
        b, t, d = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(b, t, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        # split along the leading axis of size 3
        q = _take0(qkv, 0) + self.ps[f"{self.name}.q_bias"].reshape(h, 1, d // h)
        k = _take0(qkv, 1)
        v = _take0(qkv, 2) + self.ps[f"{self.name}.v_bias"].reshape(h, 1, d // h)
        ctx = ag.attention(q, k, v, causal=causal)  # (B, H, T, dh)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(ctx)


def _take0(x: Tensor, i: int) -> Tensor:
    out = x.data[i]

    def bw(g):
        full = np.zeros_like(x.data)
        full[i] = g
        ag._accumulate(x, full)

    return Tensor(out, (x,), bw, "take")


class TransformerBlock:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)) with GELU."""

    def __init__(self, ps: ParameterSet, name: str, dim: int, n_heads: int, ff_dim: int,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(ps, f"{name}.attn", dim, n_heads, rng)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.ff1 = Linear(ps, f"{name}.ff1", dim, ff_dim, rng)
        self.ff2 = Linear(ps, f"{name}.ff2", ff_dim, dim, rng)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.ff2(ag.gelu(self.ff1(self.ln2(x))))


class TransformerStack:
    def __init__(self, ps: ParameterSet, name: str, n_layers: int, dim: int, n_heads: int,
                 ff_dim: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(ps, f"{name}.{i}", dim, n_heads, ff_dim, rng)
                       for i in range(n_layers)]
        self.norm = LayerNorm(ps, f"{name}.norm", dim)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, causal=causal)
        return self.norm(x)
