"""Reverse-mode autodiff over dense numpy arrays.

Only the primitive set the two reranking models need is provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the graph once in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

# rows per BLAS call; fixed so a row's result never depends on batch size
MATMUL_BLOCK = 256


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name")
    # make ndarray (op) Tensor defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None,
                 op: str = "leaf", name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), op="const")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.op == "const":
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children, each once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns a gradient per entry of ``params``; parameters the loss does not
    reach get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    if params is None:
        return {}
    reached = {id(node) for node in order}
    out = {}
    for name, p in params.items():
        hit = id(p) in reached and p.grad is not None
        out[name] = p.grad if hit else np.zeros_like(p.data)
    return out


# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        if b.op != "const":
            _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        if b.op != "const":
            _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bw(g):
        if a.op != "const":
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.op != "const":
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(out, (a, b), bw, "mul")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def bw(g):
        _accumulate(x, g * out * (1.0 - out))

    return Tensor(out, (x,), bw, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay reliable."""
    z = x.data
    z2 = z * z
    th = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        d = 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th ** 2) * dinner
        _accumulate(x, g * d)

    return Tensor(out, (x,), bw, "gelu")


# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return Tensor(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(x, g.transpose(inv))

    return Tensor(out, (x,), bw, "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, piece)

    return Tensor(out, tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(x.shape for x in xs)) from None

    def bw(g):
        for i, x in enumerate(xs):
            _accumulate(x, np.take(g, i, axis=axis))

    return Tensor(out, tuple(xs), bw, "stack")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None

    def bw(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return Tensor(out, (x,), bw, "broadcast_to")


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return Tensor(out, (x,), bw, "sum")


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back with np.add.at."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError("embedding (index out of range)", table.shape, index.shape)
    out = table.data[index]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accumulate(table, full)

    return Tensor(out, (table,), bw, "embedding")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """For x of shape (B, N, D) and index (B, T) return x[b, index[b, t]]."""
    index = np.asarray(index)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError("gather_rows", x.shape, index.shape)
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, index.shape), index), g)
        _accumulate(x, full)

    return Tensor(out, (x,), bw, "gather_rows")


# linear algebra


def _blocked_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2-D ``a @ w`` computed in fixed-size row blocks.

    BLAS picks kernels by matrix size, so a row's result can change with the
    number of rows. Padding every call to MATMUL_BLOCK rows removes that.
    """
    m = a.shape[0]
    out = np.empty((m, w.shape[1]), dtype=np.result_type(a, w))
    buf = np.zeros((MATMUL_BLOCK, a.shape[1]), dtype=a.dtype)
    for start in range(0, m, MATMUL_BLOCK):
        stop = min(start + MATMUL_BLOCK, m)
        if stop - start == MATMUL_BLOCK:
            out[start:stop] = a[start:stop] @ w
        else:
            buf[: stop - start] = a[start:stop]
            buf[stop - start:] = 0
            out[start:stop] = (buf @ w)[: stop - start]
    return out


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for x of shape (..., K) and a 2-D weight w of shape (K, N)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul", x.shape, w.shape)
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    out = _blocked_matmul(x2, w.data).reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        _accumulate(x, _blocked_matmul(g2, np.ascontiguousarray(w.data.T)).reshape(x.shape))
        _accumulate(w, x2.T @ g2)

    return Tensor(out, (x, w), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` over matching leading dims, (..., T, K) @ (..., K, S)."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("bmm", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def bw(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor(out, (a, b), bw, "bmm")


# normalisation and probability ops


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift.

    ``gain``/``bias`` broadcast against x, so a (G, D) pair applied to x of
    shape (..., G, D) gives one independent normalisation per group.
    """
    if gain.shape[-1] != x.shape[-1] or bias.shape != gain.shape:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))
        gx = g * gain.data
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                        - xhat * (gx * xhat).sum(-1, keepdims=True))
        _accumulate(x, dx)

    return Tensor(out, (x, gain, bias), bw, "layer_norm")


def _check_mask(mask: np.ndarray, shape: tuple, op: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(op, shape, mask.shape) from None
    if not mask.any(axis=-1).all():
        raise ValueError(f"{op}: softmax over a fully masked axis")
    return mask


def masked_log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-probabilities over the last axis restricted to ``mask`` (True = kept).

    Masked entries are returned as 0, not -inf; their probability is exactly 0
    and callers must not read them as log-probabilities.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = _check_mask(mask, x.shape, "masked_log_softmax")
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + zmax
    out = np.where(mask, x.data - lse, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        g = np.where(mask, g, 0.0)
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (x,), bw, "masked_log_softmax")


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked entries get exactly zero mass."""
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = _check_mask(mask, x.shape, "masked_softmax")
    z = np.where(mask, x.data, -np.inf)
    e = np.where(mask, np.exp(z - z.max(axis=-1, keepdims=True)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Tensor(out, (x,), bw, "masked_softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over (..., T, dh) inputs."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = bmm(q, transpose(k, _swap_last(k.ndim))) * scale
    mask = None
    if causal:
        t, s = q.shape[-2], k.shape[-2]
        mask = np.tril(np.ones((t, s), dtype=bool))
    return bmm(masked_softmax(scores, mask), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy -[y log s(z) + (1-y) log(1-s(z))]."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    z = logits.data
    out = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        _accumulate(logits, g * (_sigmoid(z) - targets))

    return Tensor(out, (logits,), bw, "bce_with_logits")


def cross_entropy(logp: Tensor, target: np.ndarray) -> Tensor:
    """-log p[target] along the last axis; ``logp`` from masked_log_softmax."""
    target = np.asarray(target)
    if target.shape != logp.shape[:-1]:
        raise ShapeError("cross_entropy", logp.shape, target.shape)
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    return -sum_(logp * onehot, axis=-1)


def kl_divergence(q: np.ndarray, logp: Tensor, support: np.ndarray) -> Tensor:
    """KL(q || p) along the last axis, summed over ``support`` only.

    Terms with q = 0 contribute 0. Mass of q outside the support is an error.
    """
    q = np.asarray(q, dtype=logp.dtype)
    support = np.asarray(support, dtype=bool)
    if q.shape != logp.shape:
        raise ShapeError("kl_divergence", q.shape, logp.shape)
    if np.any((q > 0) & ~support):
        raise ValueError("kl_divergence: q has mass outside the support of p")
    pos = q > 0
    qlogq = np.where(pos, q * np.log(np.where(pos, q, 1.0)), 0.0)
    return sum_(qlogq - logp * q, axis=-1)


def mean(x: Tensor) -> Tensor:
    return sum_(x) * (1.0 / x.data.size)


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; used by tests and the op catalogue."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "bmm": bmm,
    "add": add,
    "mul": mul,
    "concat": concat,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "masked_softmax": masked_softmax,
    "masked_log_softmax": masked_log_softmax,
    "layer_norm": layer_norm,
    "attention": attention,
    "embedding": embedding,
    "cross_entropy": cross_entropy,
    "kl_divergence": kl_divergence,
    "bce_with_logits": bce_with_logits,
}

