"""Named parameters with Adam state."""
from __future__ import annotations

from collections.abc import Iterator, MutableMapping

import numpy as np

from .autograd import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class ParameterSet(MutableMapping):
    """Ordered mapping of name -> Tensor plus Adam moments and a step counter."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=self.dtype, copy=True)
        if name in self._params:
            self._params[name].data = data
        else:
            self._params[name] = Tensor(data, name=name)
        self.m[name] = np.zeros_like(data)
        self.v[name] = np.zeros_like(data)

    def __delitem__(self, name: str) -> None:
        del self._params[name], self.m[name], self.v[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def init_uniform(self, name: str, shape: tuple, fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        self[name] = rng.uniform(-bound, bound, size=shape)
        return self._params[name]

    def init_const(self, name: str, shape: tuple, value: float) -> Tensor:
        self[name] = np.full(shape, value)
        return self._params[name]

    def values(self):  # type: ignore[override]
        return self._params.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet(dtype)
        for k, t in self._params.items():
            out[k] = t.data
        return out

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> ParameterSet:
    """One bias-corrected Adam update, in place. Returns ``params``.

    ``weight_decay`` is decoupled: every parameter also shrinks by
    ``lr * weight_decay`` of itself, independent of the gradient statistics.

    All gradients are checked before any parameter moves, so a rejected step
    leaves the set untouched.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    params.step += 1
    t = params.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params._params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = params.m[name], params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params
