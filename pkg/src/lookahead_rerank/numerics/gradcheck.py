"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, backward
from .params import ParameterSet


class GradCheckError(FloatingPointError):
    def __init__(self, name: str, index):
        self.name, self.index = name, index
        super().__init__(f"non-finite loss when perturbing {name!r} at {index}")


def grad_check(f: Callable[[], Tensor], params: ParameterSet, eps: float = 1e-5,
               n_samples: int = 8, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar Tensor. Up to ``n_samples`` entries per parameter are checked.
    The relative error is |a - n| / max(1e-8, |a| + |n|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if params.dtype != np.float64:
        raise ValueError("grad_check needs 64-bit parameters")
    rng = np.random.default_rng(seed)
    analytic = backward(f(), dict(params.items()))
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f().data)
            flat[j] = orig - eps
            down = float(f().data)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(name, np.unravel_index(j, p.shape))
            numeric = (up - down) / (2 * eps)
            a = float(analytic[name].reshape(-1)[j])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
