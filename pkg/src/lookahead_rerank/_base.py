"""Shared estimator plumbing: parameter storage, the Adam loop, checkpoints."""
from __future__ import annotations

import logging
import math
import time
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .numerics import autograd as ag
from .numerics.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .numerics.params import NonFiniteGradientError, ParameterSet, adam_step

logger = logging.getLogger(__name__)


class NeuralEstimator(BaseEstimator):
    """Base for the two sequence models.

    Subclasses set ``_kind``, implement ``_build(dims)`` to create layers in
    ``self.params_`` and keep any non-trainable arrays in ``self.buffers_``.
    """

    _kind = "model"

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit() first")

    def _init_params(self, dims: dict) -> None:
        self.dims_ = dict(dims)
        self.params_ = ParameterSet(np.dtype(self.dtype))
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 0x1A7E]))
        self._build(self.dims_, rng)

    def _build(self, dims: dict, rng: np.random.Generator) -> None:
        raise NotImplementedError

    # training

    def _run_epochs(self, n_samples: int, batch_loss: Callable[[np.ndarray], ag.Tensor],
                    on_epoch_end: Callable[[int], dict] | None = None) -> list[dict]:
        history = []
        self.diverged_ = False
        shuffle = np.random.default_rng(np.random.SeedSequence([self.random_state, 0x5F1]))
        params = dict(self.params_.items())
        total_steps = self.n_epochs * math.ceil(n_samples / self.batch_size)
        step = 0
        for epoch in range(self.n_epochs):
            good = {k: v.copy() for k, v in self.params_.arrays().items()}
            started = time.perf_counter()
            order = shuffle.permutation(n_samples)
            total, count = 0.0, 0
            for start in range(0, n_samples, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = batch_loss(idx)
                value = float(loss.data)
                try:
                    if not np.isfinite(value):
                        raise NonFiniteGradientError("<loss>")
                    grads = ag.backward(loss, params)
                    adam_step(self.params_, grads, self._step_size(step, total_steps),
                              weight_decay=self.weight_decay)
                    step += 1
                except NonFiniteGradientError as exc:
                    logger.warning("%s diverged at epoch %d (%s); restoring last good "
                                   "parameters", type(self).__name__, epoch, exc)
                    for k, v in good.items():
                        self.params_[k].data = v
                    self.diverged_ = True
                    return history
                total += value * len(idx)
                count += len(idx)
            row = {"epoch": epoch, "loss": total / max(count, 1)}
            if on_epoch_end is not None:
                row.update(on_epoch_end(epoch))
            history.append(row)
            logger.info("%s epoch %d loss %.5f (%.1fs)", type(self).__name__, epoch,
                        row["loss"], time.perf_counter() - started)
        return history

    def _step_size(self, step: int, total: int) -> float:
        """Learning rate at ``step``: constant, or cosine decay to zero over ``total`` steps."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}; use 'constant' or 'cosine'")

    # persistence

    def save(self, path) -> None:
        self._check_fitted()
        arrays = dict(self.params_.arrays())
        for name, buf in self.buffers_.items():
            arrays[f"buffer:{name}"] = buf
        meta = {"kind": self._kind, "params": self.get_params(), "dims": self.dims_}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != cls._kind:
            raise CheckpointError(f"{path}: holds a {meta.get('kind')!r}, expected {cls._kind!r}")
        model = cls(**meta["params"])
        model._init_params(meta["dims"])
        model.buffers_ = {}
        for name, arr in arrays.items():
            if name.startswith("buffer:"):
                model.buffers_[name[len("buffer:"):]] = arr
            elif name in model.params_:
                if model.params_[name].shape != arr.shape:
                    raise CheckpointError(f"{path}: shape mismatch for {name!r}")
                model.params_[name] = arr
            else:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        missing = set(model.params_) - set(arrays)
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        model.history_ = []
        return model
