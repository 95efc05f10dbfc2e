"""Adam optimizer and plateau learning-rate scheduler.

Adam's update is purely elementwise — it contains no cross-element
reductions — so it is unaffected by the summation policy; all
non-determinism enters through the gradients it consumes. Hyperparameter
defaults (0.9, 0.999, 1e-8) are recorded into every checkpoint.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN/Inf; training cannot continue."""


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One Adam update, in place on the parameter arrays."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name} at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    def load_state(self, scalars: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(scalars["adam_t"])
        self.lr = float(scalars["lr"])
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()


class PlateauScheduler:
    """Cut lr by `factor` after `patience` epochs without improvement.

    Improvement means a relative decrease of the tracked (training) loss
    greater than `threshold`; the stale counter resets on improvement
    and after every reduction.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.98,
                 patience: int = 10, threshold: float = 1e-6):
        self.optimizer = optimizer
        self.factor = float(factor)
        self.patience = int(patience)
        self.threshold = float(threshold)
        self.best: float | None = None
        self.stale = 0

    def step(self, loss: float) -> bool:
        """Record an epoch loss; returns True when the lr was reduced."""
        loss = float(loss)
        if self.best is None or loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0
            return True
        return False

    def state_scalars(self) -> dict:
        return {"sched_best": self.best, "sched_stale": self.stale}

    def load_state(self, scalars: dict) -> None:
        self.best = None if scalars["sched_best"] is None else float(scalars["sched_best"])
        self.stale = int(scalars["sched_stale"])
