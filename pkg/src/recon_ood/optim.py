"""Named parameter store with bias-corrected Adam updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ContractError, DomainError


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters; defaults are the field-standard values."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1:
            raise DomainError(f"beta1 must be in (0,1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            raise DomainError(f"beta2 must be in (0,1), got {self.beta2}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")


class ParamStore:
    """Owns named trainable tensors plus their Adam moment buffers.

    Single-writer: only ``backward`` (via the tensors) and ``adam_step``
    mutate state.  Parameter tensors keep their identity for the lifetime
    of the store, so graphs can be rebuilt against them every step.
    """

    def __init__(self, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)
        self.step_count = 0

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Current parameter values, in registration order."""
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (shapes must match)."""
        for name, t in self._params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name!r} in loaded arrays")
            src = np.asarray(arrays[name], dtype=self.dtype)
            if src.shape != t.data.shape:
                raise ContractError(
                    f"parameter {name!r}: shape {src.shape} != {t.data.shape}"
                )
            t.data = src.copy()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def adam_step(self, cfg: AdamConfig) -> None:
        """Apply one bias-corrected Adam update; gradients are zeroed after.

        Raises ContractError if any parameter has no populated gradient.
        """
        missing = [n for n, t in self._params.items() if t.grad is None]
        if missing:
            raise ContractError(f"adam_step before gradients populated: {missing}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self._params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (cfg.learning_rate * (m / bc1)) / (np.sqrt(v / bc2) + cfg.epsilon)
            p.data = p.data - update.astype(self.dtype)
            p.grad = np.zeros_like(p.data)
