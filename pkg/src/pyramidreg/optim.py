"""Named parameter store with per-parameter Adam state."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class MissingGradError(RuntimeError):
    """A parameter had no gradient when an optimizer step was requested."""


class ParamStore:
    """Map from parameter path to a trainable tensor, plus Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, path: str, data: np.ndarray) -> Tensor:
        if path in self.params:
            raise ValueError(f"duplicate parameter path: {path}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.params[path] = t
        self._m[path] = np.zeros_like(t.data)
        self._v[path] = np.zeros_like(t.data)
        self._step[path] = 0
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def paths(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_norm(self, prefix: str = "") -> float:
        sq = 0.0
        for path, t in self.params.items():
            if path.startswith(prefix) and t.grad is not None:
                sq += float((t.grad ** 2).sum())
        return float(np.sqrt(sq))

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        """One bias-corrected Adam update over every stored parameter."""
        for path in self.paths():
            t = self.params[path]
            if t.grad is None:
                raise MissingGradError(f"parameter '{path}' has no gradient")
            g = t.grad
            self._step[path] += 1
            k = self._step[path]
            self._m[path] = beta1 * self._m[path] + (1.0 - beta1) * g
            self._v[path] = beta2 * self._v[path] + (1.0 - beta2) * g * g
            m_hat = self._m[path] / (1.0 - beta1 ** k)
            v_hat = self._v[path] / (1.0 - beta2 ** k)
            t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    # -- serialisation ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for path in self.paths():
            out[f"param/{path}"] = self.params[path].data
            out[f"adam_m/{path}"] = self._m[path]
            out[f"adam_v/{path}"] = self._v[path]
            out[f"adam_t/{path}"] = np.array(self._step[path])
        return out

    @classmethod
    def from_state_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for key in sorted(arrays):
            if key.startswith("param/"):
                path = key[len("param/"):]
                store.add(path, arrays[key])
                if f"adam_m/{path}" in arrays:
                    store._m[path] = np.asarray(arrays[f"adam_m/{path}"],
                                                dtype=np.float64)
                    store._v[path] = np.asarray(arrays[f"adam_v/{path}"],
                                                dtype=np.float64)
                    store._step[path] = int(arrays[f"adam_t/{path}"])
        return store
