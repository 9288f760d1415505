"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, _all_finite


class ParamStore:
    """Ordered ``name -> Tensor`` map with a per-name trainable flag.

    Names are hierarchical, dot separated (``denoiser.block3.dilconv.w``).
    All stored tensors are grad-tracked leaves named after their key.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, grad_tracked=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, mask: Mapping[str, bool] | bool) -> None:
        if isinstance(mask, bool):
            for n in self._trainable:
                self._trainable[n] = mask
            return
        unknown = set(mask) - set(self._params)
        if unknown:
            raise KeyError(f"mask names unknown parameters: {sorted(unknown)[:5]}")
        for n in self._trainable:
            self._trainable[n] = bool(mask.get(n, False))

    def trainable_mask(self) -> dict[str, bool]:
        return dict(self._trainable)

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._params.items() if self._trainable[n] or not trainable_only)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self._params.items():
            out.add(n, t.data.copy(), self._trainable[n])
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, t in self._params.items():
            out.add(n, t.data.astype(dtype), self._trainable[n])
        return out

    def substitute(self, tensors: Mapping[str, Tensor]) -> "ParamStore":
        """Shallow copy with some entries replaced by the given tensors (for gradient checks)."""
        out = ParamStore()
        for n, t in self._params.items():
            out._params[n] = tensors.get(n, t)
            out._trainable[n] = self._trainable[n]
        unknown = set(tensors) - set(self._params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)[:5]}")
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> "ParamStore":
        out = cls()
        for n, a in arrays.items():
            out.add(n, a, trainable)
        return out


@dataclass
class Adam:
    """Adam with bias correction.  Only trainable entries of the store move."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step_index: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        self.step_index += 1
        adam_step(params, grads, self.lr if lr is None else lr, self.beta1, self.beta2, self.eps,
                  self.step_index, self.m, self.v)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float, beta2: float, eps: float, step_index: int,
              m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
    """One in-place Adam update; ``m``/``v`` hold the running moments."""
    if step_index < 1:
        raise ValueError("step_index counts from 1")
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for name, p in params.items():
        if not params.is_trainable(name):
            continue
        if name not in grads:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        mi = m.get(name)
        vi = v.get(name)
        mi = (1 - beta1) * g if mi is None else beta1 * mi + (1 - beta1) * g
        vi = (1 - beta2) * g * g if vi is None else beta2 * vi + (1 - beta2) * g * g
        m[name], v[name] = mi, vi
        update = lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        new = (p.data.astype(np.float64) - update).astype(p.dtype)
        if not _all_finite(new):
            raise NonFiniteError(f"adam produced non-finite values for {name!r}")
        p.data = new
