"""Tensor, tape and the reverse pass.

Every differentiable primitive lives in :mod:`adadiff.autodiff.ops` and is
dispatched through :func:`apply`.  When at least one input is grad-tracked the
application is appended to the active :class:`Tape`; :func:`backward` walks
that tape once, in reverse, and hands back a name -> gradient map.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ids = itertools.count()


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def _all_finite(a: np.ndarray) -> bool:
    # cheap reduction first; a single NaN/Inf poisons the sum
    if np.isfinite(a.sum()):
        return True
    return bool(np.isfinite(a).all())


class Tensor:
    """Dense array plus autodiff bookkeeping.

    ``data`` is float32 by default.  Pass float64 data (or ``dtype=np.float64``)
    for gradient checking; ops keep whatever dtype their inputs carry.
    """

    __slots__ = ("data", "grad_tracked", "name", "grad", "_tape", "_id")

    def __init__(self, data, grad_tracked: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.asarray(data, dtype=dtype)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad_tracked = grad_tracked
        self.name = name
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad_tracked = tracked
        t.name = None
        t.grad = None
        t._tape = None
        t._id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, grad_tracked={self.grad_tracked})"

    # operator sugar; imports are deferred to avoid a cycle with ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Usable as a context manager; ops applied inside the ``with`` block record
    here instead of on the thread's default tape.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); start a new one")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)


class _Local(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Tape = Tape()
        self.grad_enabled = True


_local = _Local()


def current_tape() -> Tape:
    if _local.stack:
        return _local.stack[-1]
    if _local.default.consumed:
        _local.default = Tape()
    return _local.default


class no_grad:
    """Context manager: ops inside run untracked and record nothing."""

    def __enter__(self):
        self._prev = _local.grad_enabled
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev


def reset_default_tape() -> None:
    """Drop whatever the thread's implicit tape has accumulated."""
    _local.default = Tape()


# op registry: name -> forward(arrays, needs, **attrs) -> (out, backward)
_OPS: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        _OPS[name] = fn
        return fn
    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def apply(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``op_kind`` on ``inputs``; record it if anything is tracked."""
    try:
        forward = _OPS[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op {op_kind!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    if _local.grad_enabled:
        needs = tuple(t.grad_tracked for t in tensors)
        tracked = any(needs)
    else:
        needs = (False,) * len(tensors)
        tracked = False
    out, bwd = forward(tuple(t.data for t in tensors), needs, **attrs)
    if not _all_finite(out):
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise NonFiniteError(f"{op_kind}: non-finite output from inputs of shape {shapes}")
    result = Tensor._wrap(out, tracked)
    if tracked:
        tape = current_tape()
        tape.record(Node(op_kind, tensors, result, bwd))
        result._tape = tape
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Returns gradients keyed by leaf name for every named, tracked leaf the tape
    touched, plus every entry of ``params`` if given.  Leaves the loss does not
    depend on get zeros.  The tape is consumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.grad_tracked:
        raise AutodiffError("loss was not recorded on any tape (no tracked inputs?)")
    if tape.consumed:
        raise AutodiffError("tape already consumed; double backward is not supported")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    produced = {node.output._id for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output._id, None)
        for x in node.inputs:
            if x.grad_tracked and x._id not in produced:
                leaves[x._id] = x
        if g is None:
            continue
        in_grads = node.backward(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.grad_tracked:
                continue
            prev = grads.get(x._id)
            grads[x._id] = gx if prev is None else prev + gx
    tape.nodes.clear()

    result: dict[str, np.ndarray] = {}
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        # a stale same-named leaf from an unconsumed tape must not shadow a live one
        if leaf.name is not None and (g is not None or leaf.name not in result):
            result[leaf.name] = leaf.grad
    if params is not None:
        items = params.items() if hasattr(params, "items") else ((p.name, p) for p in params)
        for name, p in items:
            g = grads.get(p._id)
            result[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
    return result
