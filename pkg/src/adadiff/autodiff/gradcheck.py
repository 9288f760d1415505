"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward

KINK_SUSPECT = 10.0


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, int] | None = None
    n_checked: int = 0
    # (input index, flat index) where one-sided differences disagree
    nondifferentiable: list[tuple[int, int]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def _central(f: Callable[[float], float], base: float, h: float) -> tuple[float, bool]:
    """Central difference at ``h``; (value, is_kink).

    For a smooth function the gap between the one-sided slopes shrinks in
    proportion to the step.  A gap that is large and does not shrink at h/10
    marks a kink; one that does shrink means a kink lies between h/10 and h,
    so the smaller step's estimate is used instead.
    """
    fp, fm = f(h), f(-h)
    fd = (fp - fm) / (2 * h)
    gap = abs((fp - base) - (base - fm)) / h
    if gap <= KINK_SUSPECT * h * max(1.0, abs(fd)):
        return fd, False
    k = h / 10
    fp2, fm2 = f(k), f(-k)
    gap2 = abs((fp2 - base) - (base - fm2)) / k
    if gap2 > 0.5 * gap:
        return fd, True
    return (fp2 - fm2) / (2 * k), False


def grad_check(fn: Callable[..., Tensor], point: Sequence, h: float = 1e-5,
               mode_64bit: bool = True, max_coords: int | None = None,
               seed: int = 0, abs_floor: float = 1e-5) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``fn`` at ``point``.

    ``fn`` takes one Tensor per entry of ``point`` and returns a scalar Tensor.
    The relative error per coordinate is
    ``|analytic - fd| / max(|analytic|, |fd|, abs_floor)``; the floor keeps
    round-off noise on exactly-zero gradients from reading as a large error.  Coordinates whose
    forward and backward one-sided differences disagree are reported as
    nondifferentiable and left out of the maximum (see :func:`_central`).  ``max_coords`` samples a
    random subset of coordinates per input.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    dtype = np.float64 if mode_64bit else np.float32
    arrays = [np.array(p, dtype=dtype) for p in point]

    with Tape():
        leaves = [Tensor(a, grad_tracked=True, name=f"x{i}") for i, a in enumerate(arrays)]
        loss = fn(*leaves)
        if loss.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        grads = backward(loss, {f"x{i}": t for i, t in enumerate(leaves)})
    analytic = [grads[f"x{i}"] for i in range(len(arrays))]

    def f_at(i: int, flat: int, delta: float) -> float:
        probe = [a if j != i else a.copy() for j, a in enumerate(arrays)]
        probe[i].reshape(-1)[flat] += delta
        out = fn(*(Tensor(a) for a in probe))
        v = float(out.data)
        if not np.isfinite(v):
            raise NonFiniteError("non-finite value during finite differencing")
        return v

    base = float(fn(*(Tensor(a) for a in arrays)).data)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for i, a in enumerate(arrays):
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        g = analytic[i].reshape(-1)
        for flat in coords:
            fd, kink = _central(lambda d: f_at(i, int(flat), d), base, h)
            if kink:
                report.nondifferentiable.append((i, int(flat)))
                continue
            an = float(g[flat])
            err = abs(an - fd) / max(abs(an), abs(fd), abs_floor)
            report.n_checked += 1
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (i, int(flat))
    return report
