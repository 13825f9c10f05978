"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    ``floor`` keeps coordinates whose true gradient is near zero from being
    judged on rounding noise alone.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(fn: Callable[..., float], point: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(p, dtype=np.float64) for p in point]
    out = []
    for x in arrays:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*arrays)
            flat[j] = orig - h
            fm = fn(*arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray] | np.ndarray, h: float = 1e-5,
               tolerance: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``fn(tape, *tensors)`` against central differences.

    ``fn`` must return a scalar tensor and be deterministic. All work is done
    in float64.
    """
    if isinstance(point, np.ndarray):
        point = [point]
    point = [np.asarray(p, dtype=np.float64) for p in point]

    def value(*arrays) -> float:
        tape = Tape(record=False)
        return float(fn(tape, *[Tensor(a) for a in arrays]).data)

    f0 = value(*point)
    if not np.isfinite(f0):
        raise ValueError(f"grad_check: function value {f0} is not finite at the given point")

    tape = Tape()
    leaves = [Tensor(p.copy(), requires_grad=True) for p in point]
    loss = fn(tape, *leaves)
    tape.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    numeric = numerical_gradient(value, point, h)
    errs = [float(relative_error(a, n, floor).max()) if a.size else 0.0 for a, n in zip(analytic, numeric)]
    return GradCheckReport(max_rel_error=max(errs), per_input=errs, tolerance=tolerance)


def grad_check_params(loss_fn: Callable[[Tape], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                      tolerance: float = 1e-4, floor: float = 1e-6, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Finite-difference check of ``loss_fn`` w.r.t. parameters perturbed in place.

    ``max_coords`` samples that many coordinates per parameter (all when None).
    Parameters must be float64; values are restored afterwards.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check_params: {name} is {p.dtype}, need float64")
        p.grad = None
    tape = Tape()
    loss = loss_fn(tape)
    if not np.isfinite(loss.data):
        raise ValueError("grad_check_params: loss is not finite")
    tape.backward(loss)
    errs = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_sel, n_sel = [], []
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(loss_fn(Tape(record=False)).data)
            flat[j] = orig - h
            fm = float(loss_fn(Tape(record=False)).data)
            flat[j] = orig
            a_sel.append(analytic.reshape(-1)[j])
            n_sel.append((fp - fm) / (2.0 * h))
        errs.append(float(relative_error(np.array(a_sel), np.array(n_sel), floor).max()) if coords.size else 0.0)
        p.grad = None
    return GradCheckReport(max_rel_error=max(errs), per_input=errs, tolerance=tolerance)
