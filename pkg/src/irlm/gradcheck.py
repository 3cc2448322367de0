"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    n_checked: int
    n_failed: int
    max_rel_err: float
    worst: str

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is indistinguishable from the
    finite-difference round-off (about ``1e-10`` in double precision at
    ``h = 1e-5``) from reporting spurious relative error.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_grad(fn: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``t``."""
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    grad_flat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            grad_flat[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(
    fn: Callable[[], float],
    params: Mapping[str, Tensor],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare ``analytic[name]`` against central differences for every entry of every parameter."""
    n_checked = n_failed = 0
    max_err, worst = 0.0, ""
    for name, p in params.items():
        num = numerical_grad(fn, p, h)
        err = relative_error(analytic[name], num)
        n_checked += err.size
        n_failed += int(np.sum(err >= tol))
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst = f"{name}[{int(err.argmax())}]"
    return GradCheckResult(n_checked, n_failed, max_err, worst)
