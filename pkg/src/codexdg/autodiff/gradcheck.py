"""Central-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..exceptions import NumericError, ParameterError
from .tensor import Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and rebuilds its graph from the current values
    of ``params``, which are perturbed in place one coordinate at a time and
    restored afterwards.

    Returns:
        max over all coordinates of ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"grad_check step must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite at the base point")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f().data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: objective not finite at parameter {k}, coordinate {i}")
            num = (fp - fm) / (2.0 * eps)
            rel = abs(a_flat[i] - num) / max(1e-12, abs(a_flat[i]) + abs(num))
            worst = max(worst, rel)
    return worst
