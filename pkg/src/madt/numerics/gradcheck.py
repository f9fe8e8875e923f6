"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


class GradCheckContractError(ValueError):
    pass


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Return max |analytic - numeric| / max(1, |numeric|) over the entries of ``x``."""
    if eps <= 0:
        raise GradCheckContractError("eps must be positive")
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise GradCheckContractError(f"f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xm = x0.copy().reshape(-1)
        xm[i] -= eps
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
