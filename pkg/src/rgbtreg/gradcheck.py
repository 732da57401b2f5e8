"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autodiff import Graph, Tensor, backward
from .errors import ContractError


def gradcheck(
    loss_fn: Callable[[], Tensor],
    wrt: Tensor,
    step: float = 1e-5,
    tol: float = 1e-3,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> tuple[bool, float]:
    """Compare analytic and numeric d(loss)/d(wrt); returns (ok, max_rel_err).

    ``loss_fn`` must rebuild the scalar loss from scratch (it closes over
    ``wrt``).  When ``max_checks`` is given, only a random subset of entries
    is probed, which keeps whole-module checks affordable.
    """
    if not wrt.requires_grad:
        raise ContractError("gradcheck target must have requires_grad=True")
    wrt.grad = None
    with Graph() as g:
        loss = loss_fn()
    if loss.size != 1:
        raise ContractError(f"loss_fn must return a scalar, got shape {loss.shape}")
    backward(g, loss)
    analytic = np.zeros_like(wrt.data) if wrt.grad is None else wrt.grad.copy()
    wrt.grad = None

    n = wrt.data.size
    if max_checks is not None and max_checks < n:
        rng = np.random.default_rng(seed)
        indices = rng.choice(n, size=max_checks, replace=False)
    else:
        indices = np.arange(n)

    flat = wrt.data.ravel()
    a_flat = analytic.ravel()
    max_err = 0.0
    for idx in indices:
        original = flat[idx]
        flat[idx] = original + step
        f_plus = float(loss_fn().data)
        flat[idx] = original - step
        f_minus = float(loss_fn().data)
        flat[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        denom = max(abs(a_flat[idx]), abs(numeric), 1e-2)
        max_err = max(max_err, abs(a_flat[idx] - numeric) / denom)
    return max_err <= tol, max_err
