"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import CheckError, ContractError
from .tensor import Tensor, no_grad


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the taped gradient of the scalar ``f()`` against central differences.

    Returns max over all checked entries of
    ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` is called with no arguments and must read the current parameter
    values. When ``max_entries`` is given, that many entries per parameter are
    sampled (with ``rng``); otherwise every entry is perturbed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    if loss.data.ndim != 0:
        raise ContractError(f"f must return a scalar, got shape {loss.shape}")
    base = float(loss.data)
    loss.backward()
    with no_grad():
        again = float(f().data)
    if again != base:
        raise CheckError(f"f is not deterministic: {base!r} then {again!r}")

    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64)
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = range(flat.size)
        a_flat = analytic.reshape(-1)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
