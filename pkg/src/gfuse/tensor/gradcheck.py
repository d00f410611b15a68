"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import GradTape, NonFiniteError, Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` (leaf tensors with
    ``requires_grad``) from its closure.  The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``.  With ``max_entries`` set,
    that many entries per parameter are drawn at random instead of checking
    every one.
    """
    with GradTape() as tape:
        loss = f()
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("grad_check: loss is not finite")
    analytic = tape.gradient(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        base = p.data.copy()
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = rng.choice(base.size, size=max_entries, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, base.shape)
            probe = base.copy()
            probe[idx] = base[idx] + eps
            p.assign(probe)
            up = f().item()
            probe[idx] = base[idx] - eps
            p.assign(probe)
            down = f().item()
            if not (np.isfinite(up) and np.isfinite(down)):
                p.assign(base)
                raise NonFiniteError("grad_check: loss is not finite at a perturbed point")
            numeric = (up - down) / (2.0 * eps)
            err = abs(grad[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        p.assign(base)
    return worst
