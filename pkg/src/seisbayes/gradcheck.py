"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
    from producing meaningless ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    n_points: int = 10,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare ``backward`` of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``inputs`` on every call.  Probes
    ``n_points`` random coordinates per input and returns the worst relative
    error seen.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, relative_error(ga.reshape(-1)[i], numeric))
    return worst
