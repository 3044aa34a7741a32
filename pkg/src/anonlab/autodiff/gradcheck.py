"""Central-difference gradient checking against the reverse-mode engine."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .engine import ShapeError, Tape, Tensor, backward, current_dtype


def finite_difference_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    fd_f: Optional[Callable[..., Tensor]] = None,
) -> float:
    """Compare backward() gradients of ``f`` against central differences.

    ``f`` must be scalar-valued and run under float64 precision. Returns the
    worst relative error max|ad - fd| / max(|ad|, |fd|, 1e-8) over every
    coordinate of every input.

    ``fd_f`` optionally supplies the function to difference, for composites
    whose defined gradient is not the gradient of their own forward (a chain
    containing gradient reversal differences against the surrogate whose
    gradient the reversal is specified to produce).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if current_dtype() != np.float64:
        raise ValueError("finite_difference_check requires the float64 precision mode")

    inputs = list(inputs)
    with Tape() as tape:
        for t in inputs:
            tape.register_leaf(t)  # unused inputs still get (zero) gradients
        loss = f(*inputs)
        if loss.data.size != 1:
            raise ShapeError(f"finite_difference_check needs a scalar f, got shape {loss.shape}")
        grads = backward(loss)
    ad = [grads.wrt(t) for t in inputs]

    probe = fd_f if fd_f is not None else f

    def evaluate(vals: list[np.ndarray]) -> float:
        saved = [t.data for t in inputs]
        try:
            for t, v in zip(inputs, vals):
                t.data = v
            out = probe(*inputs)
            return float(out.data.reshape(-1)[0])
        finally:
            for t, s in zip(inputs, saved):
                t.data = s

    worst = 0.0
    for idx, t in enumerate(inputs):
        base = t.data
        flat_fd = np.zeros(base.size, dtype=np.float64)
        for j in range(base.size):
            hi = base.copy().reshape(-1)
            lo = base.copy().reshape(-1)
            hi[j] += eps
            lo[j] -= eps
            vals_hi = [t2.data if i2 != idx else hi.reshape(base.shape) for i2, t2 in enumerate(inputs)]
            vals_lo = [t2.data if i2 != idx else lo.reshape(base.shape) for i2, t2 in enumerate(inputs)]
            flat_fd[j] = (evaluate(vals_hi) - evaluate(vals_lo)) / (2 * eps)
        a = ad[idx].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(flat_fd)), 1e-8)
        err = float(np.max(np.abs(a - flat_fd) / denom)) if base.size else 0.0
        worst = max(worst, err)
    return worst
