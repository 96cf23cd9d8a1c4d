"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    Entries outside ``indices`` are left as NaN.
    """
    flat_idx = range(tensor.size) if indices is None else indices
    out = np.full(tensor.size, np.nan)
    base = tensor.data
    with no_grad():
        for i in flat_idx:
            values = []
            for step in (h, -h):
                probe = base.copy().reshape(-1)
                probe[i] += step
                tensor.data = probe.reshape(base.shape)
                values.append(float(fn().data.reshape(-1)[0]))
            out[i] = (values[0] - values[1]) / (2 * h)
    tensor.data = base
    return out.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Return the worst elementwise relative error over ``tensors``.

    With ``max_entries`` set, each tensor is probed at that many randomly
    chosen entries instead of all of them.

    The denominator never drops below ``floor * max(1, |fn()|)``. Central
    differences of a loss of size |f| carry roughly ulp(f) / h of rounding
    noise, so a gradient that is exactly zero (for example a key bias in
    attention, which softmax ignores) would otherwise report a huge
    relative error on pure noise.
    """
    for t in tensors:
        t.zero_grad()
    value = fn()
    value.backward()
    floor = floor * max(1.0, abs(float(value.data.reshape(-1)[0])))
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        else:
            idx = np.arange(t.size)
        numeric = numerical_grad(fn, t, h=h, indices=idx)
        err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx], floor)
        worst = max(worst, float(err.max()))
    return worst
