"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor

DEFAULT_STEP = 1e-5
# Gradients smaller than this are compared absolutely rather than relatively.
ABS_FLOOR = 1e-7


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_derivative(f: Callable[[], Tensor], x: Tensor, index, step: float = DEFAULT_STEP) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``x.data`` in place."""
    orig = x.data[index]
    x.data[index] = orig + step
    up = float(f().data)
    x.data[index] = orig - step
    down = float(f().data)
    x.data[index] = orig
    return (up - down) / (2.0 * step)


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    n_points: int = 10,
    rng: np.random.Generator | None = None,
    step: float = DEFAULT_STEP,
) -> float:
    """Worst relative error between backward() and finite differences.

    ``n_points`` coordinates are drawn at random across all ``inputs``
    (weighted by size). ``f`` must rebuild its graph from the inputs' current
    data on every call.
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.data = np.array(x.data, dtype=np.float64)  # own, writable buffers
        x.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    sizes = np.array([x.data.size for x in inputs], dtype=np.float64)
    worst = 0.0
    for _ in range(n_points):
        k = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        index = np.unravel_index(int(rng.integers(inputs[k].data.size)), inputs[k].shape)
        num = numeric_derivative(f, inputs[k], index, step)
        worst = max(worst, relative_error(float(analytic[k][index]), num))
    return worst
