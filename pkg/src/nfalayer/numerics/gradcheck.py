"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + 1e-8)


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    probes: int = 20,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``tensors``
    (which must have ``requires_grad=True``). ``probes`` entries are drawn
    uniformly over all tensors' elements.
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    backward(fn())
    analytic = [t.grad.copy() for t in tensors]
    sizes = np.array([t.size for t in tensors])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        ti = int(np.searchsorted(offsets, f, side="right") - 1)
        t = tensors[ti]
        idx = np.unravel_index(int(f - offsets[ti]), t.shape)
        orig = t.data[idx]
        t.data[idx] = orig + step
        up = fn().item()
        t.data[idx] = orig - step
        down = fn().item()
        t.data[idx] = orig
        numeric = (up - down) / (2 * step)
        worst = max(worst, relative_error(float(analytic[ti][idx]), numeric))
    return worst
