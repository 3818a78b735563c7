from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def finite_difference_check(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor],
                            epsilon: float = 1e-5, max_coords: int | None = 64,
                            seed: int = 0, floor: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` takes no arguments and must rebuild its scalar output from the
    current values of ``inputs`` (leaf tensors that require grad), since the
    check perturbs their ``data`` in place.  For each leaf at most
    ``max_coords`` randomly chosen coordinates are probed.  The relative error
    of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    for t in inputs.values():
        if t._owns_grad:
            t.grad[...] = 0.0
        else:
            t.grad = None
    out = fn()
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in inputs.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(fn().data)
            flat[i] = orig - epsilon
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2.0 * epsilon)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
