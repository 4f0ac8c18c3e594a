"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-4,
                   coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target``.

    Only the flat positions in ``coords`` are perturbed (all when ``None``);
    other entries of the result are left at zero.
    """
    target.data = np.ascontiguousarray(target.data)
    flat = target.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if coords is None else coords
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, coords=None) -> float:
    """Max abs deviation over checked entries, scaled by the largest gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if coords is not None:
        a, n = a[list(coords)], n[list(coords)]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Dict[str, Tensor], step: float = 1e-4,
                    max_coords: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Compare backprop against central differences for each named input.

    ``fn`` must rebuild the graph from the current ``.data`` of ``inputs``
    on every call. Returns the relative error per input name.
    """
    for t in inputs.values():
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in inputs.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = sorted(rng.choice(t.size, size=max_coords, replace=False).tolist())
        numeric = numerical_grad(fn, t, step, coords)
        errors[name] = relative_error(analytic, numeric, coords)
    return errors
