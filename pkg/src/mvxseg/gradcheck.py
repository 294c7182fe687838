"""Central finite-difference gradient checking for the autodiff engine.

Checks are meant to run on float64 graphs: build parameters with
``dtype=np.float64`` so the default step of 1e-5 sits well above roundoff.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

__all__ = ["finite_difference", "relative_error", "check_gradients",
           "check_gradients_sampled"]


def finite_difference(loss_fn: Callable[[], Tensor], param: Tensor,
                      step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar loss w.r.t. every element of ``param``."""
    base = param.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    param.data = base
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max_i |a_i - b_i| / max(1, |a_i|, |b_i|) — absolute below unit scale."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    step: float = 1e-5, tol: float = 1e-4) -> dict[str, float]:
    """Compare autodiff gradients of loss_fn against central differences.

    Returns the per-parameter relative error; raises AssertionError on the
    first parameter exceeding ``tol``.
    """
    analytic = backward(loss_fn(), params)
    errors = {}
    for name, p in params.items():
        numeric = finite_difference(loss_fn, p, step=step)
        err = relative_error(analytic[name].astype(np.float64), numeric)
        errors[name] = err
        if err >= tol:
            raise AssertionError(
                f"gradient check failed for {name}: rel err {err:.3e} >= {tol:.1e}")
    return errors


def check_gradients_sampled(loss_fn: Callable[[], Tensor],
                            params: Mapping[str, Tensor], n_per_param: int = 4,
                            step: float = 1e-5, tol: float = 1e-4,
                            seed: int = 0) -> dict[str, float]:
    """Gradient check sampling a few components of every parameter array.

    For network-scale graphs full per-scalar central differences are too slow;
    this still touches every parameter, probing ``n_per_param`` seeded random
    components each.
    """
    rng = np.random.default_rng(seed)
    analytic = backward(loss_fn(), params)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_per_param, flat.size), replace=False)
        a = np.empty(len(picks))
        b = np.empty(len(picks))
        for j, i in enumerate(sorted(picks)):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            b[j] = (hi - lo) / (2.0 * step)
            a[j] = analytic[name].reshape(-1)[i]
        err = relative_error(a, b)
        errors[name] = err
        if err >= tol:
            raise AssertionError(
                f"sampled gradient check failed for {name}: rel err {err:.3e} >= {tol:.1e}")
    return errors
