"""Central-difference gradient checking for taped losses."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, backward, precision


def numeric_grad(fn, params, eps=1e-5):
    """Finite-difference gradients of a scalar function of named params.

    fn() recomputes the loss from the current parameter values; params is
    a dict name -> Tensor. Every entry of every parameter is perturbed, so
    keep the parameters small. Runs in float64.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn().data)
            flat[i] = keep - eps
            lo = float(fn().data)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def rel_error(a, b, eps=1e-12):
    """Max-norm relative disagreement between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)) + eps
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(make_loss, params, eps=1e-5, tol=1e-4):
    """Compare taped vs finite-difference gradients; returns worst rel error.

    make_loss() must rebuild the loss tensor from the live parameter
    values each call. Raises AssertionError naming the first offending
    parameter above tol. Call inside a precision(np.float64) context or
    ensure params are float64: this function enforces it.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"gradient check requires float64 params, {name!r} is {p.data.dtype}")
    with precision(np.float64):
        with Tape():
            analytic = backward(make_loss())
        numeric = numeric_grad(make_loss, params, eps=eps)
    worst = 0.0
    for name in params:
        if name not in analytic:
            raise AssertionError(f"no analytic gradient recorded for {name!r}")
        err = rel_error(analytic[name], numeric[name])
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(f"gradient mismatch for {name!r}: rel error {err:.3e} > {tol}")
    return worst
