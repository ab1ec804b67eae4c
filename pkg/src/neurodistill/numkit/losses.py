"""Fused scalar losses with hand-derived backwards.

Each loss takes raw numpy targets (targets are never differentiated
through) and returns a scalar Tensor recorded on the active tape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _acc, _record, tensor


def mse(pred, target, mask=None):
    """Mean squared error over unmasked entries.

    mask, if given, is broadcastable to pred with 1 = count, 0 = ignore;
    the mean divides by the number of counted entries, not pred.size.
    """
    pred = tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - target
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) > 0, diff.shape)
        n = keep.sum()
        if n <= 0:
            raise ValueError("mse mask selects no entries")
        # where, not multiply: excluded entries may hold inf/nan
        diff = np.where(keep, diff, 0.0)
    else:
        n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype))

    def bwd(g):
        _acc(pred, (2.0 / n) * g * diff)

    return _record(out, (pred,), bwd)


def poisson_nll(log_rate, counts, mask=None):
    """Poisson negative log likelihood with log-rate inputs.

    nll = mean(exp(log_rate) - counts * log_rate); the log k! term is a
    constant in the parameters and is dropped. Masking as in mse.
    """
    log_rate = tensor(log_rate)
    counts = np.asarray(counts, dtype=log_rate.data.dtype)
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) > 0, log_rate.data.shape)
        n = keep.sum()
        if n <= 0:
            raise ValueError("poisson_nll mask selects no entries")
        # exponentiate only kept entries: excluded ones may be huge
        lr = np.where(keep, log_rate.data, 0.0)
        lam = np.where(keep, np.exp(lr), 0.0)
        per = lam - np.where(keep, counts * lr, 0.0)
    else:
        keep = None
        lam = np.exp(log_rate.data)
        per = lam - counts * log_rate.data
        n = per.size
    out = Tensor(np.asarray(per.sum() / n, dtype=log_rate.data.dtype))

    def bwd(g):
        grad = (lam - counts) / n
        if keep is not None:
            grad = np.where(keep, grad, 0.0)
        _acc(log_rate, g * grad)

    return _record(out, (log_rate,), bwd)


def cosine_alignment(a, b, eps=1e-8):
    """1 - mean cosine similarity between paired rows of a and b.

    a, b: [..., D]; the cosine is taken over the last axis and averaged
    over all leading positions. Gradients flow into both arguments (pass
    a constant Tensor to freeze one side).
    """
    a, b = tensor(a), tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    dot = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    denom = na * nb + eps
    cos = dot / denom
    n = max(cos.size, 1)
    out = Tensor(np.asarray(1.0 - cos.sum() / n, dtype=a.data.dtype))

    def bwd(g):
        s = -g / n
        ga = s[..., None] * (
            b.data / denom[..., None]
            - a.data * (cos / (na * na + eps))[..., None]
        )
        gb = s[..., None] * (
            a.data / denom[..., None]
            - b.data * (cos / (nb * nb + eps))[..., None]
        )
        _acc(a, ga)
        _acc(b, gb)

    return _record(out, (a, b), bwd)
