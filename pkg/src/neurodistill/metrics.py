"""Evaluation suite: linear decoding, cross-modal retrieval, CKA.

All metrics operate on pooled representations (one vector per timestep or
per sequence) as plain float64 arrays. Decoders are always fit on train
sequences and scored on held-out test sequences; nothing here ever sees
gradient state.
"""

from __future__ import annotations

import warnings

import numpy as np


def pool_sequences(reps):
    """[n_seq, T, d] -> [n_seq, d] by time averaging."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 3:
        raise ValueError(f"expected [n_seq, T, d], got {reps.shape}")
    return reps.mean(axis=1)


def flatten_timesteps(reps):
    """[n_seq, T, d] -> [n_seq*T, d], sequence-major."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 3:
        raise ValueError(f"expected [n_seq, T, d], got {reps.shape}")
    return reps.reshape(-1, reps.shape[-1])


def fit_linear_decoder(x, y, ridge=1e-3):
    """Closed-form ridge regression with intercept.

    The penalty is scaled by mean(trace(X^T X)/d) so one default works
    across representation scales. ridge=0 is honored but raises if the
    normal equations are singular rather than silently pinv-ing.
    Returns (W [d, k], b [k]).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad decoder shapes {x.shape} vs {y.shape}")
    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    yc = y - ym
    gram = xc.T @ xc
    if ridge:
        scale = np.trace(gram) / gram.shape[0]
        gram = gram + (ridge * max(scale, 1e-12)) * np.eye(gram.shape[0])
        w = np.linalg.solve(gram, xc.T @ yc)
    else:
        try:
            w = np.linalg.solve(gram, xc.T @ yc)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "normal equations are singular and ridge=0; pass ridge>0"
            )
    b = ym - xm @ w
    return w, b


def r2_score(y_true, y_pred):
    """Mean over output dims of per-dim R^2.

    Target dims with zero variance carry no decodable signal; they are
    excluded with a warning instead of contributing -inf.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.ndim == 1:
        y_true = y_true[:, None]
        y_pred = y_pred[:, None]
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    var = y_true.var(axis=0)
    keep = var > 0
    if not keep.all():
        warnings.warn(
            f"excluding {int((~keep).sum())} zero-variance target dims from R^2",
            RuntimeWarning,
        )
    if not keep.any():
        return float("nan")
    ss_tot = var[keep] * y_true.shape[0]
    return float(np.mean(1.0 - ss_res[keep] / ss_tot))


def decode_r2(train_x, train_y, test_x, test_y, ridge=1e-3):
    """Fit on train, score R^2 on test. The only decoding protocol used."""
    w, b = fit_linear_decoder(train_x, train_y, ridge=ridge)
    return r2_score(test_y, test_x @ w + b)


def retrieval_metrics(query, keys):
    """Cross-modal retrieval: row i of `query` should retrieve row i of `keys`.

    Candidates are ranked by descending cosine similarity; exact ties are
    broken toward lower index and counted so suspicious collapse (all-equal
    similarities) is visible in the report. Zero-norm rows on either side
    cannot carry a cosine and are excluded with a warning.

    Returns dict with top1, top5, mean_rank (1-based), n, n_ties.
    """
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 2:
        raise ValueError(f"paired matrices required, got {q.shape} vs {k.shape}")
    qn = np.linalg.norm(q, axis=1)
    kn = np.linalg.norm(k, axis=1)
    good = (qn > 0) & (kn > 0)
    if not good.all():
        warnings.warn(
            f"excluding {int((~good).sum())} zero-norm rows from retrieval",
            RuntimeWarning,
        )
    q, k = q[good], k[good]
    qn, kn = qn[good], kn[good]
    n = q.shape[0]
    if n == 0:
        raise ValueError("no usable rows for retrieval")
    sim = (q / qn[:, None]) @ (k / kn[:, None]).T
    ranks = np.empty(n, dtype=np.int64)
    n_ties = 0
    for i in range(n):
        row = sim[i]
        own = row[i]
        better = int((row > own).sum())
        tied_lower = int((row[:i] == own).sum())
        n_ties += int((row == own).sum()) - 1
        ranks[i] = 1 + better + tied_lower
    return {
        "top1": float((ranks == 1).mean()),
        "top5": float((ranks <= 5).mean()),
        "mean_rank": float(ranks.mean()),
        "n": int(n),
        "n_ties": int(n_ties),
    }


def linear_cka(x, y):
    """Linear centered kernel alignment between two representations.

    ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F), rows paired.
    All-zero (constant) inputs have no alignment to measure and raise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"paired 2-d matrices required, got {x.shape} vs {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0 or yy == 0:
        raise ValueError("CKA undefined for a constant representation")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xx * yy))


def chance_levels(n):
    """Expected retrieval metrics for a random ranking over n candidates."""
    n = int(n)
    return {
        "top1": 1.0 / n,
        "top5": min(5.0, n) / n,
        "mean_rank": (n + 1) / 2.0,
    }
