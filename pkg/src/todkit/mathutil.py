"""Small shared numeric helpers (softmax, cross-entropy, cosine, init)."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm as _norm


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 limit: float = 2.0) -> np.ndarray:
    """Truncated-normal draws via inverse CDF (deterministic per generator)."""
    lo, hi = _norm.cdf(-limit), _norm.cdf(limit)
    u = rng.random(shape)
    return _norm.ppf(lo + u * (hi - lo)) * std


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(x, axis=axis))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Summed cross-entropy over rows.

    Returns ``(loss_sum, dlogits, probs)`` where ``dlogits`` is the gradient
    of the summed loss (``probs - onehot``).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ValueError("targets must have one entry per logits row")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, targets].sum()
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1.0
    return loss, dlogits, probs


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def cosine_rows(p: np.ndarray, values: np.ndarray):
    """Cosine of one vector against every row of ``values``.

    Returns ``(sims, cache)`` where the cache carries the norms needed by
    :func:`cosine_rows_backward`.
    """
    pn = float(np.linalg.norm(p))
    vn = np.linalg.norm(values, axis=1)
    denom = np.maximum(pn * vn, 1e-12)
    sims = values @ p / denom
    return sims, (pn, vn, denom)


def cosine_rows_backward(dsims: np.ndarray, p: np.ndarray, values: np.ndarray, cache):
    """Gradient of cosine_rows w.r.t. ``p`` only (values are held fixed)."""
    pn, vn, denom = cache
    sims = values @ p / denom
    # d cos_i / dp = v_i / (|p||v_i|) - cos_i * p / |p|^2
    dp = (dsims / denom) @ values
    dp -= (dsims * sims).sum() * p / max(pn * pn, 1e-24)
    return dp
