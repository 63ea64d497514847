"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is resolved once at import time from the ``TODKIT_BACKEND``
environment variable:

* ``auto`` (default): numba when importable, numpy otherwise,
* ``numba``: require numba, fail loudly if it is missing,
* ``numpy``: force the pure-numpy implementations.

Both backends compute the same float64 arithmetic; results can differ only
at summation-order rounding level (~1e-15 relative). ``benchmarks/`` holds
a script comparing the two side by side.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

ENV_VAR = "TODKIT_BACKEND"


def resolve_backend(choice: str | None = None) -> str:
    """Map an env-style backend choice to the concrete backend name."""
    if choice is None:
        choice = os.environ.get(ENV_VAR, "auto")
    choice = choice.strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"unknown backend {choice!r}; expected auto, numba or numpy")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _np_layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def _np_layer_norm_bwd(dy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def _np_gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def _np_masked_softmax(scores, key_mask):
    # scores: (B, nh, Lq, Lk), key_mask: (B, Lk) with 1 on real tokens.
    allowed = key_mask[:, None, None, :] != 0
    shifted = np.where(allowed, scores, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(probs, dprobs):
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def _np_adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    update = (m / bc1) / (np.sqrt(v / bc2) + eps)
    if wd != 0.0:
        p *= 1.0 - lr * wd
    p -= lr * update


_NUMPY_IMPL = SimpleNamespace(
    name="numpy",
    layer_norm_fwd=_np_layer_norm_fwd,
    layer_norm_bwd=_np_layer_norm_bwd,
    gelu_fwd=_np_gelu_fwd,
    gelu_bwd=_np_gelu_bwd,
    masked_softmax=_np_masked_softmax,
    softmax_bwd=_np_softmax_bwd,
    adamw_update=_np_adamw_update,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def layer_norm_fwd(x, gain, bias, eps):
        n, h = x.shape
        y = np.empty_like(x)
        mean = np.empty(n)
        rstd = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(h):
                s += x[i, j]
            mu = s / h
            var = 0.0
            for j in range(h):
                d = x[i, j] - mu
                var += d * d
            r = 1.0 / math.sqrt(var / h + eps)
            for j in range(h):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
            mean[i] = mu
            rstd[i] = r
        return y, mean, rstd

    @njit(cache=True)
    def layer_norm_bwd(dy, x, gain, mean, rstd):
        n, h = x.shape
        dx = np.empty_like(x)
        dgain = np.zeros(h)
        dbias = np.zeros(h)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(h):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                dgain[j] += dy[i, j] * xhat
                dbias[j] += dy[i, j]
                dxh = dy[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat
            m1 /= h
            m2 /= h
            for j in range(h):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                dxh = dy[i, j] * gain[j]
                dx[i, j] = (dxh - m1 - xhat * m2) * rstd[i]
        return dx, dgain, dbias

    @njit(cache=True)
    def gelu_fwd(x):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            out[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))
        return out

    @njit(cache=True)
    def gelu_bwd(x, dy):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
            pdf = _INV_SQRT2PI * math.exp(-0.5 * xi * xi)
            out[i] = dy[i] * (cdf + xi * pdf)
        return out

    @njit(cache=True)
    def masked_softmax(scores, key_mask):
        b, nh, lq, lk = scores.shape
        out = np.zeros_like(scores)
        for bi in range(b):
            for h in range(nh):
                for i in range(lq):
                    mx = -np.inf
                    for j in range(lk):
                        if key_mask[bi, j] != 0 and scores[bi, h, i, j] > mx:
                            mx = scores[bi, h, i, j]
                    if mx == -np.inf:
                        continue
                    s = 0.0
                    for j in range(lk):
                        if key_mask[bi, j] != 0:
                            e = math.exp(scores[bi, h, i, j] - mx)
                            out[bi, h, i, j] = e
                            s += e
                    for j in range(lk):
                        out[bi, h, i, j] /= s
        return out

    @njit(cache=True)
    def softmax_bwd(probs, dprobs):
        b, nh, lq, lk = probs.shape
        out = np.empty_like(probs)
        for bi in range(b):
            for h in range(nh):
                for i in range(lq):
                    inner = 0.0
                    for j in range(lk):
                        inner += probs[bi, h, i, j] * dprobs[bi, h, i, j]
                    for j in range(lk):
                        out[bi, h, i, j] = probs[bi, h, i, j] * (dprobs[bi, h, i, j] - inner)
        return out

    @njit(cache=True)
    def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        decay = 1.0 - lr * wd
        for i in range(p.size):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            update = (mi / bc1) / (math.sqrt(vi / bc2) + eps)
            p[i] = p[i] * decay - lr * update

    return SimpleNamespace(
        name="numba",
        layer_norm_fwd=layer_norm_fwd,
        layer_norm_bwd=layer_norm_bwd,
        gelu_fwd=gelu_fwd,
        gelu_bwd=gelu_bwd,
        masked_softmax=masked_softmax,
        softmax_bwd=softmax_bwd,
        adamw_update=adamw_update,
    )


_IMPLS: dict[str, SimpleNamespace] = {"numpy": _NUMPY_IMPL}


def get_impl(backend: str) -> SimpleNamespace:
    """Return the kernel namespace for a backend, building numba lazily."""
    if backend not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend not in _IMPLS:
        _IMPLS["numba"] = _build_numba_impl()
    return _IMPLS[backend]


BACKEND = resolve_backend()
_ACTIVE = get_impl(BACKEND)


def _flat(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1)


def layer_norm_fwd(x, gain, bias, eps):
    """Row-wise layer norm over the last axis of 2-D ``x``."""
    return _ACTIVE.layer_norm_fwd(np.ascontiguousarray(x), gain, bias, eps)


def layer_norm_bwd(dy, x, gain, mean, rstd):
    return _ACTIVE.layer_norm_bwd(
        np.ascontiguousarray(dy), np.ascontiguousarray(x), gain, mean, rstd
    )


def gelu_fwd(x):
    """Exact (erf-based) GELU, any shape."""
    if BACKEND == "numpy":
        return _ACTIVE.gelu_fwd(x)
    return _ACTIVE.gelu_fwd(_flat(x)).reshape(x.shape)


def gelu_bwd(x, dy):
    if BACKEND == "numpy":
        return _ACTIVE.gelu_bwd(x, dy)
    return _ACTIVE.gelu_bwd(_flat(x), _flat(dy)).reshape(x.shape)


def masked_softmax(scores, key_mask):
    """Softmax over the last axis with masked key positions held at 0."""
    return _ACTIVE.masked_softmax(
        np.ascontiguousarray(scores), np.ascontiguousarray(key_mask)
    )


def softmax_bwd(probs, dprobs):
    return _ACTIVE.softmax_bwd(
        np.ascontiguousarray(probs), np.ascontiguousarray(dprobs)
    )


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """Fused in-place AdamW step on one tensor (decoupled weight decay)."""
    _ACTIVE.adamw_update(
        p.reshape(-1), _flat(g), m.reshape(-1), v.reshape(-1),
        lr, beta1, beta2, eps, wd, bc1, bc2,
    )
