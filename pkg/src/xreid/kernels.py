"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``XREID_NUMBA`` is not set to
``0``. Every kernel exists in both flavours under ``NUMPY_KERNELS`` and
``NUMBA_KERNELS`` so tests and the benchmark can exercise each explicitly;
the module-level names point at the selected implementation.

Row-wise kernels take 2-D arrays (callers flatten leading dimensions) and
accumulate in float64, returning the input dtype.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

USE_NUMBA = nb is not None and os.environ.get("XREID_NUMBA", "1") != "0"

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_layer_norm_fwd(x, gamma, beta, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma.astype(np.float64) + beta.astype(np.float64)
    return y.astype(x.dtype), xhat, rstd[:, 0]


def _np_layer_norm_bwd(g, xhat, rstd, gamma):
    g64 = g.astype(np.float64)
    dgamma = (g64 * xhat).sum(axis=0)
    dbeta = g64.sum(axis=0)
    gx = g64 * gamma.astype(np.float64)
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (gx - m1 - xhat * m2)
    return dx.astype(g.dtype), dgamma.astype(g.dtype), dbeta.astype(g.dtype)


def _np_softmax_fwd(x):
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def _np_softmax_bwd(g, y):
    g64 = g.astype(np.float64)
    y64 = y.astype(np.float64)
    s = (g64 * y64).sum(axis=1, keepdims=True)
    return (y64 * (g64 - s)).astype(g.dtype)


def _np_log_softmax_fwd(x):
    x64 = x.astype(np.float64)
    z = x64 - x64.max(axis=1, keepdims=True)
    return (z - np.log(np.exp(z).sum(axis=1, keepdims=True))).astype(x.dtype)


def _np_log_softmax_bwd(g, out):
    g64 = g.astype(np.float64)
    p = np.exp(out.astype(np.float64))
    return (g64 - p * g64.sum(axis=1, keepdims=True)).astype(g.dtype)


def _np_gelu_fwd(x):
    x64 = x.astype(np.float64)
    return (0.5 * x64 * (1.0 + _erf(x64 * _SQRT_HALF))).astype(x.dtype)


def _np_gelu_bwd(g, x):
    x64 = x.astype(np.float64)
    cdf = 0.5 * (1.0 + _erf(x64 * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)
    return (g.astype(np.float64) * (cdf + x64 * pdf)).astype(g.dtype)


def _np_pairwise_sq_dist(a, b):
    diff = a.astype(np.float64)[:, None, :] - b.astype(np.float64)[None, :, :]
    return (diff * diff).sum(axis=2)


def _np_batch_hard(dist, labels):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos_d = np.where(same, dist, -np.inf)
    neg_d = np.where(diff, dist, np.inf)
    pos = pos_d.argmax(axis=1)
    neg = neg_d.argmin(axis=1)
    rows = np.arange(len(labels))
    return pos, neg, dist[rows, pos], dist[rows, neg]


def _np_retrieval_ap(dist, qlabels, glabels):
    order = np.argsort(dist, axis=1, kind="stable")
    match = glabels[order] == qlabels[:, None]
    hits = np.cumsum(match, axis=1)
    ranks = np.arange(1, dist.shape[1] + 1)
    prec = hits / ranks
    n_rel = match.sum(axis=1)
    ap = (prec * match).sum(axis=1) / np.maximum(n_rel, 1)
    return ap, match[:, 0].copy()


def _np_cluster_stats(x, labels, k):
    x64 = x.astype(np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centers = np.zeros((k, x.shape[1]))
    np.add.at(centers, labels, x64)
    centers /= counts[:, None]
    dev = x64 - centers[labels]
    sq = (dev * dev).sum(axis=1)
    dist_sum = np.bincount(labels, weights=np.sqrt(sq), minlength=k)
    within = sq.sum()
    grand = x64.mean(axis=0)
    between = (counts * ((centers - grand) ** 2).sum(axis=1)).sum()
    return dist_sum / counts, within, between


NUMPY_KERNELS = {
    "layer_norm_fwd": _np_layer_norm_fwd,
    "layer_norm_bwd": _np_layer_norm_bwd,
    "softmax_fwd": _np_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "log_softmax_fwd": _np_log_softmax_fwd,
    "log_softmax_bwd": _np_log_softmax_bwd,
    "gelu_fwd": _np_gelu_fwd,
    "gelu_bwd": _np_gelu_bwd,
    "pairwise_sq_dist": _np_pairwise_sq_dist,
    "batch_hard": _np_batch_hard,
    "retrieval_ap": _np_retrieval_ap,
    "cluster_stats": _np_cluster_stats,
}


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

NUMBA_KERNELS: dict = {}

if nb is not None:
    _jit = nb.njit(cache=True)

    @_jit
    def _nb_layer_norm_fwd(x, gamma, beta, eps):
        rows, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty((rows, d))
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[r, j] - mu
                var += c * c
            var /= d
            s = 1.0 / math.sqrt(var + eps)
            rstd[r] = s
            for j in range(d):
                h = (x[r, j] - mu) * s
                xhat[r, j] = h
                y[r, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @_jit
    def _nb_layer_norm_bwd(g, xhat, rstd, gamma):
        rows, d = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        gx = np.empty(d)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gj = np.float64(g[r, j])
                dgamma[j] += gj * xhat[r, j]
                dbeta[j] += gj
                gx[j] = gj * gamma[j]
                m1 += gx[j]
                m2 += gx[j] * xhat[r, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[r, j] = rstd[r] * (gx[j] - m1 - xhat[r, j] * m2)
        return dx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)

    @_jit
    def _nb_softmax_fwd(x):
        rows, c = x.shape
        y = np.empty_like(x)
        e = np.empty(c)
        for r in range(rows):
            m = -np.inf
            for j in range(c):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(c):
                e[j] = math.exp(np.float64(x[r, j]) - m)
                s += e[j]
            for j in range(c):
                y[r, j] = e[j] / s
        return y

    @_jit
    def _nb_softmax_bwd(g, y):
        rows, c = g.shape
        dx = np.empty_like(g)
        for r in range(rows):
            s = 0.0
            for j in range(c):
                s += np.float64(g[r, j]) * y[r, j]
            for j in range(c):
                dx[r, j] = np.float64(y[r, j]) * (g[r, j] - s)
        return dx

    @_jit
    def _nb_log_softmax_fwd(x):
        rows, c = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = -np.inf
            for j in range(c):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(c):
                s += math.exp(np.float64(x[r, j]) - m)
            lse = math.log(s)
            for j in range(c):
                out[r, j] = (np.float64(x[r, j]) - m) - lse
        return out

    @_jit
    def _nb_log_softmax_bwd(g, out):
        rows, c = g.shape
        dx = np.empty_like(g)
        for r in range(rows):
            s = 0.0
            for j in range(c):
                s += g[r, j]
            for j in range(c):
                dx[r, j] = g[r, j] - math.exp(np.float64(out[r, j])) * s
        return dx

    @_jit
    def _nb_gelu_fwd(x):
        flat = x.ravel()
        y = np.empty_like(flat)
        for i in range(flat.size):
            v = np.float64(flat[i])
            y[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))
        return y.reshape(x.shape)

    @_jit
    def _nb_gelu_bwd(g, x):
        gf = g.ravel()
        xf = x.ravel()
        dx = np.empty_like(gf)
        for i in range(xf.size):
            v = np.float64(xf[i])
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
            pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
            dx[i] = gf[i] * (cdf + v * pdf)
        return dx.reshape(g.shape)

    @_jit
    def _nb_pairwise_sq_dist(a, b):
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    t = np.float64(a[i, k]) - np.float64(b[j, k])
                    s += t * t
                out[i, j] = s
        return out

    @_jit
    def _nb_batch_hard(dist, labels):
        n = labels.shape[0]
        pos = np.empty(n, dtype=np.int64)
        neg = np.empty(n, dtype=np.int64)
        d_ap = np.empty(n)
        d_an = np.empty(n)
        for a in range(n):
            best_p = -np.inf
            best_n = np.inf
            ip = -1
            ineg = -1
            for j in range(n):
                if j == a:
                    continue
                if labels[j] == labels[a]:
                    if dist[a, j] > best_p:
                        best_p = dist[a, j]
                        ip = j
                elif dist[a, j] < best_n:
                    best_n = dist[a, j]
                    ineg = j
            pos[a] = ip
            neg[a] = ineg
            d_ap[a] = best_p
            d_an[a] = best_n
        return pos, neg, d_ap, d_an

    @_jit
    def _nb_retrieval_ap(dist, qlabels, glabels):
        q, g = dist.shape
        ap = np.zeros(q)
        top1 = np.zeros(q, dtype=np.bool_)
        for i in range(q):
            order = np.argsort(dist[i], kind="mergesort")
            hits = 0
            acc = 0.0
            for r in range(g):
                if glabels[order[r]] == qlabels[i]:
                    hits += 1
                    acc += hits / (r + 1.0)
            if hits > 0:
                ap[i] = acc / hits
            top1[i] = glabels[order[0]] == qlabels[i]
        return ap, top1

    @_jit
    def _nb_cluster_stats(x, labels, k):
        m, d = x.shape
        counts = np.zeros(k)
        centers = np.zeros((k, d))
        grand = np.zeros(d)
        for i in range(m):
            c = labels[i]
            counts[c] += 1.0
            for j in range(d):
                centers[c, j] += x[i, j]
                grand[j] += x[i, j]
        for c in range(k):
            for j in range(d):
                centers[c, j] /= counts[c]
        for j in range(d):
            grand[j] /= m
        dist_sum = np.zeros(k)
        within = 0.0
        for i in range(m):
            c = labels[i]
            s = 0.0
            for j in range(d):
                t = np.float64(x[i, j]) - centers[c, j]
                s += t * t
            within += s
            dist_sum[c] += math.sqrt(s)
        between = 0.0
        for c in range(k):
            s = 0.0
            for j in range(d):
                t = centers[c, j] - grand[j]
                s += t * t
            between += counts[c] * s
        return dist_sum / counts, within, between

    NUMBA_KERNELS = {
        "layer_norm_fwd": _nb_layer_norm_fwd,
        "layer_norm_bwd": _nb_layer_norm_bwd,
        "softmax_fwd": _nb_softmax_fwd,
        "softmax_bwd": _nb_softmax_bwd,
        "log_softmax_fwd": _nb_log_softmax_fwd,
        "log_softmax_bwd": _nb_log_softmax_bwd,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
        "pairwise_sq_dist": _nb_pairwise_sq_dist,
        "batch_hard": _nb_batch_hard,
        "retrieval_ap": _nb_retrieval_ap,
        "cluster_stats": _nb_cluster_stats,
    }

ACTIVE: dict = {}
BACKEND = ""


def set_backend(name: str) -> str:
    """Rebind the module-level kernels to "numpy" or "numba"; returns the previous backend."""
    global ACTIVE, BACKEND
    if name == "numba" and not NUMBA_KERNELS:
        raise RuntimeError("numba backend requested but numba is not installed")
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    previous = BACKEND
    ACTIVE = NUMBA_KERNELS if name == "numba" else NUMPY_KERNELS
    BACKEND = name
    globals().update(ACTIVE)
    return previous


set_backend("numba" if USE_NUMBA else "numpy")
