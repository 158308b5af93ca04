"""Reference numpy implementations of the hot kernels.

These are selected by :mod:`tabbench.kernels` when the compiled
``_speedups`` extension is unavailable, and they double as the oracle the
compiled versions are tested against.
"""
import numpy as np
from scipy.special import logsumexp, ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def midranks(values):
    """1-based ascending ranks; tied values share the mean of their ranks."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of tie blocks in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    block_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


def auc_binary(scores, positive):
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.shape[0] - n_pos
    ranks = midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def scatter_add_rows(target, idx, src):
    np.add.at(target, np.asarray(idx, dtype=np.int64), src)


def parzen_logpdf(x, mus, sigmas, weights, low, high):
    """Log density of a weighted mixture of normals truncated to [low, high]."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    mus = np.asarray(mus, dtype=np.float64)[None, :]
    sigmas = np.asarray(sigmas, dtype=np.float64)[None, :]
    z = (x - mus) / sigmas
    mass = ndtr((high - mus) / sigmas) - ndtr((low - mus) / sigmas)
    log_mass = np.log(np.maximum(mass, 1e-300))
    terms = (
        np.log(np.asarray(weights, dtype=np.float64))[None, :]
        - 0.5 * z * z
        - _LOG_SQRT_2PI
        - np.log(sigmas)
        - log_mass
    )
    return logsumexp(terms, axis=1)


__all__ = ["midranks", "auc_binary", "scatter_add_rows", "parzen_logpdf"]


def _split_heads(x, n_heads):
    m, t, d = x.shape
    return np.ascontiguousarray(x.reshape(m, t, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x):
    m, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(m, t, h * dh))


def _softmax_last(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(q, k, v, n_heads, keep=None):
    """Scaled dot-product attention on (m, t, d) inputs split into ``n_heads`` slices.

    Returns the pre-dropout weights (m, h, t, t) and the merged output (m, t, d).
    ``keep`` is an optional multiplicative dropout mask shaped like the weights.
    """
    qh, kh, vh = (_split_heads(np.asarray(x, dtype=np.float64), n_heads) for x in (q, k, v))
    c = 1.0 / np.sqrt(qh.shape[-1])
    a = _softmax_last(np.matmul(qh, np.swapaxes(kh, -1, -2)) * c)
    ad = a if keep is None else a * keep
    return a, _merge_heads(np.matmul(ad, vh))


def attention_backward(g, q, k, v, a, n_heads, keep=None):
    qh, kh, vh, go = (_split_heads(np.asarray(x, dtype=np.float64), n_heads) for x in (q, k, v, g))
    c = 1.0 / np.sqrt(qh.shape[-1])
    ad = a if keep is None else a * keep
    ga = np.matmul(go, np.swapaxes(vh, -1, -2))
    gv = np.matmul(np.swapaxes(ad, -1, -2), go)
    if keep is not None:
        ga = ga * keep
    gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * c
    gq = np.matmul(gs, kh)
    gk = np.matmul(np.swapaxes(gs, -1, -2), qh)
    return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)
