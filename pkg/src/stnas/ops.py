"""Forward operators with their reverse-mode closures.

All image tensors are NCHW. Every operator records one node on the graph of
its first input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError
from .tensor import Tensor


def _check_ndim(x: Tensor, ndim: int, what: str):
    if x.data.ndim != ndim:
        raise DimensionError(f"{x.graph.path(what)}: expected {ndim}-d input, got shape {x.data.shape}")


def _im2col_nhwc(xh: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded NHWC array as rows ordered (kh, kw, C)."""
    n, _, _, c = xh.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xh.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation without bias. ``padding`` defaults to ``k // 2`` ("same" at stride 1).

    Computed as an im2col matrix product in channels-last layout.
    """
    _check_ndim(x, 4, "conv2d")
    xd, wd = x.data, w.data
    k, c, kh, kw = wd.shape
    if xd.shape[1] != c:
        raise DimensionError(
            f"{x.graph.path('conv2d')}: input has {xd.shape[1]} channels but weight {w.path!r} expects {c}"
        )
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError(f"{x.graph.path('conv2d')}: unsupported kernel {kh}x{kw}")
    p = kh // 2 if padding is None else padding
    n, _, h, wid = xd.shape
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wid + 2 * p - kw) // stride + 1
    xh = np.zeros((n, h + 2 * p, wid + 2 * p, c), dtype=xd.dtype)
    xh[:, p:p + h, p:p + wid, :] = xd.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1 and stride == 1:
        cols = xh.reshape(n * ho * wo, c)
    else:
        cols = _im2col_nhwc(xh, kh, kw, stride, ho, wo)
    wm = wd.transpose(0, 2, 3, 1).reshape(k, -1)
    out = np.ascontiguousarray((cols @ wm.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
        dw = np.ascontiguousarray((gm.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
        dcols = (gm @ wm).reshape(n, ho, wo, kh, kw, c)
        dxh = np.zeros_like(xh)
        for i in range(kh):
            for j in range(kw):
                dxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = np.ascontiguousarray(dxh[:, p:p + h, p:p + wid, :].transpose(0, 3, 1, 2))
        return dx, dw

    return x.graph.record(out, (x, w), grad_fn, "conv2d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Training-mode batch normalization over (N, H, W) per channel."""
    _check_ndim(x, 4, "batchnorm")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"{x.graph.path('batchnorm')}: affine params do not match {c} channels")
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv_std
    ga = gamma.data.reshape(1, c, 1, 1)
    out = xhat * ga + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dx = (ga * inv_std / m) * (
            m * g - dbeta.reshape(1, c, 1, 1) - xhat * dgamma.reshape(1, c, 1, 1)
        )
        return dx, dgamma, dbeta

    return x.graph.record(out, (x, gamma, beta), grad_fn, "batchnorm")


def relu(x: Tensor) -> Tensor:
    """Rectifier; the on/off mask is appended to the graph's activation taps."""
    mask = x.data > 0
    out = x.data * mask
    graph = x.graph
    node = graph.record(out, (x,), lambda g: (g * mask,), "relu")
    graph.taps.append((node.path, mask))
    return node


def _pool_counts(h, w, dtype):
    ones = np.pad(np.ones((h, w), dtype=dtype), 1)
    return sliding_window_view(ones, (3, 3)).sum(axis=(2, 3))


def avgpool3x3(x: Tensor) -> Tensor:
    """3x3 average pool, stride 1, padding 1; padded cells are not counted."""
    _check_ndim(x, 4, "avgpool3x3")
    xd = x.data
    n, c, h, w = xd.shape
    counts = _pool_counts(h, w, xd.dtype)
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s = np.zeros_like(xd)
    for i in range(3):
        for j in range(3):
            s += xp[:, :, i:i + h, j:j + w]
    out = s / counts

    def grad_fn(g):
        gs = g / counts
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=xd.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += gs
        return (dxp[:, :, 1:-1, 1:-1],)

    return x.graph.record(out, (x,), grad_fn, "avgpool3x3")


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 average pool with stride 2 (residual shortcut downsampling)."""
    _check_ndim(x, 4, "avgpool2x2")
    xd = x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"{x.graph.path('avgpool2x2')}: spatial size {h}x{w} is not even")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        q = g * xd.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return x.graph.record(out, (x,), grad_fn, "avgpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_ndim(x, 4, "global_avg_pool")
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], xd.shape).copy(),)

    return x.graph.record(out, (x,), grad_fn, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    _check_ndim(x, 2, "linear")
    xd, wd = x.data, w.data
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(
            f"{x.graph.path('linear')}: input has {xd.shape[1]} features but weight {w.path!r} expects {wd.shape[1]}"
        )
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        dx = g @ wd
        dw = g.T @ xd
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return x.graph.record(out, parents, grad_fn, "linear")


def add(*xs: Tensor) -> Tensor:
    """Elementwise sum, accumulated left to right."""
    if len(xs) == 1:
        return xs[0]
    shape = xs[0].data.shape
    for t in xs[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"{xs[0].graph.path('add')}: shape {t.data.shape} != {shape}")
    out = xs[0].data + xs[1].data
    for t in xs[2:]:
        out = out + t.data
    return xs[0].graph.record(out, xs, lambda g: (g,) * len(xs), "add")


def take_columns(x: Tensor, k: int) -> Tensor:
    """The first ``k`` columns of a 2-d tensor."""
    _check_ndim(x, 2, "take_columns")
    xd = x.data
    if not 1 <= k <= xd.shape[1]:
        raise DimensionError(f"{x.graph.path('take_columns')}: cannot take {k} of {xd.shape[1]} columns")
    if k == xd.shape[1]:
        return x

    def grad_fn(g):
        d = np.zeros_like(xd)
        d[:, :k] = g
        return (d,)

    return x.graph.record(xd[:, :k].copy(), (x,), grad_fn, "take_columns")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{a.graph.path('mul')}: shape {a.data.shape} != {b.data.shape}")
    ad, bd = a.data, b.data
    return a.graph.record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def total(x: Tensor) -> Tensor:
    xd = x.data
    return x.graph.record(xd.sum(), (x,), lambda g: (np.full_like(xd, g),), "sum")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    _check_ndim(logits, 2, "softmax_cross_entropy")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError(f"{logits.graph.path('softmax_cross_entropy')}: non-finite logits from {logits.path!r}")
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"{logits.graph.path('softmax_cross_entropy')}: {labels.shape[0]} labels for {n} rows")
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sumexp = exp.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sumexp)
    loss = -logp[np.arange(n), labels].mean()
    probs = exp / sumexp

    def grad_fn(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return logits.graph.record(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn, "softmax_cross_entropy")
