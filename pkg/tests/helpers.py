"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from stnas import ops
from stnas.space import CONV1X1, CONV3X3, CellGenotype, MacroConfig
from stnas.tensor import FLOAT64, Graph, backward


def naive_conv2d(x, w, stride=1, padding=None):
    """Seven nested loops, no vectorization."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    p = kh // 2 if padding is None else padding
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for b in range(n):
        for o in range(k):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yi, xj = i * stride + di - p, j * stride + dj - p
                                if 0 <= yi < h and 0 <= xj < wd:
                                    s += x[b, ci, yi, xj] * w[o, ci, di, dj]
                    out[b, o, i, j] = s
    return out


def naive_avgpool3x3(x):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    vals = [x[b, ch, a, d] for a in range(i - 1, i + 2) for d in range(j - 1, j + 2)
                            if 0 <= a < h and 0 <= d < w]
                    out[b, ch, i, j] = sum(vals) / len(vals)
    return out


def hand_count(genotype: CellGenotype, macro: MacroConfig = MacroConfig()) -> int:
    """#Param written out term by term for the residual-reduction cell network."""
    chans = [macro.stem_channels * 2 ** s for s in range(macro.num_stages)]
    total = 9 * macro.input_channels * chans[0] + 2 * chans[0]  # stem conv + BN
    for s, c in enumerate(chans):
        for _ in range(macro.cells_per_stage):
            for op in genotype.edge_ops:
                if op == CONV3X3:
                    total += 9 * c * c + 2 * c
                elif op == CONV1X1:
                    total += c * c + 2 * c
        if s + 1 < len(chans):
            co = chans[s + 1]
            total += 9 * c * co + 2 * co + 9 * co * co + 2 * co + c * co
    total += 2 * chans[-1] + chans[-1] * macro.num_classes + macro.num_classes
    return total


def loss_fn(net, x, y):
    g = Graph(net.dtype)
    loss = ops.softmax_cross_entropy(net.forward(g, g.input(x)), y)
    return g, loss


def fd_gradient_check(net, x, y, h=1e-5, floor=1e-8, max_shrink=4):
    """Compare analytic gradients with central differences for every scalar parameter.

    When a +-h probe flips any ReLU mask the loss is not smooth across the probe,
    so h is shrunk (up to ``max_shrink`` times by 10x); elements still straddling a
    kink are reported as skipped. Returns (worst relative error, checked, skipped, worst name).
    """
    assert net.dtype == FLOAT64
    g, loss = loss_fn(net, x, y)
    backward(g, loss)
    base = g.tap_codes()
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for p in net.parameters():
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            for _ in range(max_shrink + 1):
                flat[i] = orig + step
                gp, lp = loss_fn(net, x, y)
                flat[i] = orig - step
                gm, lm = loss_fn(net, x, y)
                flat[i] = orig
                if np.array_equal(gp.tap_codes(), base) and np.array_equal(gm.tap_codes(), base):
                    break
                step /= 10
            else:
                skipped += 1
                continue
            num = (float(lp.data) - float(lm.data)) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{p.name}[{i}]"
    return worst, checked, skipped, worst_name


class LinearModel:
    """f(x) = x @ W.T with W of shape (c, d); quacks like a CellNetwork for the NTK code."""

    def __init__(self, weight, dtype=FLOAT64):
        from stnas.tensor import ParamGroup, Role
        self.dtype = dtype
        self.w = ParamGroup("classifier.weight", np.asarray(weight, dtype=dtype), Role.PREDICTION_WEIGHT)

    def parameters(self):
        return [self.w]

    def astype(self, dtype):
        return LinearModel(self.w.value, dtype)

    def forward(self, g, x):
        return ops.linear(x, g.param(self.w))
