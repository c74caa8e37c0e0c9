"""Short training on a proxy set, recording weights before and after."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .data import ProxyDataset
from .errors import DivergedError, NumericError
from .optim import INIT_SCHEMES, SGD
from .seeding import rng_for
from .tensor import Graph, Role, backward


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = False
    init_scheme: str = "kaiming_uniform"
    seed: int = 0
    batch_size: int | None = None  # None: the whole proxy set every step
    include_pred_bias: bool = False
    include_bn_in_feat: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WeightSnapshot:
    pred_weight_0: np.ndarray
    pred_weight_t: np.ndarray
    feat_0: np.ndarray
    feat_t: np.ndarray
    final_loss: float
    loss_curve: np.ndarray


def _flatten(params, rows=None) -> np.ndarray:
    """Concatenate parameter values; ``rows`` keeps only the leading rows (the trained classes)."""
    if not params:
        return np.zeros(0)
    return np.concatenate([(p.value if rows is None else p.value[:rows]).ravel() for p in params]).astype(np.float64)


def _split(network, cfg: TrainConfig):
    pred, feat = [], []
    for p in network.parameters():
        if p.role is Role.PREDICTION_WEIGHT or (cfg.include_pred_bias and p.role is Role.PREDICTION_BIAS):
            pred.append(p)
        elif p.role is Role.FEATURE and (cfg.include_bn_in_feat or ".bn." not in p.name):
            feat.append(p)
    return pred, feat


def proxy_loss(network, g: Graph, images, labels, k: int):
    """Cross-entropy over the first ``k`` logits (proxy labels are 0..k-1)."""
    return ops.softmax_cross_entropy(ops.take_columns(network.forward(g, g.input(images)), k), labels)


def evaluate_loss(network, images, labels, k: int | None = None) -> float:
    g = Graph(network.dtype)
    if k is None:
        k = int(np.max(labels)) + 1
    return float(proxy_loss(network, g, images, labels, k).data)


def short_train(network, proxy: ProxyDataset, cfg: TrainConfig = TrainConfig()) -> WeightSnapshot:
    """Run ``cfg.iterations`` SGD steps on ``proxy`` and return the before/after weights.

    Only the first ``proxy.k`` logits enter the loss, so a k-class proxy starts
    from ln k under a uniform softmax; the prediction vectors keep just those k
    classifier rows. ``final_loss`` comes from one extra forward pass after the
    last update.
    """
    k = proxy.k
    pred, feat = _split(network, cfg)
    pred0, feat0 = _flatten(pred, k), _flatten(feat)
    params = network.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
    images = proxy.images.astype(network.dtype, copy=False)
    labels = proxy.labels
    n = len(labels)
    rng = rng_for(cfg.seed, "batches") if cfg.batch_size else None
    order, cursor = None, n
    curve = np.zeros(cfg.iterations)
    # divergence is detected explicitly below, so numpy overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations):
            if cfg.batch_size and cfg.batch_size < n:
                if cursor + cfg.batch_size > n:
                    order, cursor = rng.permutation(n), 0
                idx = order[cursor:cursor + cfg.batch_size]
                cursor += cfg.batch_size
                xb, yb = images[idx], labels[idx]
            else:
                xb, yb = images, labels
            g = Graph(network.dtype)
            try:
                loss = proxy_loss(network, g, xb, yb, k)
            except NumericError as exc:
                raise DivergedError(f"diverged at iteration {it}: {exc}", iteration=it) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedError(f"non-finite loss at iteration {it}", iteration=it)
            curve[it] = value
            backward(g, loss)
            try:
                opt.step()
            except NumericError as exc:
                raise DivergedError(f"diverged at iteration {it}: {exc}", iteration=it) from exc
        try:
            final = evaluate_loss(network, images, labels, k)
        except NumericError as exc:
            raise DivergedError(f"diverged after training: {exc}", iteration=cfg.iterations) from exc
        if not math.isfinite(final):
            raise DivergedError("non-finite loss after training", iteration=cfg.iterations)
    pred, feat = _split(network, cfg)
    return WeightSnapshot(pred0, _flatten(pred, k), feat0, _flatten(feat), final, curve)


def write_loss_curves(path, curves: dict[str, np.ndarray]):
    """One row per (network, iteration)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", "iteration", "loss"])
        for name, curve in curves.items():
            for i, v in enumerate(curve):
                w.writerow([name, i, repr(float(v))])
