"""Architecture-ranking metrics.

Every score is oriented so that a larger value predicts a better network:

============  =====================================  ==========================
field         stored value                           raw quantity
============  =====================================  ==========================
param_count   number of trainable scalars            same
lr1           distinct activation patterns           same
lr2           log det of the Hamming kernel          same (log preserves order)
ntk_score     -cond(NTK)                             condition number, negated
angle_score   -theta_pred                            prediction-layer angle
theta_feat    theta_feat                             feature-layer angle (raw)
loss_score    -final training loss                   loss, negated
============  =====================================  ==========================

Degenerate LR2/NTK values are the sentinel ``DEGENERATE`` (-inf) with a flag.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, ProxyDataset, sample_proxy
from .errors import DegenerateInputError, DimensionError, DivergedError, NumericError
from .seeding import derive_seed, rng_for
from .space import CellGenotype, CellNetwork, MacroConfig, build_network, count_params
from .tensor import FLOAT64, Graph, backward
from .trainer import TrainConfig, WeightSnapshot, short_train

log = logging.getLogger(__name__)

DEGENERATE = float("-inf")
METRICS = ("param", "lr1", "lr2", "ntk", "angle", "angle_feat", "loss")
TRAINING_METRICS = frozenset({"angle", "angle_feat", "loss"})
LR2_EPS = 1e-9
NTK_EPS = 1e-12


def angle(v0, vt) -> float:
    """Angle in radians between two flat vectors (arccos of the clamped cosine)."""
    a = np.asarray(v0, dtype=np.float64).ravel()
    b = np.asarray(vt, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"angle: vector lengths differ ({a.size} vs {b.size})")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("angle: zero-norm vector")
    cos = float(np.dot(a, b) / (na * nb))
    return math.acos(min(1.0, max(-1.0, cos)))


def metric_angle_pred(snapshot: WeightSnapshot) -> float:
    return -angle(snapshot.pred_weight_0, snapshot.pred_weight_t)


def metric_angle_feat(snapshot: WeightSnapshot) -> float:
    return angle(snapshot.feat_0, snapshot.feat_t)


def metric_loss(snapshot: WeightSnapshot) -> float:
    return -snapshot.final_loss


def metric_param(genotype: CellGenotype, macro: MacroConfig) -> int:
    return count_params(genotype, macro)


def activation_codes(network, batch) -> np.ndarray:
    """Boolean (n, N_A) matrix: every ReLU unit's on/off state for every sample."""
    g = Graph(network.dtype)
    network.forward(g, g.input(np.asarray(batch, dtype=network.dtype)))
    return g.tap_codes()


def count_distinct(codes: np.ndarray) -> int:
    if codes.shape[1] == 0:
        return 1
    return int(np.unique(np.packbits(codes, axis=1), axis=0).shape[0])


def metric_lr1(network, batch) -> int:
    """Number of distinct activation patterns over the batch."""
    if len(batch) < 2:
        raise ValueError("lr1 needs at least two samples")
    return count_distinct(activation_codes(network, batch))


def hamming_kernel(codes: np.ndarray) -> np.ndarray:
    """K_ij = N_A - Hamming(code_i, code_j), exact in float64."""
    c = codes.astype(np.float64)
    return c @ c.T + (1.0 - c) @ (1.0 - c).T


def log_det_psd(k: np.ndarray, rel_eps: float, scale: float | None = None) -> float:
    """Sum of log eigenvalues, or ``DEGENERATE`` if any eigenvalue <= rel_eps * scale."""
    lam = np.linalg.eigvalsh(k)
    ref = float(lam.max()) if scale is None else scale
    if lam.min() <= rel_eps * ref:
        return DEGENERATE
    return float(np.sum(np.log(lam)))


def _canonical_order(codes: np.ndarray) -> np.ndarray:
    packed = np.packbits(codes, axis=1)
    if packed.shape[1] == 0:
        return np.arange(codes.shape[0])
    return np.lexsort(packed.T[::-1])


def lr2_from_codes(codes: np.ndarray) -> float:
    n_units = codes.shape[1]
    if n_units == 0:
        return DEGENERATE
    # canonical row order makes the score exactly invariant to sample order
    codes = codes[_canonical_order(codes)]
    return log_det_psd(hamming_kernel(codes), LR2_EPS, scale=float(n_units))


def metric_lr2(network, batch) -> float:
    """Log-determinant of the Hamming-similarity kernel of activation patterns."""
    if len(batch) < 2:
        raise ValueError("lr2 needs at least two samples")
    return lr2_from_codes(activation_codes(network, batch))


def jacobian(network, batch) -> np.ndarray:
    """d logits / d params, one row per (sample, class), computed in float64."""
    net = network if network.dtype == FLOAT64 else network.astype(FLOAT64)
    g = Graph(FLOAT64)
    logits = net.forward(g, g.input(np.asarray(batch, dtype=FLOAT64)))
    n, c = logits.data.shape
    params = net.parameters()
    rows = np.empty((n * c, sum(p.size for p in params)))
    upstream = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            upstream[i, j] = 1.0
            backward(g, logits, upstream)
            upstream[i, j] = 0.0
            rows[i * c + j] = np.concatenate([p.grad.ravel() for p in params])
    if not np.all(np.isfinite(rows)):
        raise NumericError("ntk: non-finite Jacobian")
    return rows


def ntk_matrix(network, batch) -> np.ndarray:
    j = jacobian(network, batch)
    return j @ j.T


def condition_number(theta: np.ndarray, rel_eps: float = NTK_EPS) -> float:
    """lambda_max / lambda_min of a PSD matrix; ``inf`` when lambda_min <= rel_eps * lambda_max."""
    lam = np.linalg.eigvalsh(theta)
    hi, lo = float(lam.max()), float(lam.min())
    if hi <= 0 or lo <= rel_eps * hi:
        return math.inf
    return hi / lo


def metric_ntk(network, batch) -> float:
    """Negated NTK condition number (``DEGENERATE`` if the kernel is numerically singular)."""
    cond = condition_number(ntk_matrix(network, batch))
    return DEGENERATE if math.isinf(cond) else -cond


@dataclass
class MetricVector:
    genotype: str
    param_count: int
    lr1: float = math.nan
    lr2: float = math.nan
    ntk_score: float = math.nan
    angle_score: float = math.nan
    theta_feat: float = math.nan
    loss_score: float = math.nan
    lr2_degenerate: bool = False
    ntk_degenerate: bool = False
    diverged: bool = False
    seeds: dict = field(default_factory=dict)

    @property
    def theta_pred(self) -> float:
        return -self.angle_score

    def score(self, metric: str) -> float:
        """Oriented score for one metric name in ``METRICS``."""
        return float({
            "param": self.param_count,
            "lr1": self.lr1,
            "lr2": self.lr2,
            "ntk": self.ntk_score,
            "angle": self.angle_score,
            "angle_feat": self.theta_feat,
            "loss": self.loss_score,
        }[metric])

    CSV_FIELDS = ("genotype", "param_count", "lr1", "lr2", "ntk_score", "theta_pred", "theta_feat",
                  "loss_score", "lr2_degenerate", "ntk_degenerate", "diverged",
                  "network_seed", "proxy_seed", "batch_seed")

    def to_row(self) -> dict:
        def num(v):
            return repr(float(v))
        return {
            "genotype": self.genotype, "param_count": str(self.param_count),
            "lr1": num(self.lr1), "lr2": num(self.lr2), "ntk_score": num(self.ntk_score),
            "theta_pred": num(self.theta_pred), "theta_feat": num(self.theta_feat),
            "loss_score": num(self.loss_score),
            "lr2_degenerate": str(int(self.lr2_degenerate)), "ntk_degenerate": str(int(self.ntk_degenerate)),
            "diverged": str(int(self.diverged)),
            "network_seed": str(self.seeds.get("network", "")), "proxy_seed": str(self.seeds.get("proxy", "")),
            "batch_seed": str(self.seeds.get("batch", "")),
        }

    @classmethod
    def from_row(cls, row: dict) -> "MetricVector":
        seeds = {k: int(row[f"{k}_seed"]) for k in ("network", "proxy", "batch") if row.get(f"{k}_seed")}
        return cls(
            genotype=row["genotype"], param_count=int(row["param_count"]), lr1=float(row["lr1"]),
            lr2=float(row["lr2"]), ntk_score=float(row["ntk_score"]), angle_score=-float(row["theta_pred"]),
            theta_feat=float(row["theta_feat"]), loss_score=float(row["loss_score"]),
            lr2_degenerate=row["lr2_degenerate"] == "1", ntk_degenerate=row["ntk_degenerate"] == "1",
            diverged=row.get("diverged") == "1", seeds=seeds,
        )


def write_metric_csv(path, vectors):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricVector.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for v in vectors:
            w.writerow(v.to_row())


def read_metric_csv(path) -> list[MetricVector]:
    with open(path, newline="") as fh:
        return [MetricVector.from_row(r) for r in csv.DictReader(fh)]


@dataclass(frozen=True)
class ScoreConfig:
    metrics: tuple[str, ...] = METRICS
    train: TrainConfig = TrainConfig()
    proxy_classes: int = 10
    proxy_per_class: int = 10
    metric_batch: int = 64
    ntk_batch: int = 8
    ntk_repeats: int = 1

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        if not self.metrics:
            raise ValueError("metric set is empty")
        object.__setattr__(self, "metrics", tuple(self.metrics))

    def with_train(self, **kw) -> "ScoreConfig":
        return replace(self, train=replace(self.train, **kw))


def draw_batch(dataset: LabeledDataset, size: int, seed: int) -> np.ndarray:
    rng = rng_for(seed, "metric_batch", size)
    idx = rng.choice(len(dataset), size=min(size, len(dataset)), replace=False)
    return dataset.images[np.sort(idx)]


def score_instance(network: CellNetwork, label: str, param_count: int, dataset: LabeledDataset,
                   proxy: ProxyDataset | None, cfg: ScoreConfig, seeds: dict) -> MetricVector:
    """Fill a MetricVector for an already-built, untrained network (trains it if needed)."""
    mv = MetricVector(label, int(param_count), seeds=dict(seeds))
    wanted = set(cfg.metrics)
    if wanted & {"lr1", "lr2"}:
        codes = activation_codes(network, draw_batch(dataset, cfg.metric_batch, seeds["batch"]))
        if "lr1" in wanted:
            mv.lr1 = float(count_distinct(codes))
        if "lr2" in wanted:
            mv.lr2 = lr2_from_codes(codes)
            mv.lr2_degenerate = math.isinf(mv.lr2)
    if "ntk" in wanted:
        batch = draw_batch(dataset, cfg.ntk_batch, derive_seed(seeds["batch"], "ntk"))
        values = []
        for r in range(cfg.ntk_repeats):
            net = network if r == 0 else CellNetwork(
                network.macro, network.state, derive_seed(seeds["network"], "ntk_repeat", r),
                network.init_scheme, network.dtype)
            values.append(metric_ntk(net, batch))
        finite = [v for v in values if not math.isinf(v)]
        mv.ntk_score = float(np.mean(finite)) if finite else DEGENERATE
        mv.ntk_degenerate = not finite
    if wanted & TRAINING_METRICS:
        if proxy is None:
            raise ValueError("training-based metrics need a proxy dataset")
        try:
            snap = short_train(network, proxy, cfg.train)
        except DivergedError as exc:
            log.warning("%s: %s", label, exc)
            mv.diverged = True
            mv.angle_score = mv.theta_feat = mv.loss_score = DEGENERATE
            return mv
        if "angle" in wanted:
            mv.angle_score = metric_angle_pred(snap)
        if "angle_feat" in wanted:
            mv.theta_feat = metric_angle_feat(snap)
        if "loss" in wanted:
            mv.loss_score = metric_loss(snap)
    return mv


def score_network(genotype: CellGenotype, macro: MacroConfig, dataset: LabeledDataset,
                  cfg: ScoreConfig = ScoreConfig(), seed: int = 0,
                  proxy: ProxyDataset | None = None) -> MetricVector:
    """Build ``genotype``, score it training-free at init, then short-train for the angle/loss metrics.

    Seeds for the network init, proxy draw and metric batch derive from ``seed``
    unless a shared ``proxy`` is passed in.
    """
    seeds = {"network": derive_seed(seed, "network"), "batch": derive_seed(seed, "batch")}
    if proxy is None and set(cfg.metrics) & TRAINING_METRICS:
        seeds["proxy"] = derive_seed(seed, "proxy")
        proxy = sample_proxy(dataset, cfg.proxy_classes, cfg.proxy_per_class, seeds["proxy"])
    elif proxy is not None:
        seeds["proxy"] = proxy.seed
    if set(cfg.metrics) <= {"param"}:
        return MetricVector(str(genotype), count_params(genotype, macro), seeds=seeds)
    try:
        net = build_network(genotype, macro, seeds["network"], cfg.train.init_scheme)
        return score_instance(net, str(genotype), count_params(genotype, macro), dataset, proxy, cfg, seeds)
    except NumericError as exc:
        raise type(exc)(f"genotype {genotype}: {exc}") from exc
