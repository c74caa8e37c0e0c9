"""Rank correlation, same-#Param grouping, and the desk-scale ground-truth oracle."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ops
from .data import LabeledDataset
from .errors import DataFormatError, NumericError
from .optim import SGD
from .seeding import derive_seed, rng_for
from .space import CellGenotype, MacroConfig, build_network, count_params
from .tensor import Graph, backward

log = logging.getLogger(__name__)


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(sum(int(t) * (int(t) - 1) // 2 for t in counts))


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Kendall's tau-b; ``None`` when either vector is constant.

    tau_b = (C - D) / sqrt((n0 - n1) * (n0 - n2)) with n0 = n(n-1)/2 and n1, n2
    the numbers of pairs tied in x and in y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("kendall_tau needs two 1-d vectors of equal length")
    n = x.size
    if n < 2:
        raise ValueError("kendall_tau needs at least two observations")
    concordant = discordant = 0
    for i in range(n - 1):
        s = np.sign(x[i + 1:] - x[i]) * np.sign(y[i + 1:] - y[i])
        concordant += int(np.count_nonzero(s > 0))
        discordant += int(np.count_nonzero(s < 0))
    n0 = n * (n - 1) // 2
    denom = (n0 - _tie_pairs(x)) * (n0 - _tie_pairs(y))
    if denom == 0:
        return None
    return (concordant - discordant) / math.sqrt(denom)


def group_by_param(space: Iterable[CellGenotype], macro: MacroConfig) -> list[tuple[int, list[CellGenotype]]]:
    """Same-#Param groups sorted by parameter count; members keep their input order."""
    groups: dict[int, list[CellGenotype]] = defaultdict(list)
    for g in space:
        groups[count_params(g, macro)].append(g)
    return sorted(groups.items())


@dataclass
class GroundTruthTable:
    accuracy: dict[str, float]
    provenance: str = "imported"
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.accuracy.items():
            if not 0.0 <= v <= 100.0:
                raise DataFormatError(f"accuracy for {k} is {v}, outside [0, 100]")

    def get(self, genotype, default=None):
        return self.accuracy.get(str(genotype), default)

    def __len__(self):
        return len(self.accuracy)


def load_ground_truth(path) -> GroundTruthTable:
    """Read a ``genotype,accuracy`` CSV (canonical genotype text, accuracy in percent)."""
    acc = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"genotype", "accuracy"} <= set(reader.fieldnames):
            raise DataFormatError(f"{path}: expected a header with 'genotype' and 'accuracy'")
        for line, row in enumerate(reader, start=2):
            try:
                g = CellGenotype.parse(row["genotype"])
                acc[str(g)] = float(row["accuracy"])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line}: {exc}") from exc
    return GroundTruthTable(acc, provenance=f"imported:{path}")


def save_ground_truth(path, table: GroundTruthTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["genotype", "accuracy"])
        for g in sorted(table.accuracy):
            w.writerow([g, repr(float(table.accuracy[g]))])


@dataclass
class OracleResult:
    accuracy: float
    diverged: bool = False


def holdout_split(dataset: LabeledDataset, fraction: float, seed: int):
    """Stratified train/held-out index split."""
    rng = rng_for(seed, "holdout")
    train, test = [], []
    for c in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = int(round(len(idx) * fraction))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected and flagged explicitly
def oracle_train(genotype: CellGenotype, dataset: LabeledDataset, epochs: int = 2, seed: int = 0,
                 macro: MacroConfig = MacroConfig(), batch_size: int = 64, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4, holdout: float = 0.2) -> OracleResult:
    """Mini-batch SGD with cosine learning-rate decay; returns held-out top-1 accuracy in percent.

    Held-out evaluation uses batch statistics like the rest of this package.
    """
    train_idx, test_idx = holdout_split(dataset, holdout, seed)
    net = build_network(genotype, macro, derive_seed(seed, "oracle_net", str(genotype)))
    opt = SGD(net.parameters(), lr, momentum, weight_decay, nesterov=True)
    rng = rng_for(seed, "oracle_batches", str(genotype))
    steps_per_epoch = max(1, math.ceil(len(train_idx) / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    try:
        for _ in range(epochs):
            order = rng.permutation(train_idx)
            for b in range(steps_per_epoch):
                idx = order[b * batch_size:(b + 1) * batch_size]
                if len(idx) < 2:
                    continue
                opt.lr = 0.5 * lr * (1 + math.cos(math.pi * step / total))
                g = Graph(net.dtype)
                loss = ops.softmax_cross_entropy(net.forward(g, g.input(dataset.images[idx])), dataset.labels[idx])
                if not math.isfinite(float(loss.data)):
                    raise NumericError("non-finite loss")
                backward(g, loss)
                opt.step()
                step += 1
    except NumericError as exc:
        log.warning("oracle training of %s diverged: %s", genotype, exc)
        return OracleResult(0.0, diverged=True)
    correct = 0
    for b in range(0, len(test_idx), 256):
        idx = test_idx[b:b + 256]
        g = Graph(net.dtype)
        logits = net.forward(g, g.input(dataset.images[idx])).data
        if not np.all(np.isfinite(logits)):
            return OracleResult(0.0, diverged=True)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == dataset.labels[idx]))
    return OracleResult(100.0 * correct / len(test_idx))


@dataclass
class CorrelationReport:
    names: list[str]
    tau: dict[tuple[str, str], float | None]
    n: int
    ties: dict[str, int]

    def rows(self) -> list[dict]:
        out = []
        for (a, b), t in self.tau.items():
            out.append({"x": a, "y": b, "tau": "" if t is None else repr(float(t)), "n": str(self.n),
                        "ties_x": str(self.ties[a]), "ties_y": str(self.ties[b])})
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["x", "y", "tau", "n", "ties_x", "ties_y"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())

    def to_json(self, path):
        payload = {"n": self.n, "names": self.names, "ties": self.ties,
                   "pairs": [{"x": a, "y": b, "tau": t} for (a, b), t in self.tau.items()]}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def format_table(self) -> str:
        width = max(len(n) for n in self.names) + 2
        lines = [" " * width + "".join(f"{n:>{width}}" for n in self.names)]
        for a in self.names:
            cells = []
            for b in self.names:
                t = 1.0 if a == b else self.tau.get((a, b), self.tau.get((b, a)))
                cells.append(f"{'n/a' if t is None else f'{t:.3f}':>{width}}")
            lines.append(f"{a:<{width}}" + "".join(cells))
        return "\n".join(lines)


def read_correlation_csv(path) -> dict[tuple[str, str], float | None]:
    with open(path, newline="") as fh:
        return {(r["x"], r["y"]): (float(r["tau"]) if r["tau"] else None) for r in csv.DictReader(fh)}


def correlation_study(columns: Mapping[str, Sequence[float]], ground_truth: Sequence[float] | None = None,
                      truth_name: str = "accuracy") -> CorrelationReport:
    """Kendall's tau between every pair of named score columns (and the ground truth, if given)."""
    data = {k: np.asarray(v, dtype=np.float64) for k, v in columns.items()}
    if ground_truth is not None:
        data[truth_name] = np.asarray(ground_truth, dtype=np.float64)
    names = list(data)
    lengths = {v.size for v in data.values()}
    if len(lengths) != 1:
        raise ValueError("all columns must have the same length")
    n = lengths.pop()
    order = ([truth_name] if ground_truth is not None else []) + [k for k in names if k != truth_name]
    tau = {}
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            tau[(a, b)] = kendall_tau(data[a], data[b])
    ties = {k: _tie_pairs(v) for k, v in data.items()}
    return CorrelationReport(order, tau, n, ties)
