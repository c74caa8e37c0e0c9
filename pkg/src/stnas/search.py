"""Rank aggregation, random search, and pruning-based supernet search."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import LabeledDataset, sample_proxy
from .errors import ContractError, STNASError
from .metrics import MetricVector, ScoreConfig, score_instance, score_network
from .seeding import derive_seed, rng_for
from .space import (NUM_EDGES, NUM_OPS, OP_NAMES, SPACE_SIZE, CellGenotype, CellNetwork, MacroConfig,
                    SupernetState, count_params_mask, prune_operator)

log = logging.getLogger(__name__)


@dataclass
class RankTable:
    """Per-metric ranks (higher score -> numerically higher rank, ties averaged) and their sum."""

    candidates: list[str]
    metrics: list[str]
    scores: np.ndarray
    ranks: np.ndarray
    aggregate: np.ndarray
    selected: int
    excluded: list[str] = field(default_factory=list)

    @property
    def selected_candidate(self) -> str:
        return self.candidates[self.selected]

    def rows(self) -> list[dict]:
        out = []
        for i, c in enumerate(self.candidates):
            row = {"candidate": c}
            for j, m in enumerate(self.metrics):
                row[f"score_{m}"] = repr(float(self.scores[i, j]))
                row[f"rank_{m}"] = repr(float(self.ranks[i, j]))
            row["aggregate"] = repr(float(self.aggregate[i]))
            row["selected"] = str(int(i == self.selected))
            out.append(row)
        return out


def rank_scores(scores: Sequence[float]) -> np.ndarray:
    """1-based ranks, larger score -> larger rank; ties share the average rank."""
    return rankdata(np.asarray(scores, dtype=np.float64), method="average")


def aggregate_ranks(scores: Mapping[str, Sequence[float]], candidates: Sequence[str] | None = None) -> RankTable:
    """Sum per-metric ranks; the largest sum wins, ties broken by the smallest candidate string.

    Candidates with a NaN score in any metric are dropped before ranking.
    """
    metrics = list(scores)
    if not metrics:
        raise ValueError("no metrics to aggregate")
    mat = np.column_stack([np.asarray(scores[m], dtype=np.float64) for m in metrics])
    n = mat.shape[0]
    names = [str(i) for i in range(n)] if candidates is None else [str(c) for c in candidates]
    if len(names) != n:
        raise ValueError("candidate labels and score vectors differ in length")
    keep = ~np.isnan(mat).any(axis=1)
    excluded = [names[i] for i in np.flatnonzero(~keep)]
    for name in excluded:
        log.warning("candidate %s has a NaN score and is excluded from ranking", name)
    if not keep.any():
        raise ContractError("every candidate has a NaN score")
    names = [names[i] for i in np.flatnonzero(keep)]
    mat = mat[keep]
    ranks = np.column_stack([rank_scores(mat[:, j]) for j in range(mat.shape[1])])
    agg = ranks.sum(axis=1)
    best = np.flatnonzero(agg == agg.max())
    selected = min(best, key=lambda i: names[i])
    return RankTable(names, metrics, mat, ranks, agg, int(selected), excluded)


@dataclass(frozen=True)
class SearchConfig:
    strategy: str = "random"
    n_candidates: int = 100
    metrics: tuple[str, ...] = ("angle", "loss")
    repeats: int = 5
    supernet_iterations: int = 100
    prune_mode: str = "one-per-edge-per-round"
    prune_ops: tuple[int, ...] = tuple(range(NUM_OPS))
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.strategy not in ("random", "prune"):
            raise ValueError("strategy must be 'random' or 'prune'")
        if self.n_candidates < 2:
            raise ValueError("need at least two candidates")
        if not self.metrics:
            raise ValueError("metric set is empty")
        if self.prune_mode not in ("one-per-round", "one-per-edge-per-round"):
            raise ValueError("prune_mode must be 'one-per-round' or 'one-per-edge-per-round'")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RepeatResult:
    repeat: int
    seed: int
    selected: str
    table: RankTable
    vectors: list[MetricVector]
    proxy: dict | None
    seconds: float


@dataclass
class RandomSearchResult:
    config: SearchConfig
    repeats: list[RepeatResult]
    accuracies: list[float | None]
    degenerate_events: list[str]

    @property
    def selections(self) -> list[str]:
        return [r.selected for r in self.repeats]

    def accuracy_summary(self) -> tuple[float, float]:
        acc = [a for a in self.accuracies if a is not None]
        if not acc:
            return math.nan, math.nan
        return float(np.mean(acc)), float(np.std(acc))


def _score_job(args):
    genotype, macro, dataset, score_cfg, seed, proxy = args
    return score_network(genotype, macro, dataset, score_cfg, seed=seed, proxy=proxy)


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def sample_genotypes(space: Sequence[CellGenotype] | None, n: int, rng: np.random.Generator) -> list[CellGenotype]:
    size = SPACE_SIZE if space is None else len(space)
    if size < n:
        raise ValueError(f"space has {size} genotypes but {n} candidates were requested")
    idx = rng.choice(size, size=n, replace=False)
    if space is None:
        return [CellGenotype.from_index(int(i)) for i in idx]
    return [space[int(i)] for i in idx]


def random_search(dataset: LabeledDataset, cfg: SearchConfig, macro: MacroConfig = MacroConfig(),
                  score_cfg: ScoreConfig = ScoreConfig(), space: Sequence[CellGenotype] | None = None,
                  ground_truth: Mapping[str, float] | None = None) -> RandomSearchResult:
    """Sample ``cfg.n_candidates`` genotypes per repeat, score them, and keep the best aggregate rank.

    Repeat ``r`` uses seed ``derive_seed(cfg.seed, "repeat", r)``; candidate ``i``
    of that repeat uses ``derive_seed(repeat_seed, "candidate", i)``. One proxy
    set is drawn per repeat and shared by all of its candidates.
    """
    score_cfg = replace(score_cfg, metrics=tuple(cfg.metrics))
    needs_proxy = bool(set(cfg.metrics) & {"angle", "angle_feat", "loss"})
    repeats, events = [], []
    for r in range(cfg.repeats):
        t0 = time.perf_counter()
        rseed = derive_seed(cfg.seed, "repeat", r)
        cands = sample_genotypes(space, cfg.n_candidates, rng_for(rseed, "sample"))
        proxy = None
        if needs_proxy:
            proxy = sample_proxy(dataset, score_cfg.proxy_classes, score_cfg.proxy_per_class,
                                 derive_seed(rseed, "proxy"))
        args = [(g, macro, dataset, score_cfg, derive_seed(rseed, "candidate", i), proxy)
                for i, g in enumerate(cands)]
        vectors = _map(_score_job, args, cfg.jobs)
        for v in vectors:
            if v.diverged:
                events.append(f"repeat {r}: {v.genotype} diverged during short training")
            if v.lr2_degenerate and "lr2" in cfg.metrics:
                events.append(f"repeat {r}: {v.genotype} lr2 degenerate")
            if v.ntk_degenerate and "ntk" in cfg.metrics:
                events.append(f"repeat {r}: {v.genotype} ntk degenerate")
        usable = [v for v in vectors if not all(math.isinf(v.score(m)) for m in cfg.metrics)]
        if not usable:
            raise STNASError(f"repeat {r}: every candidate is degenerate under {cfg.metrics}")
        table = aggregate_ranks({m: [v.score(m) for v in vectors] for m in cfg.metrics},
                                [v.genotype for v in vectors])
        seconds = time.perf_counter() - t0
        repeats.append(RepeatResult(r, rseed, table.selected_candidate, table, vectors,
                                    proxy.manifest() if proxy else None, seconds))
    acc = [ground_truth.get(r.selected) if ground_truth else None for r in repeats]
    return RandomSearchResult(cfg, repeats, acc, events)


@dataclass
class PruneStep:
    round: int
    edge: int
    op: int
    scores: dict
    aggregate: float
    removed: bool
    diverged: bool = False


@dataclass
class PruneResult:
    genotype: CellGenotype
    rounds: int
    trace: list[PruneStep]
    seconds: float


def _prune_candidate_job(args):
    macro, state, round_seed, dataset, proxy, score_cfg, label = args
    net = CellNetwork(macro, state, round_seed, score_cfg.train.init_scheme)
    seeds = {"network": round_seed, "batch": derive_seed(round_seed, "batch"), "proxy": proxy.seed if proxy else 0}
    return score_instance(net, label, count_params_mask(state, macro), dataset, proxy, score_cfg, seeds)


def prune_search(dataset: LabeledDataset, cfg: SearchConfig, macro: MacroConfig = MacroConfig(),
                 score_cfg: ScoreConfig = ScoreConfig()) -> PruneResult:
    """Prune a supernet down to one operator per edge.

    Each round scores every legal single-operator removal: the supernet minus that
    operator is re-initialised from the round seed, short-trained for
    ``cfg.supernet_iterations`` steps, and scored; ranks are aggregated across all
    removals in the round. ``one-per-round`` removes the single best removal;
    ``one-per-edge-per-round`` removes the best removal on every edge that still
    has more than one operator.
    """
    t0 = time.perf_counter()
    score_cfg = replace(score_cfg, metrics=tuple(cfg.metrics)).with_train(iterations=cfg.supernet_iterations)
    state = SupernetState.full(cfg.prune_ops)
    proxy = None
    if set(cfg.metrics) & {"angle", "angle_feat", "loss"}:
        proxy = sample_proxy(dataset, score_cfg.proxy_classes, score_cfg.proxy_per_class,
                             derive_seed(cfg.seed, "proxy"))
    trace: list[PruneStep] = []
    rnd = 0
    while not state.is_single_path:
        round_seed = derive_seed(cfg.seed, "round", rnd)
        moves = [(e, o) for e in range(NUM_EDGES) if len(state.active(e)) > 1 for o in state.active(e)]
        labels = [f"{e}:{o}" for e, o in moves]
        args = [(macro, prune_operator(state, e, o), round_seed, dataset, proxy, score_cfg, lab)
                for (e, o), lab in zip(moves, labels)]
        vectors = _map(_prune_candidate_job, args, cfg.jobs)
        scores = {}
        for m in cfg.metrics:
            col = []
            for v in vectors:
                s = v.score(m)
                col.append(-math.inf if v.diverged or math.isnan(s) else s)
            scores[m] = col
        table = aggregate_ranks(scores, labels)
        agg = dict(zip(table.candidates, table.aggregate))
        if cfg.prune_mode == "one-per-round":
            chosen = [moves[labels.index(table.selected_candidate)]]
        else:
            chosen = []
            for e in sorted({e for e, _ in moves}):
                on_edge = [(agg[lab], mv) for mv, lab in zip(moves, labels) if mv[0] == e]
                best = max(a for a, _ in on_edge)
                chosen.append(min(mv for a, mv in on_edge if a == best))
        for (e, o), lab, v in zip(moves, labels, vectors):
            if v.diverged:
                log.warning("round %d: removal %s diverged; ranked last", rnd, lab)
            trace.append(PruneStep(rnd, e, o, {m: scores[m][labels.index(lab)] for m in cfg.metrics},
                                   float(agg[lab]), (e, o) in chosen, v.diverged))
        for e, o in chosen:
            state = prune_operator(state, e, o)
        rnd += 1
    return PruneResult(state.to_genotype(), rnd, trace, time.perf_counter() - t0)


def write_prune_trace(path, result: PruneResult, metrics: Sequence[str]):
    fields_ = ["round", "edge", "op", "op_name"] + [f"score_{m}" for m in metrics] + \
              ["aggregate_rank", "removed", "diverged"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields_)
        for s in result.trace:
            w.writerow([s.round, s.edge, s.op, OP_NAMES[s.op]] + [repr(float(s.scores[m])) for m in metrics]
                       + [repr(s.aggregate), int(s.removed), int(s.diverged)])


def read_prune_trace(path) -> list[PruneStep]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        metrics = [f[len("score_"):] for f in reader.fieldnames if f.startswith("score_")]
        return [PruneStep(int(r["round"]), int(r["edge"]), int(r["op"]),
                          {m: float(r[f"score_{m}"]) for m in metrics}, float(r["aggregate_rank"]),
                          r["removed"] == "1", r["diverged"] == "1") for r in reader]


def read_search_summary(path) -> list[dict]:
    """Rows of a random-search, group-study or sweep summary CSV with typed fields."""
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = dict(r)
            row["metrics"] = tuple(r["metrics"].split("+"))
            for k in ("mean_acc", "std_acc"):
                row[k] = float(r[k]) if r[k] else math.nan
            row["selections"] = r["selections"].split(";") if r["selections"] else []
            out.append(row)
    return out
