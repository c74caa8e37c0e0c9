"""Command-line experiments.

Every command writes into ``--out`` (a directory): CSV results plus a
``manifest.json`` with the full configuration, derived seeds, versions and
wall-clock. CSV files contain no timing, so fixed-seed runs are byte-identical.

A ``--config`` file holds flat ``key = value`` lines named after the long
options (dashes or underscores); explicit flags override it.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .data import load_cifar_binary, synth_dataset
from .errors import STNASError
from .metrics import METRICS, MetricVector, ScoreConfig, score_network, write_metric_csv
from .optim import INIT_SCHEMES
from .search import (SearchConfig, aggregate_ranks, prune_search, random_search,
                     sample_genotypes, write_prune_trace)
from .seeding import derive_seed, rng_for
from .space import CellGenotype, MacroConfig, count_params, enumerate_space
from .stats import (GroundTruthTable, correlation_study, group_by_param, load_ground_truth,
                    oracle_train, save_ground_truth)
from .trainer import TrainConfig

log = logging.getLogger("stnas")

def parse_metric_set(text: str) -> tuple[str, ...]:
    """``"angle,loss"``, ``"angle+loss+param"`` or a name like ``AngleLoss+#Param``."""
    t = text.strip()
    named = {"anglelossparam": ("angle", "loss", "param"), "angleloss": ("angle", "loss"),
             "anglelosslr2": ("angle", "loss", "lr2")}
    key = t.lower().replace("+", "").replace("#", "").replace("_", "")
    if key in named:
        return named[key]
    parts = [p.strip().lower() for p in t.replace("+", ",").split(",") if p.strip()]
    parts = ["param" if p in ("#param", "params") else p for p in parts]
    bad = [p for p in parts if p not in METRICS]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"unknown metric(s) {bad or [text]}; choose from {', '.join(METRICS)}")
    return tuple(dict.fromkeys(parts))


def set_label(metrics) -> str:
    return "+".join(metrics)


# -- shared plumbing --------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("run")
    g.add_argument("--config", help="flat key = value file; flags win on conflict")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--out", default="runs/out", help="output directory")
    g.add_argument("--jobs", type=int, default=1, help="parallel candidate evaluations")
    g.add_argument("-v", "--verbose", action="store_true")
    d = p.add_argument_group("dataset")
    d.add_argument("--dataset", default="synth", help="'synth' or 'cifar:PATH[,PATH...]'")
    d.add_argument("--synth-classes", type=int, default=10)
    d.add_argument("--synth-per-class", type=int, default=100)
    d.add_argument("--synth-noise", type=float, default=2.0)
    m = p.add_argument_group("network")
    m.add_argument("--stem-channels", type=int, default=16)
    m.add_argument("--cells-per-stage", type=int, default=1)
    m.add_argument("--resolution", type=int, default=32, help="synthetic image size (CIFAR is always 32)")
    t = p.add_argument_group("short training")
    t.add_argument("--iterations", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.2)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--init", default="kaiming_uniform", choices=INIT_SCHEMES)
    t.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default: full proxy set)")
    t.add_argument("--proxy-classes", type=int, default=10)
    t.add_argument("--proxy-images", type=int, default=10)
    s = p.add_argument_group("training-free metrics")
    s.add_argument("--metric-batch", type=int, default=64)
    s.add_argument("--ntk-batch", type=int, default=8)
    s.add_argument("--ntk-repeats", type=int, default=1)


def _metrics_arg(p, default, multi=True):
    if multi:
        p.add_argument("--metrics", type=parse_metric_set, action="append", default=None,
                       help=f"metric set, repeatable (default {set_label(default)})")
    else:
        p.add_argument("--metrics", type=parse_metric_set, default=default)


def load_dataset(args):
    if args.dataset == "synth":
        return synth_dataset(args.synth_classes, args.synth_per_class, args.resolution,
                             seed=derive_seed(args.seed, "dataset"), noise=args.synth_noise)
    if args.dataset.startswith("cifar:"):
        paths = [p for p in args.dataset[len("cifar:"):].split(",") if p]
        return load_cifar_binary(paths)
    raise STNASError(f"unknown dataset {args.dataset!r}")


def build_macro(args, dataset) -> MacroConfig:
    return MacroConfig(stem_channels=args.stem_channels, cells_per_stage=args.cells_per_stage,
                       num_classes=dataset.class_count, input_resolution=dataset.resolution,
                       input_channels=dataset.channels)


def build_score_config(args, metrics) -> ScoreConfig:
    train = TrainConfig(iterations=args.iterations, lr=args.lr, momentum=args.momentum,
                        weight_decay=args.weight_decay, init_scheme=args.init,
                        seed=derive_seed(args.seed, "train"), batch_size=args.batch_size)
    return ScoreConfig(metrics=tuple(metrics), train=train, proxy_classes=args.proxy_classes,
                       proxy_per_class=args.proxy_images, metric_batch=args.metric_batch,
                       ntk_batch=args.ntk_batch, ntk_repeats=args.ntk_repeats)


class Manifest:
    def __init__(self, args, command):
        self.t0 = time.perf_counter()
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "master_seed": args.seed,
            "derived_seeds": {},
            "versions": {"stnas": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "outputs": [],
            "degenerate_events": [],
        }

    def __setitem__(self, key, value):
        self.data[key] = value

    def output(self, path):
        self.data["outputs"].append(os.fspath(path))
        return path

    def write(self, out_dir, name="manifest.json"):
        self.data["wall_clock_seconds"] = time.perf_counter() - self.t0
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


class GroundTruth:
    """Imported table, or lazily oracle-trained accuracies for the genotypes asked about."""

    def __init__(self, args, dataset, macro):
        self.table = load_ground_truth(args.ground_truth) if getattr(args, "ground_truth", None) else None
        self.epochs = getattr(args, "oracle_epochs", None)
        self.dataset, self.macro, self.seed = dataset, macro, derive_seed(args.seed, "oracle")
        self.trained: dict[str, float] = {}
        self.flags: dict[str, str] = {}

    @property
    def available(self) -> bool:
        return self.table is not None or bool(self.epochs)

    def get(self, genotype: str):
        if self.table is not None:
            return self.table.get(genotype)
        if not self.epochs:
            return None
        if genotype not in self.trained:
            res = oracle_train(CellGenotype.parse(genotype), self.dataset, self.epochs, self.seed, self.macro)
            self.trained[genotype] = res.accuracy
            if res.diverged:
                self.flags[genotype] = "diverged"
        return self.trained[genotype]

    def provenance(self) -> str:
        if self.table is not None:
            return self.table.provenance
        return f"oracle-trained:{self.epochs}-epochs" if self.epochs else "none"


def _gt_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ground-truth", help="CSV with genotype,accuracy")
    g.add_argument("--oracle-epochs", type=int, default=None, help="train selections on the dataset instead")


def _search_sets(args, default):
    return args.metrics or [default]


def _run_search_sets(args, dataset, macro, metric_sets, space=None, gt=None, tag=""):
    """One scoring pass with the union of metrics, then one selection per metric set."""
    union = tuple(dict.fromkeys(m for s in metric_sets for m in s))
    cfg = SearchConfig(n_candidates=args.n, metrics=union, repeats=args.repeats, seed=args.seed, jobs=args.jobs)
    res = random_search(dataset, cfg, macro, build_score_config(args, union), space=space)
    summary = []
    for ms in metric_sets:
        picks, accs = [], []
        for rep in res.repeats:
            table = aggregate_ranks({m: [v.score(m) for v in rep.vectors] for m in ms},
                                    [v.genotype for v in rep.vectors])
            picks.append(table.selected_candidate)
            accs.append(gt.get(table.selected_candidate) if gt is not None and gt.available else None)
        have = [a for a in accs if a is not None]
        mean = float(np.mean(have)) if have else math.nan
        std = float(np.std(have)) if have else math.nan
        summary.append((ms, picks, accs, mean, std))
    return res, summary


# -- commands -----------------------------------------------------------------

def cmd_score(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    genotype = CellGenotype.parse(args.genotype)
    man = Manifest(args, "score")
    os.makedirs(args.out, exist_ok=True)
    cfg = build_score_config(args, args.metrics)
    mv = score_network(genotype, macro, dataset, cfg, seed=args.seed)
    path = man.output(os.path.join(args.out, "score.csv"))
    write_metric_csv(path, [mv])
    man["derived_seeds"] = mv.seeds
    man["dataset"] = dataset.manifest()
    man["macro"] = macro.__dict__
    if mv.lr2_degenerate and "lr2" in args.metrics:
        man.data["degenerate_events"].append("lr2 degenerate")
    if mv.ntk_degenerate and "ntk" in args.metrics:
        man.data["degenerate_events"].append("ntk degenerate")
    if mv.diverged:
        man.data["degenerate_events"].append("short training diverged")
    man.write(args.out)
    print(",".join(MetricVector.CSV_FIELDS))
    print(",".join(mv.to_row()[k] for k in MetricVector.CSV_FIELDS))
    return 0


def _write_repeat_outputs(args, man, res, tag=""):
    for rep in res.repeats:
        path = man.output(os.path.join(args.out, f"{tag}candidates_repeat{rep.repeat}.csv"))
        write_metric_csv(path, rep.vectors)
        sub = {"repeat": rep.repeat, "repeat_seed": rep.seed, "proxy": rep.proxy,
               "candidate_seeds": {v.genotype: v.seeds for v in rep.vectors},
               "wall_clock_seconds": rep.seconds}
        with open(os.path.join(args.out, f"{tag}manifest_repeat{rep.repeat}.json"), "w") as fh:
            json.dump(sub, fh, indent=2, sort_keys=True)
            fh.write("\n")
    man.data["degenerate_events"].extend(res.degenerate_events)


def cmd_random_search(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest(args, "random-search")
    gt = GroundTruth(args, dataset, macro)
    sets = _search_sets(args, ("angle", "loss"))
    res, summary = _run_search_sets(args, dataset, macro, sets, gt=gt)
    rows = [[set_label(ms), args.n, args.repeats, _fmt(mean), _fmt(std), ";".join(picks)]
            for ms, picks, _, mean, std in summary]
    man.output(_write_rows(os.path.join(args.out, "random_search.csv"),
                           ["metrics", "n", "repeats", "mean_acc", "std_acc", "selections"], rows))
    _write_repeat_outputs(args, man, res)
    man["derived_seeds"] = {f"repeat{r.repeat}": r.seed for r in res.repeats}
    man["search_seconds"] = {set_label(ms): sum(r.seconds for r in res.repeats) for ms, *_ in summary}
    man["ground_truth"] = gt.provenance()
    man["dataset"] = dataset.manifest()
    man.write(args.out)
    for r in rows:
        print(f"{r[0]:<24} mean={r[3] or 'n/a'} std={r[4] or 'n/a'} picks={r[5]}")
    return 0


def cmd_prune_search(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest(args, "prune-search")
    ops_ = tuple(int(o) for o in args.ops.split(","))
    cfg = SearchConfig(strategy="prune", metrics=args.metrics, supernet_iterations=args.supernet_iters,
                       prune_mode=args.mode, prune_ops=ops_, seed=args.seed, jobs=args.jobs)
    res = prune_search(dataset, cfg, macro, build_score_config(args, args.metrics))
    write_prune_trace(man.output(os.path.join(args.out, "prune_trace.csv")), res, args.metrics)
    man.output(_write_rows(os.path.join(args.out, "prune_result.csv"),
                           ["genotype", "param_count", "rounds"],
                           [[str(res.genotype), count_params(res.genotype, macro), res.rounds]]))
    man["derived_seeds"] = {f"round{r}": derive_seed(args.seed, "round", r) for r in range(res.rounds)}
    man["search_seconds"] = res.seconds
    man["dataset"] = dataset.manifest()
    man.data["degenerate_events"].extend(
        f"round {s.round}: removal {s.edge}:{s.op} diverged" for s in res.trace if s.diverged)
    man.write(args.out)
    print(f"selected {res.genotype} after {res.rounds} rounds")
    return 0


def cmd_correlate(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest(args, "correlate")
    metrics = args.metrics
    genotypes = sample_genotypes(None, args.sample, rng_for(args.seed, "correlate", "sample"))
    cfg = build_score_config(args, metrics)
    vectors = [score_network(g, macro, dataset, cfg, seed=derive_seed(args.seed, "correlate", i))
               for i, g in enumerate(genotypes)]
    write_metric_csv(man.output(os.path.join(args.out, "metrics.csv")), vectors)
    gt = GroundTruth(args, dataset, macro)
    truth = None
    if gt.available:
        truth = [gt.get(str(g)) for g in genotypes]
        if any(t is None for t in truth):
            missing = [str(g) for g, t in zip(genotypes, truth) if t is None]
            raise STNASError(f"ground truth missing for {len(missing)} genotypes, e.g. {missing[0]}")
        if gt.table is None:
            table = GroundTruthTable(dict(gt.trained), provenance=gt.provenance(), flags=gt.flags)
            man.output(os.path.join(args.out, "ground_truth.csv"))
            save_ground_truth(os.path.join(args.out, "ground_truth.csv"), table)
    columns = {m: [v.score(m) for v in vectors] for m in metrics}
    report = correlation_study(columns, truth)
    report.to_csv(man.output(os.path.join(args.out, "correlation.csv")))
    report.to_json(man.output(os.path.join(args.out, "correlation.json")))
    man["ground_truth"] = gt.provenance()
    man["derived_seeds"] = {v.genotype: v.seeds for v in vectors}
    man["dataset"] = dataset.manifest()
    man.write(args.out)
    print(report.format_table())
    return 0


def cmd_group_study(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest(args, "group-study")
    groups = [grp for grp in group_by_param(enumerate_space(), macro) if len(grp[1]) >= args.n_per_group]
    groups = sorted(sorted(groups, key=lambda kv: (-len(kv[1]), kv[0]))[:args.groups])
    gt = GroundTruth(args, dataset, macro)
    sets = _search_sets(args, ("angle", "loss"))
    rows = []
    for count, members in groups:
        sub = replace_n(args, args.n_per_group)
        res, summary = _run_search_sets(sub, dataset, macro, sets, space=members, gt=gt)
        _write_repeat_outputs(sub, man, res, tag=f"group{count}_")
        for ms, picks, _, mean, std in summary:
            rows.append([count, len(members), set_label(ms), _fmt(mean), _fmt(std), ";".join(picks)])
    man.output(_write_rows(os.path.join(args.out, "group_study.csv"),
                           ["param_count", "group_size", "metrics", "mean_acc", "std_acc", "selections"], rows))
    man["ground_truth"] = gt.provenance()
    man["groups"] = {str(c): len(m) for c, m in groups}
    man["dataset"] = dataset.manifest()
    man.write(args.out)
    for r in rows:
        print(f"#Param={r[0]:<8} {r[2]:<20} mean={r[3] or 'n/a'} std={r[4] or 'n/a'}")
    return 0


def replace_n(args, n):
    ns = argparse.Namespace(**vars(args))
    ns.n = n
    return ns


SWEEPS = {
    "iterations": ("iterations", int),
    "classes": ("proxy_classes", int),
    "images": ("proxy_images", int),
    "init": ("init", str),
}


def cmd_sweep(args):
    dataset = load_dataset(args)
    macro = build_macro(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest(args, "sweep")
    attr, conv = SWEEPS[args.param]
    gt = GroundTruth(args, dataset, macro)
    sets = _search_sets(args, ("angle", "loss"))
    rows, seconds = [], {}
    for raw in args.values:
        value = conv(raw)
        if attr == "init" and value not in INIT_SCHEMES:
            raise STNASError(f"unknown init {value!r}")
        sub = argparse.Namespace(**vars(args))
        setattr(sub, attr, value)
        res, summary = _run_search_sets(sub, dataset, macro, sets, gt=gt)
        seconds[str(value)] = sum(r.seconds for r in res.repeats)
        man.data["degenerate_events"].extend(res.degenerate_events)
        for ms, picks, _, mean, std in summary:
            rows.append([args.param, value, set_label(ms), _fmt(mean), _fmt(std), ";".join(picks)])
    man.output(_write_rows(os.path.join(args.out, "sweep.csv"),
                           ["param", "value", "metrics", "mean_acc", "std_acc", "selections"], rows))
    man["search_seconds"] = seconds
    man["ground_truth"] = gt.provenance()
    man["dataset"] = dataset.manifest()
    man.write(args.out)
    for r in rows:
        print(f"{r[0]}={r[1]:<16} {r[2]:<20} mean={r[3] or 'n/a'} std={r[4] or 'n/a'}")
    return 0


def cmd_enumerate(args):
    macro = MacroConfig(stem_channels=args.stem_channels, cells_per_stage=args.cells_per_stage,
                        num_classes=args.num_classes, input_resolution=args.resolution)
    os.makedirs(args.out, exist_ok=True)
    rows = ([str(g), count_params(g, macro)] for g in enumerate_space())
    path = _write_rows(os.path.join(args.out, "space.csv"), ["genotype", "param_count"], rows)
    print(path)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stnas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score one genotype")
    _common(p)
    p.add_argument("--genotype", required=True, help='canonical text, e.g. "3|2|4|1|0|3"')
    _metrics_arg(p, METRICS, multi=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("random-search", help="random search with rank-aggregated metrics")
    _common(p)
    p.add_argument("--n", type=int, default=100, help="candidates per repeat")
    p.add_argument("--repeats", type=int, default=5)
    _metrics_arg(p, ("angle", "loss"))
    _gt_args(p)
    p.set_defaults(func=cmd_random_search)

    p = sub.add_parser("prune-search", help="prune a supernet to one operator per edge")
    _common(p)
    _metrics_arg(p, ("angle", "loss"), multi=False)
    p.add_argument("--supernet-iters", type=int, default=100)
    p.add_argument("--mode", default="one-per-edge-per-round", choices=("one-per-round", "one-per-edge-per-round"))
    p.add_argument("--ops", default="0,1,2,3,4", help="operator ids present in the initial supernet")
    p.set_defaults(func=cmd_prune_search)

    p = sub.add_parser("correlate", help="Kendall's tau between metrics and ground truth")
    _common(p)
    p.add_argument("--sample", type=int, default=50, help="number of random genotypes")
    _metrics_arg(p, ("param", "lr1", "lr2", "ntk", "angle", "angle_feat", "loss"), multi=False)
    _gt_args(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("group-study", help="random search inside same-#Param groups")
    _common(p)
    p.add_argument("--groups", type=int, default=8, help="number of (largest) same-#Param groups")
    p.add_argument("--n-per-group", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    _metrics_arg(p, ("angle", "loss"))
    _gt_args(p)
    p.set_defaults(func=cmd_group_study)

    p = sub.add_parser("sweep", help="short-training ablation sweeps")
    _common(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEPS))
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    _metrics_arg(p, ("angle", "loss"))
    _gt_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("enumerate", help="export the space with #Param to CSV")
    p.add_argument("--out", default="runs/space")
    p.add_argument("--stem-channels", type=int, default=16)
    p.add_argument("--cells-per-stage", type=int, default=1)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--resolution", type=int, default=32)
    p.set_defaults(func=cmd_enumerate)
    return parser


def _config_defaults(path, subparser) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        cp.read_string("[run]\n" + fh.read())
    known = {a.dest: a for a in subparser._actions}
    out = {}
    for key, raw in cp["run"].items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise STNASError(f"{path}: unknown config key {key!r}")
        action = known[dest]
        if action.type is not None:
            value = action.type(raw)
            out[dest] = [value] if isinstance(action, argparse._AppendAction) else value
        elif action.nargs == "+":
            out[dest] = raw.split()
        else:
            out[dest] = raw
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and argv and argv[0] in subparsers:
        sub = subparsers[argv[0]]
        try:
            defaults = _config_defaults(known.config, sub)
        except (OSError, STNASError, argparse.ArgumentTypeError, ValueError) as exc:
            print(f"stnas: error: {exc}", file=sys.stderr)
            return 2
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if known.config and isinstance(getattr(args, "metrics", None), list) and "--metrics" in argv:
        # argparse appends flag values to the config's list; flags should replace it instead
        from_config = sub.get_default("metrics") or []
        args.metrics = args.metrics[len(from_config):]
    logging.basicConfig(level=logging.INFO if args.__dict__.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "enumerate" and isinstance(args.metrics, list) and not args.metrics:
        args.metrics = None
    try:
        return args.func(args)
    except STNASError as exc:
        print(f"stnas: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"stnas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
