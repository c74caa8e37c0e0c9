"""Sweep the short-training knobs (iterations, proxy classes, proxy images, init).

Each sweep writes its own directory under --out with a sweep.csv and manifest.

    python scripts/ablation_sweeps.py --out runs/ablation --n 10 --repeats 2
"""
import argparse
import sys

from stnas.cli import main as stnas

DEFAULT_VALUES = {
    "iterations": ["10", "25", "50", "100"],
    "classes": ["2", "5", "10"],
    "images": ["1", "5", "10"],
    "init": ["kaiming_uniform", "kaiming_normal", "xavier_uniform"],
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--sweeps", nargs="+", default=sorted(DEFAULT_VALUES), choices=sorted(DEFAULT_VALUES))
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--metrics", default="angle,loss,param")
    p.add_argument("--oracle-epochs", type=int, default=None)
    p.add_argument("--stem-channels", type=int, default=8)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    for name in args.sweeps:
        argv = ["sweep", "--param", name, "--values", *DEFAULT_VALUES[name], "--n", str(args.n),
                "--repeats", str(args.repeats), "--metrics", args.metrics, "--seed", str(args.seed),
                "--stem-channels", str(args.stem_channels), "--resolution", str(args.resolution),
                "--out", f"{args.out}/{name}"]
        if args.oracle_epochs:
            argv += ["--oracle-epochs", str(args.oracle_epochs)]
        code = stnas(argv)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
