"""Kendall tau between every metric and oracle accuracy on a random sample.

    python scripts/correlation_study.py --sample 16 --out runs/correlation
"""
import argparse
import sys

from stnas.cli import main as stnas


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/correlation")
    p.add_argument("--sample", type=int, default=16)
    p.add_argument("--oracle-epochs", type=int, default=2)
    p.add_argument("--ground-truth", help="use an accuracy table instead of oracle training")
    p.add_argument("--stem-channels", type=int, default=8)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    truth = ["--ground-truth", args.ground_truth] if args.ground_truth else ["--oracle-epochs",
                                                                            str(args.oracle_epochs)]
    sys.exit(stnas(["correlate", "--sample", str(args.sample), *truth,
                    "--metrics", "param,lr1,lr2,ntk,angle,angle_feat,loss",
                    "--stem-channels", str(args.stem_channels), "--resolution", str(args.resolution),
                    "--seed", str(args.seed), "--out", args.out]))


if __name__ == "__main__":
    main()
