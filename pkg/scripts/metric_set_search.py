"""Random search comparing AngleLoss, AngleLoss+#Param and #Param at desk scale.

Every metric set ranks the same scored candidates; selections are oracle-trained
on the synthetic data so each set gets a mean and std accuracy.

    python scripts/metric_set_search.py --out runs/metric_sets
"""
import argparse
import sys

from stnas.cli import main as stnas
from stnas.search import read_search_summary


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/metric_sets")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--oracle-epochs", type=int, default=2)
    p.add_argument("--stem-channels", type=int, default=8)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    code = stnas(["random-search", "--n", str(args.n), "--repeats", str(args.repeats),
                  "--metrics", "angle,loss", "--metrics", "angle,loss,param", "--metrics", "param",
                  "--oracle-epochs", str(args.oracle_epochs), "--stem-channels", str(args.stem_channels),
                  "--resolution", str(args.resolution), "--seed", str(args.seed), "--jobs", str(args.jobs),
                  "--out", args.out])
    if code:
        sys.exit(code)
    print(f"{'metric set':<20}{'accuracy':>18}")
    for row in read_search_summary(f"{args.out}/random_search.csv"):
        print(f"{'+'.join(row['metrics']):<20}{row['mean_acc']:>10.2f} ({row['std_acc']:.2f})")


if __name__ == "__main__":
    main()
