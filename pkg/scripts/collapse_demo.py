"""Score trivial and rich genotypes side by side to show the angle collapse.

Trivial cells (all zeroize, all skip) barely move their classifier during short
training, so a pure angle score ranks them near the top. Adding #Param pushes
them back down.

    python scripts/collapse_demo.py --stem-channels 8 --resolution 16
"""
import argparse

from stnas.data import synth_dataset
from stnas.metrics import ScoreConfig, score_network
from stnas.search import aggregate_ranks
from stnas.space import CellGenotype, MacroConfig
from stnas.trainer import TrainConfig

GENOTYPES = ["0|0|0|0|0|0", "1|1|1|1|1|1", "1|0|1|0|0|1", "3|2|4|1|0|3", "3|3|3|3|3|3", "2|2|2|2|2|2"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--stem-channels", type=int, default=16)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    data = synth_dataset(10, 100, args.resolution, seed=args.seed)
    macro = MacroConfig(stem_channels=args.stem_channels, input_resolution=args.resolution)
    cfg = ScoreConfig(metrics=("angle", "loss", "param"), train=TrainConfig(iterations=args.iterations))
    vectors = [score_network(CellGenotype.parse(t), macro, data, cfg, seed=args.seed) for t in GENOTYPES]

    print(f"{'genotype':<14}{'theta_pred':>12}{'loss':>10}{'#Param':>10}")
    for v in vectors:
        print(f"{v.genotype:<14}{v.theta_pred:>12.4f}{-v.loss_score:>10.4f}{v.param_count:>10}")
    for metrics in (("angle",), ("angle", "loss"), ("angle", "loss", "param")):
        table = aggregate_ranks({m: [v.score(m) for v in vectors] for m in metrics}, GENOTYPES)
        print(f"{'+'.join(metrics):<18} selects {table.selected_candidate}")


if __name__ == "__main__":
    main()
