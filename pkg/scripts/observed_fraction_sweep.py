"""Interpolation MSE on held-out points as the observed fraction varies (0.5 to 0.9).

    python scripts/observed_fraction_sweep.py --functions sin --seeds 5
"""

import argparse

from threadpoolctl import threadpool_limits

from tpconv.cli import mean_std_report
from tpconv.data import SyntheticConfig, generate_synthetic, split
from tpconv.models import ModelConfig, TpcnnModel
from tpconv.numerics import Rng
from tpconv.train import TrainConfig, evaluate_mse, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--functions", default="sin")
    ap.add_argument("--fractions", nargs="+", type=float, default=[0.5, 0.6, 0.7, 0.8, 0.9])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--max-epochs", type=int, default=100)
    args = ap.parse_args()

    records = generate_synthetic(SyntheticConfig(), Rng(0))
    train, val, test = split(records, [0.64, 0.16, 0.20], Rng(0))
    with threadpool_limits(1):
        for frac in args.fractions:
            mses = []
            for seed in range(args.seeds):
                cfg = TrainConfig(seed=seed, max_epochs=args.max_epochs, observed_fraction=frac)
                model = TpcnnModel.init(ModelConfig(functions=args.functions), Rng(seed))
                best, _ = train_loop("interp", model, (train, val), cfg)
                mses.append(evaluate_mse(best, test, observed_fraction=frac, seed=seed))
            print(f"observed {frac:.0%}  held-out mse {mean_std_report(mses)['report']}", flush=True)


if __name__ == "__main__":
    main()
