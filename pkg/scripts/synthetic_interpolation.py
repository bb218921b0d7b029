"""Compare time functions on synthetic interpolation over several seeds.

Trains one interpolation model per (function set, seed) on the RBF synthetic
set and prints test MSE per seed plus mean ± std per function set.

    python scripts/synthetic_interpolation.py --functions sin lin --seeds 5
    python scripts/synthetic_interpolation.py --sigma identity --theta3-init 5 15
"""

import argparse
import json
import time

from threadpoolctl import threadpool_limits

from tpconv.cli import mean_std_report
from tpconv.data import SyntheticConfig, generate_synthetic, split
from tpconv.models import ModelConfig, TpcnnModel
from tpconv.numerics import Rng
from tpconv.train import TrainConfig, evaluate_mse, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--functions", nargs="+", default=["sin", "lin"], help='function sets, e.g. "sin+cos"')
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--max-epochs", type=int, default=100)
    ap.add_argument("--sigma", default="sigmoid")
    ap.add_argument("--theta3-init", nargs=2, type=float, default=[0.5, 1.5])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    records = generate_synthetic(SyntheticConfig(), Rng(args.data_seed))
    train, val, test = split(records, [0.64, 0.16, 0.20], Rng(args.data_seed))
    results = {}
    with threadpool_limits(1):
        for fset in args.functions:
            mses = []
            for seed in range(args.seeds):
                t0 = time.perf_counter()
                cfg = ModelConfig(functions=fset, sigma=args.sigma, theta3_init=args.theta3_init)
                best, hist = train_loop("interp", TpcnnModel.init(cfg, Rng(seed)), (train, val),
                                        TrainConfig(seed=seed, max_epochs=args.max_epochs))
                mses.append(evaluate_mse(best, test))
                print(f"{fset:>16} seed {seed}  test mse {mses[-1]:.5f}  epochs {len(hist):3d}  "
                      f"{time.perf_counter() - t0:5.1f}s", flush=True)
            results[fset] = {"per_seed": mses, **mean_std_report(mses)}
    print()
    for fset, r in results.items():
        print(f"{fset:>16}  {r['report']}")
    if len(args.functions) == 2:
        a, b = args.functions
        wins = sum(x < y for x, y in zip(results[a]["per_seed"], results[b]["per_seed"]))
        print(f"{a} lower than {b} in {wins}/{args.seeds} seeds")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
