"""Time-function ablation through the CLI: generate data, then ``tpconv ablate``.

    python scripts/ablation.py --task cls --out results/ablation_cls
    python scripts/ablation.py --task interp --out results/ablation_interp --seeds 3
"""

import argparse
import json
from pathlib import Path

from tpconv.cli import DEFAULT_ABLATION, cmd_ablate, cmd_generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=["interp", "cls", "step-cls"], default="cls")
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--functions", nargs="+", default=DEFAULT_ABLATION)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--config", default=None)
    ap.add_argument("--observed-fraction", type=float, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = cmd_generate(args.config, out / f"{args.task}.ndjson", seed=0, kind=args.task)
    summary = cmd_ablate(data, args.config, args.functions, out / "ablation.csv", task=args.task,
                         n_seeds=args.seeds, observed_fraction=args.observed_fraction)
    for label, s in summary.items():
        print(f"{label:>18}  {s['metric']} {s['report']}")
    print(json.dumps({"csv": str(out / "ablation.csv")}))


if __name__ == "__main__":
    main()
