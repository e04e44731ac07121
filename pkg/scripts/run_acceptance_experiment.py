#!/usr/bin/env python3
"""Run the composability experiment end to end and print the gate summary.

Single seed by default; pass --seeds 3 for the cross-seed regime comparison.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from latentstack.experiments import (  # noqa: E402
    ExperimentConfig,
    acceptance_experiment_config,
    run_composability_experiment,
    run_regime_comparison,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output root directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--seeds", type=int, default=1,
                        help="number of consecutive seeds to run")
    parser.add_argument("--pair-steps", type=int, default=None)
    parser.add_argument("--images-per-domain", type=int, default=None)
    parser.add_argument("--eval-images", type=int, default=None)
    args = parser.parse_args()

    overrides = {"seed": args.seed}
    if args.pair_steps is not None:
        overrides["pair_steps"] = args.pair_steps
    if args.images_per_domain is not None:
        overrides["images_per_domain"] = args.images_per_domain
    if args.eval_images is not None:
        overrides["eval_images"] = args.eval_images
    cfg = acceptance_experiment_config(**overrides)

    started = time.time()
    if args.seeds > 1:
        summary = run_regime_comparison(cfg, args.out, num_seeds=args.seeds)
        print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))
        for run in summary["runs"]:
            print(f"seed {run['seed']}: rates={run['rates']} gates={run['gates']}")
        ok = summary["majority_direction"]
    else:
        result = run_composability_experiment(cfg, args.out)
        print(json.dumps({"rates": result["rates"], "cycles": result["cycles"],
                          "gates": result["gates"]}, indent=2))
        ok = all(result["gates"].values())
    print(f"elapsed: {time.time() - started:.0f}s")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
