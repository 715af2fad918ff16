#!/usr/bin/env python3
"""Dual-head pipeline with per-head TRADES strengths, over several seeds.

Trains the main head at one robustness weight and the second head at
another, fuses them with the merge CNN, and reports clean/robust test
accuracy for every forward mode.  Results print as JSON; pass --out to
also write them to a file.
"""

import argparse
import dataclasses
import json
import sys

from dhat.experiments import (DeskScale, DifferentLambdaPlan,
                              different_lambda_run, run_seeds,
                              summarize_different_lambda)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--inv-lambda-main", type=float, default=6.0)
    p.add_argument("--inv-lambda-second", type=float, default=3.0)
    p.add_argument("--head-epochs", type=int, nargs=2, default=None,
                   metavar=("MAIN", "SECOND"))
    p.add_argument("--merge-epochs", type=int, default=None)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None,
                   help="save per-stage checkpoints under this directory")
    p.add_argument("--out", default=None, help="write the JSON summary here")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    desk = DeskScale()
    if args.train_per_class is not None:
        desk = dataclasses.replace(desk, train_per_class=args.train_per_class)
    plan = DifferentLambdaPlan(
        inv_lambdas=(args.inv_lambda_main, args.inv_lambda_second))
    if args.head_epochs is not None:
        plan = dataclasses.replace(plan, head_epochs=tuple(args.head_epochs))
    if args.merge_epochs is not None:
        plan = dataclasses.replace(plan, merge_epochs=args.merge_epochs)

    results = run_seeds(different_lambda_run, desk, plan, seeds=args.seeds,
                        checkpoint_dir=args.checkpoint_dir)
    payload = {
        "desk": dataclasses.asdict(desk),
        "plan": dataclasses.asdict(plan),
        "seeds": args.seeds,
        "per_seed": [{"seed": r["seed"], "clean": r["clean"],
                      "robust": r["robust"]} for r in results],
        "median": summarize_different_lambda(results),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
