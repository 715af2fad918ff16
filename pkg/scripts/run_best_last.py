#!/usr/bin/env python3
"""Fuse a best checkpoint with its own continued training, over seeds.

Trains one head with best-epoch selection, keeps training a copy for
extra epochs, and mounts the pair as main/second heads of a merged
model.  Also cross-attacks the best and continued checkpoints to
measure self-attack versus transfer accuracy.  Results print as JSON;
pass --out to also write them to a file.
"""

import argparse
import dataclasses
import json
import sys

from dhat.experiments import (BestLastPlan, DeskScale, best_last_run,
                              run_seeds, summarize_best_last)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--inv-lambda", type=float, default=3.0)
    p.add_argument("--main-epochs", type=int, default=None)
    p.add_argument("--decay-epoch", type=int, default=None)
    p.add_argument("--extra-epochs", type=int, default=None)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--out", default=None, help="write the JSON summary here")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    desk = DeskScale()
    if args.train_per_class is not None:
        desk = dataclasses.replace(desk, train_per_class=args.train_per_class)
    plan = BestLastPlan(inv_lambda=args.inv_lambda)
    if args.main_epochs is not None:
        plan = dataclasses.replace(plan, main_epochs=args.main_epochs)
    if args.decay_epoch is not None:
        plan = dataclasses.replace(plan, decay_epoch=args.decay_epoch)
    if args.extra_epochs is not None:
        plan = dataclasses.replace(plan, extra_epochs=args.extra_epochs)

    results = run_seeds(best_last_run, desk, plan, seeds=args.seeds)
    payload = {
        "desk": dataclasses.asdict(desk),
        "plan": dataclasses.asdict(plan),
        "seeds": args.seeds,
        "per_seed": [{k: v for k, v in r.items() if k != "net"}
                     for r in results],
        "median": summarize_best_last(results),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
