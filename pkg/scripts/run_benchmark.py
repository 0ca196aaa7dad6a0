"""Desk-scale comparison of FedAvg, FedProx, FedProto and FedMLP with its loss ablations.

Prints seed-mean final A_glo, minority A_glo and mean forgetting delta per variant, and
optionally writes them to a JSON file.

    python scripts/run_benchmark.py --seeds 1,2,3,4,5 --out bench.json
"""
import argparse
import json
import time

import numpy as np

from fedmlp.config import ExperimentConfig
from fedmlp.federation import run_experiment

BASE = ExperimentConfig(num_classes=10, d_in=16, num_clients=20, tasks=3, partition="sharding", s=2,
                        gamma=0.5, epochs=15)

VARIANTS = {
    "fedavg": dict(strategy="fedavg"),
    "fedprox": dict(strategy="fedprox"),
    "fedproto": dict(strategy="fedproto"),
    "fedmlp": dict(strategy="fedmlp"),
    "fedmlp-noP": dict(strategy="fedmlp", loss_prototype=False),
    "fedmlp-noI": dict(strategy="fedmlp", loss_intertask=False),
    "fedmlp-noS": dict(strategy="fedmlp", loss_semantic=False),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                    help="override a base field for every variant, e.g. --set alpha=0.1")
    ap.add_argument("--out")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    base = BASE
    for item in args.set:
        key, value = item.split("=", 1)
        base = base.with_overrides(**{key: type(getattr(BASE, key))(value)})

    table = {}
    for name in args.variants.split(","):
        t0 = time.perf_counter()
        rows = []
        for seed in seeds:
            log = run_experiment(base.with_overrides(seed=seed, **VARIANTS[name]))
            rows.append((log.final["A_glo"], log.final["A_glo_minority"], log.final["A_loc"],
                         float(np.mean(list(log.forgetting.values())))))
        mean = np.mean(rows, axis=0)
        table[name] = dict(zip(("A_glo", "A_glo_minority", "A_loc", "forgetting"), mean.tolist()))
        print(f"{name:12s} A_glo={mean[0]:.3f} minority={mean[1]:.3f} A_loc={mean[2]:.3f} "
              f"forgetting={mean[3]:.3f}  [{time.perf_counter() - t0:.0f}s]", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"seeds": seeds, "results": table}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
