"""Two-regime active-learning study: BALD_EF at budget 10 against random picks at 10 and 20."""

import argparse
import json

import torch

from bam.experiments import al_study, al_verdict


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    torch.set_num_threads(1)
    runs = []
    for seed in args.seeds:
        r = al_study(seed)
        runs.append(r)
        arms = {f"{s}@{b}": round(v, 5) for (s, b), v in r.force_rmse.items()}
        picks = {f"{s}@{b}": v for (s, b), v in r.n_stretched.items()}
        print(f"seed {seed}: base {r.base_force_rmse:.5f} {arms} stretched picks {picks} ({r.seconds:.0f} s)", flush=True)
    print(json.dumps(al_verdict(runs), indent=2))


if __name__ == "__main__":
    main()
