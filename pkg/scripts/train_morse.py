"""Train the 2-layer model on 500 Morse dimers and print the validation metrics."""

import argparse
import json
from dataclasses import replace

import torch

from bam.experiments import MORSE_TRAIN, morse_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=MORSE_TRAIN.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    run = morse_smoke(args.frames, args.seed, tcfg=replace(MORSE_TRAIN, epochs=args.epochs))
    print(json.dumps({**run.metrics, "seconds": round(run.seconds, 1), "epochs": len(run.log)}, indent=2))


if __name__ == "__main__":
    main()
