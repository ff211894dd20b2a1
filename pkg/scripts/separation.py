"""Coherent vs jittered clips: AUROC of mean diagonal variability at early timesteps.

    python scripts/separation.py --checkpoint checkpoints/toy_ddpm.tdt --blocks 2 --timesteps 45,40
"""

import argparse

import numpy as np

from tedio.experiments import load_run, separation_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default="checkpoints/toy_ddpm.tdt")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--blocks", default="2")
    ap.add_argument("--timesteps", default="45,40")
    ap.add_argument("--mode", default="position_noise")
    ap.add_argument("--amplitude", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model, schedule = load_run(args.checkpoint)
    blocks = [int(b) for b in args.blocks.split(",")]
    timesteps = [int(t) for t in args.timesteps.split(",")]
    res = separation_study(model, schedule, n=args.n, blocks=blocks, timesteps=timesteps, seed=args.seed,
                           jitter_mode=args.mode, amplitude=args.amplitude)
    print(f"blocks={blocks} timesteps={timesteps} mode={args.mode} amplitude={args.amplitude}")
    print(f"mean S coherent={np.mean(res.coherent):.5f} incoherent={np.mean(res.incoherent):.5f}")
    print(f"AUROC={res.auroc:.4f}")


if __name__ == "__main__":
    main()
