"""Paired baseline vs TeDiO sampling over many seeds, with a one-sided sign test.

    python scripts/paired_flicker.py --checkpoint checkpoints/toy_ddpm.tdt --seeds 50
"""

import argparse
import dataclasses

import numpy as np

from tedio import config as cfgmod
from tedio.experiments import load_run, paired_flicker


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default="checkpoints/toy_ddpm.tdt")
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--eta", type=float)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = cfgmod.load(args.config)
    tedio = cfg.tedio if args.eta is None else dataclasses.replace(cfg.tedio, eta=args.eta)
    model, schedule = load_run(args.checkpoint, cfg.schedule)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    res = paired_flicker(model, schedule, seeds, tedio, cfg.dynamic_threshold, jobs=args.jobs)
    print(f"eta={tedio.eta:g} k={tedio.k} ell={tedio.ell} n_iters={tedio.n_iters} block={tedio.block}")
    print(f"flicker baseline={np.mean(res.flicker_base):.5f} tedio={np.mean(res.flicker_tedio):.5f}")
    print(f"dynamic baseline={np.mean(res.dynamic_base):.4f} tedio={np.mean(res.dynamic_tedio):.4f}")
    print(f"tedio lower: {res.n_better}/{res.n_nonzero}  sign-test p={res.p_value:.4g}")


if __name__ == "__main__":
    main()
