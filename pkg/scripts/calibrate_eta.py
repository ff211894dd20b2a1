"""Pick the default refinement step size and write it into configs/default.json.

The chosen eta is the largest candidate for which the per-timestep loss log
is non-increasing on at least 95% of 100 random (seed, early step) pairs.

    python scripts/calibrate_eta.py --checkpoint checkpoints/toy_ddpm.tdt
"""

import argparse
import json
from pathlib import Path

from tedio import config as cfgmod
from tedio.config import TedioConfig
from tedio.experiments import calibrate_eta, descent_pairs, load_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default="checkpoints/toy_ddpm.tdt")
    ap.add_argument("--candidates", default="0.05,0.1,0.2,0.5,1,2,5,10,20,50")
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--pair-seed", type=int, default=0)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--config", default="configs/default.json")
    args = ap.parse_args()

    model, schedule = load_run(args.checkpoint)
    base = TedioConfig()
    pairs = descent_pairs(args.pairs, base.ell, seed=args.pair_seed)
    candidates = [float(c) for c in args.candidates.split(",")]
    eta, table = calibrate_eta(model, schedule, base, candidates, pairs, target=args.target)
    for e, frac in table.items():
        print(f"eta={e:<8g} non-increasing fraction={frac:.2f}")
    if eta is None:
        raise SystemExit("no candidate reaches the descent target")
    print(f"chosen eta={eta:g}")

    path = Path(args.config)
    cfg = cfgmod.load(path) if path.exists() else cfgmod.RunConfig(checkpoint=args.checkpoint)
    cfg = cfgmod.override(cfg, "tedio", "eta", eta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfgmod.dumps(cfg))
    table_path = path.with_name("eta_calibration.json")
    table_path.write_text(json.dumps({"chosen": eta, "target": args.target, "pairs": len(pairs),
                                      "table": {repr(k): v for k, v in table.items()}}, indent=2) + "\n")


if __name__ == "__main__":
    main()
