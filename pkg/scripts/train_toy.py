"""Train the default toy DiT on coherent moving-shape clips and save a checkpoint.

    python scripts/train_toy.py --kind ddpm --out checkpoints/toy_ddpm.tdt

Defaults reproduce the committed checkpoint (about 1h45 on one CPU core).
"""

import argparse
import csv
import time
from pathlib import Path

from tedio.config import ModelConfig, ScheduleConfig, TrainConfig
from tedio.data import make_clips
from tedio.diffusion import NoiseSchedule, train
from tedio.model import init_params, save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="ddpm", choices=["ddpm", "flow"])
    ap.add_argument("--steps", type=int, default=12000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--clips", type=int, default=2048)
    ap.add_argument("--lr-schedule", default="cosine", choices=["constant", "cosine"])
    ap.add_argument("--ema", type=float, default=0.999, help="weight EMA decay, 0 to disable")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="checkpoints/toy_ddpm.tdt")
    args = ap.parse_args()

    mcfg = ModelConfig()
    schedule = NoiseSchedule.from_config(ScheduleConfig(kind=args.kind))
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed,
                       lr_schedule=args.lr_schedule, ema_decay=args.ema)
    videos, ids, _ = make_clips(args.clips, mcfg.frames, mcfg.height, mcfg.width, seed=args.seed + 1)
    model = init_params(mcfg, seed=args.seed)
    start = time.time()

    def log(step, loss):
        if step % 100 == 0:
            print(f"step {step:5d} loss {loss:.4f} ({time.time() - start:.0f}s)", flush=True)

    losses = train(model, schedule, videos, ids, tcfg, callback=log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, {"schedule": args.kind, "train_steps": args.steps, "train_seed": args.seed,
                                 "clips": args.clips,
                                 "batch": args.batch, "lr_schedule": args.lr_schedule, "ema": args.ema})
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, repr(l)) for i, l in enumerate(losses))
    print(f"saved {out} after {time.time() - start:.0f}s; final loss {sum(losses[-100:]) / 100:.4f}")


if __name__ == "__main__":
    main()
