"""Command-line entry point: ``tedio <subcommand> [flags]``.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numeric or
dimension error. Failures print one line to stderr:
``error code=<n> kind=<ExceptionClass> message="<text>"``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import tdt
from .data import gen_corpus, load_corpus, make_clips, write_ppm
from .diffusion import NoiseSchedule, train
from .errors import DimensionError, NumericError, TDTIOError, TedioError, UsageError
from .experiments import (
    ABLATION_COLUMNS,
    SWEEPS,
    ablation_rows,
    baseline_row,
    load_run,
    sample_many,
    sign_test_p,
)
from .metrics import clip_report, dynamic_proxy, flicker_score, noised, summarize_stats
from .model import init_params, save_checkpoint
from .oracles import gradcheck_suites
from .tensor import no_tape
from .temporal import temporal_attention, variability_score


def _csv_list(text: str, cast=int) -> tuple:
    try:
        return tuple(cast(v) for v in text.split(",") if v.strip() != "")
    except ValueError as e:
        raise UsageError(f"bad list {text!r}: {e}") from e


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--seeds", help="comma-separated sampling seeds")
    common.add_argument("--tedio", choices=["on", "off"])
    common.add_argument("--block", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--eta", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--ell", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--corpus")
    common.add_argument("--cond", type=int)
    common.add_argument("--kind", choices=["ddpm", "flow"], help="diffusion formulation")

    p = argparse.ArgumentParser(prog="tedio", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic clip corpus")
    g.add_argument("--n", type=int)
    g.add_argument("--jitter-rate", type=float)
    g.add_argument("--jitter-mode")
    g.add_argument("--jitter-amplitude", type=float)
    g.add_argument("--ppm", action="store_true", default=None, help="also export frames as PGM")
    t = sub.add_parser("train", parents=[common], help="train the toy DiT")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    sub.add_parser("sample", parents=[common], help="sample videos, optionally with TeDiO")
    pr = sub.add_parser("probe", parents=[common], help="dump temporal attention and variability scores")
    pr.add_argument("--timesteps", help="comma-separated sampling steps (default 50,45,40)")
    pr.add_argument("--blocks")
    a = sub.add_parser("ablate", parents=[common], help="sweep one TeDiO hyperparameter")
    a.add_argument("--sweep", choices=sorted(SWEEPS))
    a.add_argument("--values", help="comma-separated settings")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    r = sub.add_parser("report", parents=[common], help="compare baseline and TeDiO sample directories")
    r.add_argument("inputs", nargs=2, metavar="DIR", help="baseline dir, TeDiO dir")
    return p


def _effective_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    ov = cfgmod.override
    for flag, section, key in [
        ("seed", None, "seed"), ("jobs", None, "jobs"), ("checkpoint", None, "checkpoint"),
        ("corpus", None, "corpus"), ("cond", None, "cond"), ("out", None, "out"),
        ("block", "tedio", "block"), ("k", "tedio", "k"), ("eta", "tedio", "eta"),
        ("iters", "tedio", "n_iters"), ("ell", "tedio", "ell"), ("kind", "schedule", "kind"),
        ("n", "data", "n_clips"), ("jitter_rate", "data", "jitter_rate"),
        ("jitter_mode", "data", "jitter_mode"), ("jitter_amplitude", "data", "jitter_amplitude"),
        ("steps", "train", "steps"), ("lr", "train", "lr"),
    ]:
        val = getattr(args, flag, None)
        if val is not None:
            cfg = ov(cfg, section, key, val)
    if args.seed is not None:
        # one --seed drives data generation, training and noise alike
        cfg = ov(ov(cfg, "data", "seed", args.seed), "train", "seed", args.seed)
    for flag, key in (("seeds", "seeds"), ("timesteps", "timesteps"), ("blocks", "blocks"), ("values", "values")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg = ov(cfg, None, key, _csv_list(val))
    if args.tedio is not None:
        cfg = ov(cfg, None, "use_tedio", args.tedio == "on")
    for flag in ("sweep", "ppm"):
        if getattr(args, flag, None) is not None:
            cfg = ov(cfg, None, flag, getattr(args, flag))
    return cfg


def _prepare_out(cfg: cfgmod.RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfgmod.dumps(cfg))
    except OSError as e:
        raise TDTIOError(f"cannot write to {out}: {e}") from e
    return out


def _need(path, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise TDTIOError(f"{what} not found: {p}")
    return p


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def cmd_gen_data(args, cfg, out):
    m, d = cfg.model, cfg.data
    manifest = gen_corpus(out, d.n_clips, m.frames, m.height, m.width, seed=d.seed, jitter_rate=d.jitter_rate,
                          jitter_mode=d.jitter_mode, jitter_amplitude=d.jitter_amplitude)
    if cfg.ppm:
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        for entry in manifest["clips"]:
            video = tdt.load(out / entry["file"])
            for f in range(video.shape[0]):
                write_ppm(frames_dir / f"clip{entry['index']:05d}_f{f:02d}.pgm", video[f])
    print(f"wrote {len(manifest['clips'])} clips to {out}")


def cmd_train(args, cfg, out):
    m = cfg.model
    if cfg.corpus:
        videos, ids, _ = load_corpus(_need(cfg.corpus, "corpus"))
    else:
        d = cfg.data
        videos, ids, _ = make_clips(d.n_clips, m.frames, m.height, m.width, d.seed, d.jitter_rate, d.jitter_mode,
                                    d.jitter_amplitude)
    if tuple(videos.shape[1:]) != m.video_shape:
        raise DimensionError(f"corpus clips {tuple(videos.shape[1:])} do not match model {m.video_shape}")
    model = init_params(m, seed=cfg.seed)
    schedule = NoiseSchedule.from_config(cfg.schedule)
    tcfg = cfg.train
    losses = train(model, schedule, videos, ids, tcfg,
                   callback=lambda s, l: print(f"step {s} loss {l:.5f}") if s % cfg.train.log_every == 0 else None)
    save_checkpoint(model, out / "checkpoint.tdt", {"schedule": cfg.schedule.kind, "train_steps": tcfg.steps})
    _write_csv(out / "loss.csv", ["step", "loss"], [{"step": i, "loss": l} for i, l in enumerate(losses)])
    print(f"saved {out / 'checkpoint.tdt'}")


def cmd_sample(args, cfg, out):
    model, schedule = load_run(_need(cfg.checkpoint, "checkpoint"), cfg.schedule)
    tedio = cfg.tedio if cfg.use_tedio else None
    model.counter.reset()
    results = sample_many(model, schedule, cfg.seeds, tedio, cond=cfg.cond, jobs=cfg.jobs)
    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    events = []
    for seed, res in zip(cfg.seeds, results):
        tdt.save(out / f"sample_seed{seed}.tdt", res.z0)
        for f in range(res.z0.shape[0]):
            write_ppm(frames_dir / f"seed{seed}_f{f:02d}.pgm", res.z0[f])
        events.extend({"seed": seed, "t": t, "iter": it, "loss": loss} for t, it, loss in res.events)
    _write_csv(out / "events.csv", ["seed", "t", "iter", "loss"], events)
    report = clip_report([r.z0 for r in results], [f"seed{s}" for s in cfg.seeds], cfg.dynamic_threshold)
    (out / "metrics.csv").write_text(report.to_csv())
    if cfg.jobs <= 1:
        (out / "counters.json").write_text(json.dumps(model.counter.snapshot(), sort_keys=True) + "\n")
    print(f"sampled {len(results)} videos into {out}")


def cmd_probe(args, cfg, out):
    model, schedule = load_run(_need(cfg.checkpoint, "checkpoint"), cfg.schedule)
    videos, ids, manifest = load_corpus(_need(cfg.corpus, "corpus"))
    if tuple(videos.shape[1:]) != model.cfg.video_shape:
        raise DimensionError(
            f"corpus clips {tuple(videos.shape[1:])} do not match the checkpoint model {model.cfg.video_shape}"
        )
    timesteps = cfg.timesteps
    blocks = cfg.blocks or tuple(range(1, model.cfg.n_blocks + 1))
    dtype = next(model.parameters()).dtype
    rows = []
    for c, entry in enumerate(manifest["clips"]):
        clip_dir = out / f"clip_{entry['index']:05d}"
        clip_dir.mkdir(exist_ok=True)
        for t in timesteps:
            z = noised(schedule, videos[c].to(dtype), t, cfg.seed + c)[None]
            for b in blocks:
                with no_tape():
                    _, cap = model(z, ids[c], float(schedule.position(t)), capture_block=b, truncate_at=b)
                    maps = temporal_attention(cap, model.cfg)[0]
                    scores = variability_score(maps, cfg.tedio.bands)
                tdt.save(clip_dir / f"attn_t{t}_block{b}.tdt", maps)
                tdt.save(clip_dir / f"scores_t{t}_block{b}.tdt", scores)
                rows.append({"clip_id": entry["index"], "coherent": entry["coherent"], "block": b, "t": t,
                             "mean_S": float(scores.double().mean()), "max_S": float(scores.double().max())})
    by_key = {(r["clip_id"], r["block"], r["t"]): r["mean_S"] for r in rows}
    stats = np.array([[[by_key[e["index"], b, t] for t in timesteps] for b in blocks] for e in manifest["clips"]])
    with open(out / "variability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["clip_id", "coherent", "block", "t", "mean_S", "max_S"]
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        for agg in summarize_stats(stats, blocks, timesteps):
            w.writerow(["#aggregate", "", agg["block"], agg["t"], repr(agg["mean_S"]), repr(agg["median_S"])])
    print(f"probed {len(manifest['clips'])} clips into {out}")


def cmd_ablate(args, cfg, out):
    model, schedule = load_run(_need(cfg.checkpoint, "checkpoint"), cfg.schedule)
    if cfg.sweep not in SWEEPS or not cfg.values:
        raise UsageError(f"ablate needs --sweep ({'|'.join(sorted(SWEEPS))}) and --values")
    cfg.tedio.validate(model.cfg, schedule.T)
    for v in cfg.values:
        dataclasses.replace(cfg.tedio, **{SWEEPS[cfg.sweep]: v}).validate(model.cfg, schedule.T)
    rows = [baseline_row(model, schedule, cfg.seeds, cfg.dynamic_threshold, jobs=cfg.jobs)]
    rows += ablation_rows(model, schedule, cfg.sweep, cfg.values, cfg.seeds, cfg.tedio, cfg.dynamic_threshold,
                          jobs=cfg.jobs)
    path = out / f"ablate_{cfg.sweep}.csv"
    _write_csv(path, ABLATION_COLUMNS, rows)
    print(f"wrote {len(rows) - 1} settings to {path}")


def cmd_gradcheck(args, cfg, out):
    results = gradcheck_suites()
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.max_err:.3e} tol={r.tol:.0e}" for r in results]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not all(r.passed for r in results):
        raise NumericError("gradient check failed")


def cmd_report(args, cfg, out):
    base_dir, ted_dir = (_need(p, "input") for p in args.inputs)
    rows = []
    for f in sorted(base_dir.glob("sample_seed*.tdt"), key=lambda p: int(p.stem[len("sample_seed"):])):
        other = ted_dir / f.name
        if not other.exists():
            raise TDTIOError(f"{other} missing for paired comparison")
        a, b = tdt.load(f), tdt.load(other)
        rows.append({
            "seed": int(f.stem[len("sample_seed"):]),
            "flicker_base": flicker_score(a), "flicker_tedio": flicker_score(b),
            "dynamic_base": dynamic_proxy(a, cfg.dynamic_threshold),
            "dynamic_tedio": dynamic_proxy(b, cfg.dynamic_threshold),
        })
    if not rows:
        raise TDTIOError(f"no sample_seed*.tdt files in {base_dir}")
    cols = ["seed", "flicker_base", "flicker_tedio", "dynamic_base", "dynamic_tedio"]
    _write_csv(out / "comparison.csv", cols, rows)
    fb = np.array([r["flicker_base"] for r in rows])
    ft = np.array([r["flicker_tedio"] for r in rows])
    better, nonzero = int((ft < fb).sum()), int((ft != fb).sum())
    p = sign_test_p(better, nonzero) if nonzero else 1.0
    summary = (
        f"pairs: {len(rows)}\n"
        f"flicker baseline mean: {fb.mean():.6f}\n"
        f"flicker tedio mean: {ft.mean():.6f}\n"
        f"tedio lower flicker: {better}/{nonzero} (one-sided sign test p={p:.4g})\n"
        f"dynamic proxy (threshold {cfg.dynamic_threshold}) baseline/tedio: "
        f"{np.mean([r['dynamic_base'] for r in rows]):.4f}/{np.mean([r['dynamic_tedio'] for r in rows]):.4f}\n"
    )
    (out / "summary.txt").write_text(summary)
    print(summary, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _effective_config(args)
        out = _prepare_out(cfg)
        COMMANDS[args.command](args, cfg, out)
    except TedioError as e:
        return _fail(e.exit_code, e)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        return _fail(3, e)
    except (TypeError, ValueError) as e:
        return _fail(2, e)
    return 0


def _fail(code: int, exc: Exception) -> int:
    print(f"error code={code} kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
