"""Experiment harness: paired sampling, sweeps, calibration and the separation study.

Everything is seeded; rerunning with the same arguments reproduces results
bit-for-bit on the same machine.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .config import ScheduleConfig, TedioConfig
from .data import JitterSpec, gen_coherent, inject_jitter
from .diffusion import NoiseSchedule, SamplerState, denoise_step, initial_noise, sample
from .metrics import dynamic_proxy, flicker_score, separation_auroc, variability_stats
from .model import load_checkpoint
from .temporal import latent_refine

SWEEPS = {"k": "k", "iters": "n_iters", "ell": "ell", "block": "block"}


def load_run(checkpoint, schedule_cfg: Optional[ScheduleConfig] = None):
    """Model plus the schedule it was trained with (the checkpoint's kind wins)."""
    model, meta = load_checkpoint(checkpoint)
    cfg = schedule_cfg or ScheduleConfig()
    kind = meta.get("schedule", cfg.kind)
    if kind != cfg.kind:
        cfg = dataclasses.replace(cfg, kind=kind)
    return model, NoiseSchedule.from_config(cfg)


def cond_for_seed(seed: int, vocab: int) -> int:
    return seed % vocab


def sample_many(model, schedule, seeds: Sequence[int], tedio: Optional[TedioConfig] = None,
                cond: Optional[int] = None, jobs: int = 1):
    """SampleResults in seed order; ``jobs > 1`` runs on per-thread model copies."""

    def one(args):
        m, s = args
        c = cond if cond is not None else cond_for_seed(s, m.cfg.cond_vocab)
        return sample(m, schedule, c, s, tedio)

    if jobs <= 1:
        return [one((model, s)) for s in seeds]
    models = [copy.deepcopy(model) for _ in range(jobs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, [(models[i % jobs], s) for i, s in enumerate(seeds)]))


def sign_test_p(n_better: int, n: int) -> float:
    """One-sided exact binomial tail P(X >= n_better), X ~ Bin(n, 1/2)."""
    return sum(math.comb(n, i) for i in range(n_better, n + 1)) / 2**n


@dataclass
class PairedResult:
    seeds: list
    flicker_base: np.ndarray
    flicker_tedio: np.ndarray
    dynamic_base: np.ndarray
    dynamic_tedio: np.ndarray

    @property
    def n_better(self) -> int:
        return int((self.flicker_tedio < self.flicker_base).sum())

    @property
    def n_nonzero(self) -> int:
        return int((self.flicker_tedio != self.flicker_base).sum())

    @property
    def p_value(self) -> float:
        return sign_test_p(self.n_better, self.n_nonzero)


def paired_flicker(model, schedule, seeds: Sequence[int], tedio: TedioConfig, threshold: float = 0.05,
                   jobs: int = 1) -> PairedResult:
    base = sample_many(model, schedule, seeds, None, jobs=jobs)
    ted = sample_many(model, schedule, seeds, tedio, jobs=jobs)
    return PairedResult(
        list(seeds),
        np.array([flicker_score(r.z0) for r in base]),
        np.array([flicker_score(r.z0) for r in ted]),
        np.array([dynamic_proxy(r.z0, threshold) for r in base]),
        np.array([dynamic_proxy(r.z0, threshold) for r in ted]),
    )


ABLATION_COLUMNS = ["sweep", "value", "n_seeds", "flicker_mean", "dynamic_mean", "tedio_loss_first", "tedio_loss_last",
                    "extra_forward_blocks"]


def ablation_rows(model, schedule, sweep: str, values: Iterable, seeds: Sequence[int], base: TedioConfig,
                  threshold: float = 0.05, jobs: int = 1) -> list[dict]:
    """One row per setting of ``sweep``; metrics averaged over ``seeds``."""
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}")
    rows = []
    for v in values:
        cfg = dataclasses.replace(base, **{SWEEPS[sweep]: int(v)})
        results = sample_many(model, schedule, seeds, cfg, jobs=jobs)
        first = [r.refine_logs[0].losses[0] for r in results if r.refine_logs]
        last = [r.refine_logs[-1].losses[-1] for r in results if r.refine_logs]
        rows.append({
            "sweep": sweep,
            "value": int(v),
            "n_seeds": len(seeds),
            "flicker_mean": float(np.mean([flicker_score(r.z0) for r in results])),
            "dynamic_mean": float(np.mean([dynamic_proxy(r.z0, threshold) for r in results])),
            "tedio_loss_first": float(np.mean(first)) if first else float("nan"),
            "tedio_loss_last": float(np.mean(last)) if last else float("nan"),
            "extra_forward_blocks": len(cfg.optimized_steps(schedule.T)) * cfg.n_iters * cfg.block,
        })
    return rows


def baseline_row(model, schedule, seeds, threshold: float = 0.05, jobs: int = 1) -> dict:
    results = sample_many(model, schedule, seeds, None, jobs=jobs)
    return {
        "sweep": "baseline",
        "value": 0,
        "n_seeds": len(seeds),
        "flicker_mean": float(np.mean([flicker_score(r.z0) for r in results])),
        "dynamic_mean": float(np.mean([dynamic_proxy(r.z0, threshold) for r in results])),
        "tedio_loss_first": float("nan"),
        "tedio_loss_last": float("nan"),
        "extra_forward_blocks": 0,
    }


def latent_at_step(model, schedule, seed: int, step: int) -> tuple[torch.Tensor, int, int]:
    """Baseline latent entering sampling step ``step`` (1 = first). Returns (z, t, cond)."""
    cond = cond_for_seed(seed, model.cfg.cond_vocab)
    z = initial_noise(model.cfg.video_shape, seed, next(model.parameters()).dtype)
    state = SamplerState(z, schedule.T, cond, seed)
    for _ in range(step - 1):
        state = denoise_step(model, schedule, state)
    return state.z, state.t, cond


def descent_pairs(n: int, ell: int, seed: int = 0) -> list[tuple[int, int]]:
    rng = np.random.default_rng(seed)
    return [(int(rng.integers(10_000)), int(rng.integers(1, ell + 1))) for _ in range(n)]


def descent_fraction(model, schedule, tedio: TedioConfig, pairs: Sequence[tuple[int, int]]) -> tuple[float, list]:
    """Share of (seed, step) pairs whose refinement loss log is non-increasing."""
    logs = []
    for seed, step in pairs:
        z, t, cond = latent_at_step(model, schedule, seed, step)
        _, log = latent_refine(model, z, cond, schedule.position(t), tedio, t=t)
        logs.append(log.losses)
    ok = [all(b <= a for a, b in zip(l, l[1:])) for l in logs]
    return float(np.mean(ok)), logs


def calibrate_eta(model, schedule, base: TedioConfig, candidates: Sequence[float], pairs,
                  target: float = 0.95) -> tuple[Optional[float], dict]:
    """Largest candidate step size whose descent fraction reaches ``target``."""
    table = {}
    for eta in sorted(candidates):
        frac, _ = descent_fraction(model, schedule, dataclasses.replace(base, eta=eta), pairs)
        table[eta] = frac
    ok = [e for e, f in table.items() if f >= target]
    return (max(ok) if ok else None), table


@dataclass
class SeparationResult:
    coherent: np.ndarray
    incoherent: np.ndarray
    auroc: float


def separation_clips(n: int, F: int, H: int, W: int, seed: int, jitter_mode: str, amplitude: float):
    """Paired corpora: n coherent clips and n jittered versions of fresh scenes."""
    rng = np.random.default_rng(seed)
    coh, inc, coh_ids, inc_ids = [], [], [], []
    for _ in range(n):
        v, cid, _ = gen_coherent(None, F, H, W, seed=int(rng.integers(2**31)))
        coh.append(v)
        coh_ids.append(cid)
    for _ in range(n):
        s = int(rng.integers(2**31))
        v, cid, spec = gen_coherent(None, F, H, W, seed=s)
        inc.append(inject_jitter(v, JitterSpec(jitter_mode, amplitude, seed=s + 1), spec))
        inc_ids.append(cid)
    return torch.stack(coh), torch.tensor(coh_ids), torch.stack(inc), torch.tensor(inc_ids)


def separation_study(model, schedule, n: int = 100, blocks: Sequence[int] = (2,), timesteps: Sequence[int] = (45, 40),
                     seed: int = 0, jitter_mode: str = "position_noise", amplitude: float = 1.0) -> SeparationResult:
    """AUROC of per-clip mean S (averaged over blocks and timesteps), incoherent vs coherent.

    Both corpora use noise seeds 0..n-1 so clip c in each group sees the same noise.
    """
    cfg = model.cfg
    coh, coh_ids, inc, inc_ids = separation_clips(n, cfg.frames, cfg.height, cfg.width, seed, jitter_mode, amplitude)
    s_coh = variability_stats(model, schedule, coh, coh_ids, blocks, timesteps).mean(axis=(1, 2))
    s_inc = variability_stats(model, schedule, inc, inc_ids, blocks, timesteps).mean(axis=(1, 2))
    return SeparationResult(s_coh, s_inc, separation_auroc(s_coh, s_inc))


def timed_sampling(model, schedule, seeds, tedio: Optional[TedioConfig], repeats: int = 3) -> float:
    """Best-of-``repeats`` wall-clock seconds to sample all ``seeds``."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        sample_many(model, schedule, seeds, tedio)
        best = min(best, time.perf_counter() - start)
    return best


def overhead_ratio(model, schedule, seeds, tedio: TedioConfig, repeats: int = 5) -> tuple[float, float, float]:
    """Wall-clock (tedio / baseline) over ``seeds`` from interleaved per-seed timings.

    Each seed is sampled with and without refinement back to back, ``repeats``
    times; the per-seed minima are summed. Load bursts on a shared machine then
    rarely hit one side only. Returns (ratio, baseline seconds, tedio seconds).
    """
    base = {s: float("inf") for s in seeds}
    ted = dict(base)
    for _ in range(repeats):
        for s in seeds:
            base[s] = min(base[s], timed_sampling(model, schedule, [s], None, repeats=1))
            ted[s] = min(ted[s], timed_sampling(model, schedule, [s], tedio, repeats=1))
    b, t = sum(base.values()), sum(ted.values())
    return t / b, b, t
