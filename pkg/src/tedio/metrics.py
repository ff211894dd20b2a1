"""Temporal quality proxies and the coherent-vs-incoherent separation statistic."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddpm_corrupt, flow_interpolate
from .errors import UsageError
from .tensor import no_tape
from .temporal import temporal_attention, variability_score

DEFAULT_DYNAMIC_THRESHOLD = 0.05


def _frames(video: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(video).double()
    if v.dim() < 1 or v.shape[0] < 2:
        raise UsageError("need at least two frames")
    return v


def flicker_score(video) -> float:
    """Mean absolute difference between consecutive frames, over all pixels."""
    v = _frames(video)
    return float((v[1:] - v[:-1]).abs().mean())


def dynamic_proxy(video, threshold: float = DEFAULT_DYNAMIC_THRESHOLD) -> float:
    """Fraction of (pixel, frame-pair) sites whose temporal change exceeds ``threshold``.

    A stand-in for optical-flow dynamic degree, not a flow estimate.
    """
    if threshold < 0:
        raise UsageError("threshold must be non-negative")
    v = _frames(video)
    return float(((v[1:] - v[:-1]).abs() > threshold).double().mean())


def separation_auroc(scores_coherent: Sequence[float], scores_incoherent: Sequence[float]) -> float:
    """P(incoherent score > coherent score), ties counted one half. Exact pair count."""
    a = np.asarray(scores_coherent, dtype=np.float64)
    b = np.asarray(scores_incoherent, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise UsageError("separation_auroc needs two non-empty samples")
    greater = (b[:, None] > a[None, :]).sum()
    ties = (b[:, None] == a[None, :]).sum()
    return float((greater + 0.5 * ties) / (a.size * b.size))


def noised(schedule: NoiseSchedule, clip: torch.Tensor, t: int, seed: int) -> torch.Tensor:
    """Corrupt a clean clip to sampling step t with the training corruption."""
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(clip.shape, generator=gen, dtype=torch.float64).to(clip.dtype)
    pos = schedule.position(t)
    if pos == 0:
        return clip.clone()
    if schedule.kind == "ddpm":
        return ddpm_corrupt(schedule, clip, pos, eps)
    return flow_interpolate(clip, eps, pos, schedule.train_positions)


def patch_scores(model, z, cond, pos, block: int, bands=(-1, 0, 1)) -> torch.Tensor:
    """Variability score of every patch-head map at ``block``: [B, P]."""
    with no_tape():
        _, cap = model(z, cond, float(pos), capture_block=block, truncate_at=block)
        return variability_score(temporal_attention(cap, model.cfg), bands)


def variability_stats(model, schedule: NoiseSchedule, clips: torch.Tensor, conds, blocks: Sequence[int],
                      timesteps: Sequence[int], noise_seed: int = 0, bands=(-1, 0, 1)) -> np.ndarray:
    """Mean S over patches for every (clip, block, timestep): array [n_clips, len(blocks), len(timesteps)].

    Clip c is noised with seed ``noise_seed + c`` so paired corpora share noise.
    """
    dtype = next(model.parameters()).dtype
    conds = torch.as_tensor(conds).reshape(-1)
    out = np.zeros((clips.shape[0], len(blocks), len(timesteps)))
    for c in range(clips.shape[0]):
        for j, t in enumerate(timesteps):
            z = noised(schedule, clips[c].to(dtype), t, noise_seed + c)[None]
            for i, b in enumerate(blocks):
                s = patch_scores(model, z, conds[c], schedule.position(t), b, bands)
                out[c, i, j] = float(s.double().mean())
    return out


def summarize_stats(stats: np.ndarray, blocks, timesteps) -> list[dict]:
    rows = []
    for i, b in enumerate(blocks):
        for j, t in enumerate(timesteps):
            col = stats[:, i, j]
            rows.append({"block": b, "t": t, "mean_S": float(col.mean()), "median_S": float(np.median(col))})
    return rows


@dataclass
class MetricReport:
    columns: list
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in self.columns])
        for r in self.aggregates:
            w.writerow([f"#aggregate:{r[self.columns[0]]}"] + [_fmt(r.get(c, "")) for c in self.columns[1:]])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


CLIP_COLUMNS = ["clip_id", "flicker", "dynamic_proxy"]


def clip_report(videos: Iterable[torch.Tensor], ids: Iterable, threshold: float = DEFAULT_DYNAMIC_THRESHOLD,
                extra: Optional[dict] = None) -> MetricReport:
    """Per-clip flicker/dynamic rows plus mean/std aggregates, in the given id order.

    ``extra`` maps column name to a per-clip value list (e.g. mean S per block/timestep).
    """
    extra = extra or {}
    cols = CLIP_COLUMNS + sorted(extra)
    report = MetricReport(cols)
    for n, (cid, v) in enumerate(zip(ids, videos)):
        row = {"clip_id": cid, "flicker": flicker_score(v), "dynamic_proxy": dynamic_proxy(v, threshold)}
        for k in extra:
            row[k] = float(extra[k][n])
        report.rows.append(row)
    for stat, fn in (("mean", np.mean), ("std", np.std)):
        agg = {"clip_id": stat}
        for c in cols[1:]:
            agg[c] = float(fn([r[c] for r in report.rows])) if report.rows else float("nan")
        report.aggregates.append(agg)
    return report
