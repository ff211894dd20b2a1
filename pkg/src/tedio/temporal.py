"""Temporal-attention diagonal regularization of video latents.

Q and K captured at one block are regrouped so that every (spatial cell,
head) pair gets its own F x F frame-to-frame attention map. Irregular
diagonals in those maps are scored by squared successive differences along a
few bands, the worst k maps are averaged into a loss, and the latent is
nudged down the gradient of that loss for a handful of iterations.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .config import ModelConfig, TedioConfig
from .errors import DimensionError, RefinementError, UsageError
from .model import AttentionCapture
from .tensor import backward, matmul, no_tape, permute_reshape, softmax, tape


def regroup(x: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """[B, N_h, F*H*W, C_h] (frame-major) -> [B, H*W*N_h, F, C_h].

    Patch index p = (h*W + w)*N_h + head.
    """
    if x.dim() == 3:
        x = x[None]
    B, Nh, L, Ch = x.shape
    F_, HW = cfg.frames, cfg.height * cfg.width
    if Nh != cfg.n_heads or L != F_ * HW:
        raise DimensionError(
            f"captured tensor {tuple(x.shape)} inconsistent with N_h={cfg.n_heads}, F*H*W={F_ * HW}"
        )
    x = x.reshape(B, Nh, F_, HW, Ch)
    return permute_reshape(x, (0, 3, 1, 2, 4), (B, HW * Nh, F_, Ch))


def temporal_attention(capture: AttentionCapture, cfg: ModelConfig) -> torch.Tensor:
    """Per-patch frame attention maps [B, P, F, F], rows summing to one."""
    q = regroup(capture.q, cfg)
    k = regroup(capture.k, cfg)
    logits = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return softmax(logits, -1)


def extract_band(maps: torch.Tensor, b: int) -> torch.Tensor:
    """Entries (i, i+b) of the trailing F x F map(s); length F - |b|."""
    F_ = maps.shape[-1]
    if maps.shape[-2] != F_:
        raise DimensionError(f"expected square maps, got {tuple(maps.shape)}")
    if abs(b) >= F_:
        raise UsageError(f"band offset {b} out of range for F={F_}")
    return torch.diagonal(maps, offset=b, dim1=-2, dim2=-1)


def variability_score(maps: torch.Tensor, bands: Sequence[int] = (-1, 0, 1)) -> torch.Tensor:
    """Sum over bands of squared successive differences along each band.

    Reduces the two trailing axes; a band of length n contributes n-1 terms,
    so a corner band (|b| = F-1) adds nothing. TedioConfig.validate is the
    stricter gate for configured bands.
    """
    F_ = maps.shape[-1]
    if maps.shape[-2] != F_:
        raise DimensionError(f"expected square maps, got {tuple(maps.shape)}")
    bad = [b for b in bands if abs(b) > F_ - 1]
    if bad:
        raise UsageError(f"bands {bad} fall outside an {F_}x{F_} map")
    # d[i, j] = A[i+1, j+1] - A[i, j] is a successive difference on band j - i
    d = maps[..., 1:, 1:] - maps[..., :-1, :-1]
    return (d * d * _band_weights(F_, tuple(bands), maps.dtype)).sum((-2, -1))


@functools.lru_cache(maxsize=32)
def _band_weights(F_: int, bands: tuple, dtype: torch.dtype) -> torch.Tensor:
    i = torch.arange(F_ - 1)
    offset = i[None, :] - i[:, None]
    return sum((offset == b).to(dtype) for b in bands) + torch.zeros((), dtype=dtype)


def topk_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest scores along the last axis; ties go to the lowest index."""
    P = scores.shape[-1]
    if not 1 <= k <= P:
        raise UsageError(f"k={k} outside 1..{P}")
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def tedio_loss(scores: torch.Tensor, k: int, return_index: bool = False):
    """Mean of the k largest scores (per sample when batched).

    The selection is treated as a constant; gradient flows through the
    selected score values only.
    """
    idx = topk_indices(scores, k)
    loss = torch.gather(scores, -1, idx).mean(-1)
    return (loss, idx) if return_index else loss


@dataclass
class RefineLog:
    t: int
    losses: list = field(default_factory=list)
    selections: list = field(default_factory=list)


def tedio_objective(model, z, cond, pos, cfg: TedioConfig, return_index: bool = False, sparse: bool = True,
                    conditioning=None):
    """Truncated forward to the capture block, then the top-k diagonal loss (summed over the batch).

    With ``sparse`` the top-k patches are chosen by a no-grad pass and the
    loss is recomputed on the graph from the selected cells' tokens only.
    Value and gradient are those of the dense path up to float rounding;
    the dense path is used whenever the selection covers half the cells or more.
    ``conditioning`` is an optional precomputed ``model.condition(cond, pos)``.
    """
    mcfg = model.cfg
    if sparse:
        cap, prefix = model.capture_with_prefix(z, cond, pos, cfg.block, conditioning)
        with no_tape():
            idx = topk_indices(variability_score(temporal_attention(cap, mcfg), cfg.bands), cfg.k)
        cells = torch.unique(idx // mcfg.n_heads)
        if 2 * cells.numel() < mcfg.height * mcfg.width:
            loss = _selected_loss(model, prefix, cfg, idx, cells)
            return (loss, idx) if return_index else loss
        # too many cells for the row path: redo densely, already counted
        with model.counter.recompute():
            _, cap = model(z, cond, pos, capture_block=cfg.block, truncate_at=cfg.block,
                           conditioning=conditioning)
    else:
        _, cap = model(z, cond, pos, capture_block=cfg.block, truncate_at=cfg.block, conditioning=conditioning)
    maps = temporal_attention(cap, mcfg)
    scores = variability_score(maps, cfg.bands)
    loss, idx = tedio_loss(scores, cfg.k, return_index=True)
    loss = loss.sum()
    return (loss, idx) if return_index else loss


def _selected_loss(model, prefix, cfg: TedioConfig, idx: torch.Tensor, cells: torch.Tensor) -> torch.Tensor:
    mcfg = model.cfg
    F_, HW, Nh = mcfg.frames, mcfg.height * mcfg.width, mcfg.n_heads
    # cell-major, frame-minor token ids of the selected cells
    rows = (cells[:, None] + HW * torch.arange(F_)[None, :]).reshape(-1)
    q, k = model.capture_rows(prefix, rows)
    B, nc, Ch = q.shape[0], cells.numel(), q.shape[-1]
    q = permute_reshape(q.reshape(B, Nh, nc, F_, Ch), (0, 2, 1, 3, 4), (B, nc * Nh, F_, Ch))
    k = permute_reshape(k.reshape(B, Nh, nc, F_, Ch), (0, 2, 1, 3, 4), (B, nc * Nh, F_, Ch))
    maps = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(Ch), -1)
    scores = variability_score(maps, cfg.bands)
    local = torch.searchsorted(cells, idx // Nh) * Nh + idx % Nh
    return torch.gather(scores, -1, local).mean(-1).sum()


def latent_refine(model, z: torch.Tensor, cond, pos, cfg: TedioConfig, t: Optional[int] = None):
    """Run ``cfg.n_iters`` plain gradient steps z <- z - eta * dL/dz.

    ``pos`` is the model's timestep input; ``t`` only labels the log.
    Returns the refined latent (detached) and a RefineLog whose i-th loss was
    evaluated before the i-th update.
    """
    log = RefineLog(t=t if t is not None else int(pos))
    z = z.detach().clone()
    # the conditioning depends on (cond, pos) only; shared by every pass below
    with no_tape():
        conditioning = model.condition(cond, pos, z.shape[0] if z.dim() == 5 else 1)
    for it in range(cfg.n_iters):
        with tape(), model.counter.tagged("tedio"):
            zt = z.clone().requires_grad_(True)
            loss, idx = tedio_objective(model, zt, cond, pos, cfg, return_index=True, conditioning=conditioning)
            if not bool(torch.isfinite(loss)):
                raise RefinementError(log.t, it)
            grad = backward(loss, [zt])[0]
        if not bool(torch.isfinite(grad).all()):
            raise RefinementError(log.t, it, what="gradient")
        log.losses.append(float(loss.detach()))
        log.selections.append(idx.reshape(-1).tolist())
        with torch.no_grad():
            z = z - cfg.eta * grad
    return z, log


def expected_extra_blocks(cfg: TedioConfig, T: int) -> int:
    """Forward block traversals TeDiO adds to one sampling run."""
    return len([s for s in cfg.optimized_steps(T) if 1 <= s <= T]) * cfg.n_iters * cfg.block
