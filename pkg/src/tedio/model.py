"""Toy video diffusion transformer.

One token per spatio-temporal cell, frame-major ordering
``token(f, h, w) = f*H*W + h*W + w``. Each block runs full 3D self-attention,
cross-attention to a class-conditioned token sequence and an MLP, with
timestep conditioning through adaptive scale/shift/gate modulation.

Spatial positional embeddings are added at the input; the frame positional
embedding enters the residual stream after block 1. Block-1 self-attention is
therefore frame-permutation equivariant, which makes frame-constant latents
give exactly constant temporal logits there.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tdt
from .config import ModelConfig
from .errors import DimensionError, UsageError
from .tensor import default_dtype, gelu, layer_norm, matmul, softmax

# Q and K are captured right after the QKV projection, before the softmax.
QK_CAPTURE_POINT = "post-projection, pre-softmax"


@dataclass
class AttentionCapture:
    block: int
    q: torch.Tensor  # [B, N_h, F*H*W, C_h], frame-major tokens
    k: torch.Tensor


class BlockCounter:
    """Counts block executions per tag, forward and backward.

    Backward traversals are counted by a gradient hook on each block's input,
    so they reflect gradient actually flowing through the block.
    """

    def __init__(self):
        self.forward = Counter()
        self.backward = Counter()
        self.tag = "baseline"

    @contextmanager
    def tagged(self, tag: str):
        prev, self.tag = self.tag, tag
        try:
            yield self
        finally:
            self.tag = prev

    @contextmanager
    def recompute(self):
        """Forward traversals inside are not counted: they repeat a pass already counted."""
        saved = self.forward.copy()
        try:
            yield self
        finally:
            self.forward = saved

    def reset(self):
        self.forward.clear()
        self.backward.clear()

    def snapshot(self) -> dict:
        return {"forward": dict(self.forward), "backward": dict(self.backward)}


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def attend(q, k, v, fused: bool = True):
    """softmax(q k^T / sqrt(C_h)) v. The fused kernel and the explicit path agree to float rounding."""
    if fused:
        return F.scaled_dot_product_attention(q, k, v)
    attn = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1]), -1)
    return matmul(attn, v)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D, r = cfg.d_model, cfg.mlp_ratio
        self.cfg = cfg
        self.qkv = nn.Linear(D, 3 * D)
        self.proj = nn.Linear(D, D)
        self.cross_gain = nn.Parameter(torch.ones(D))
        self.cross_bias = nn.Parameter(torch.zeros(D))
        self.cross_q = nn.Linear(D, D)
        self.cross_kv = nn.Linear(D, 2 * D)
        self.cross_proj = nn.Linear(D, D)
        self.fc1 = nn.Linear(D, r * D)
        self.fc2 = nn.Linear(r * D, D)
        self.ada = nn.Linear(D, 6 * D)
        self.fused = True
        self.register_buffer("_ones", torch.ones(D), persistent=False)
        self.register_buffer("_zeros", torch.zeros(D), persistent=False)

    def _norm(self, x):
        return layer_norm(x, self._ones, self._zeros, eps=1e-5)

    def qk(self, x, mods):
        shift1, scale1 = mods[0], mods[1]
        h = _modulate(self._norm(x), shift1, scale1)
        return self._split_heads(F.linear(h, self.qkv.weight, self.qkv.bias))

    def _split_heads(self, qkv):
        B, L, _ = qkv.shape
        Nh, Ch = self.cfg.n_heads, self.cfg.head_dim
        qkv = qkv.reshape(B, L, 3, Nh, Ch).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def modulation(self, c):
        return self.ada(F.silu(c)).chunk(6, dim=-1)

    def forward(self, x, c, ctx, capture: bool = False, qk_only: bool = False):
        mods = self.modulation(c)
        q, k, v = self.qk(x, mods)
        if qk_only:
            return None, (q, k)
        return self.finish(x, q, k, v, ctx, mods), ((q, k) if capture else None)

    def finish(self, x, q, k, v, ctx, mods):
        """Block output for the tokens of ``x`` given their queries ``q``; ``k``, ``v`` may span more tokens."""
        B, L, D = x.shape
        out = attend(q, k, v, self.fused).transpose(1, 2).reshape(B, L, D)
        return self._tail(x, out, ctx, mods)

    def _tail(self, x, attn_out, ctx, mods):
        """Residual self-attention output, then cross-attention and the MLP (all per token)."""
        gate1, shift2, scale2, gate2 = mods[2:]
        x = x + gate1[:, None] * self.proj(attn_out)
        hq = layer_norm(x, self.cross_gain, self.cross_bias)
        B, L, D = x.shape
        Nh, Ch = self.cfg.n_heads, self.cfg.head_dim
        cq = self.cross_q(hq).reshape(B, L, Nh, Ch).transpose(1, 2)
        ck, cv = self.cross_kv(ctx).reshape(B, -1, 2, Nh, Ch).permute(2, 0, 3, 1, 4)
        x = x + self.cross_proj(attend(cq, ck, cv, self.fused).transpose(1, 2).reshape(B, L, D))
        h = _modulate(self._norm(x), shift2, scale2)
        return x + gate2[:, None] * self.fc2(gelu(self.fc1(h)))


class DiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.token_embed = nn.Linear(cfg.channels, D, bias=False)
        self.pos_h = nn.Parameter(torch.zeros(cfg.height, D))
        self.pos_w = nn.Parameter(torch.zeros(cfg.width, D))
        self.pos_f = nn.Parameter(torch.zeros(cfg.frames, D))
        self.t_fc1 = nn.Linear(D, D)
        self.t_fc2 = nn.Linear(D, D)
        self.cond_embed = nn.Parameter(torch.zeros(cfg.cond_vocab, D))
        self.cond_pos = nn.Parameter(torch.zeros(cfg.cond_tokens, D))
        self.blocks = nn.ModuleList([DiTBlock(cfg) for _ in range(cfg.n_blocks)])
        self.final_ada = nn.Linear(D, 2 * D)
        self.head = nn.Linear(D, cfg.channels)
        self.register_buffer("_ones", torch.ones(D), persistent=False)
        self.register_buffer("_zeros", torch.zeros(D), persistent=False)
        self.counter = BlockCounter()

    def set_fused_attention(self, fused: bool) -> "DiT":
        for block in self.blocks:
            block.fused = fused
        return self

    # -- embedding -----------------------------------------------------------
    def _batched(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if z.dim() == 4:
            z = z[None]
        if z.dim() != 5 or tuple(z.shape[1:]) != cfg.video_shape:
            raise DimensionError(f"latent shape {tuple(z.shape)} does not match config {cfg.video_shape}")
        return z

    def _cond_ids(self, cond, B: int) -> torch.Tensor:
        ids = torch.as_tensor(cond, dtype=torch.long).reshape(-1)
        if ids.numel() == 1:
            ids = ids.expand(B)
        if ids.numel() != B:
            raise DimensionError(f"{ids.numel()} condition ids for batch of {B}")
        if bool((ids < 0).any()) or bool((ids >= self.cfg.cond_vocab).any()):
            raise UsageError(f"condition id outside 0..{self.cfg.cond_vocab - 1}")
        return ids

    def condition(self, cond, t, batch: int = 1):
        """Timestep vector [B, D] and cross-attention context [B, T_c, D].

        Independent of the latent, so callers running several passes at one
        (cond, t) can compute it once and hand it to ``forward``.
        """
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        temb = timestep_embedding(t, self.cfg.d_model).to(self.t_fc1.weight.dtype)
        c = self.t_fc2(F.silu(self.t_fc1(temb)))
        ids = self._cond_ids(cond, batch)
        ctx = self.cond_embed[ids][:, None, :] + self.cond_pos[None]
        return c, ctx

    def embed_video(self, z, cond, t, conditioning=None):
        """Tokens [B, F*H*W, D], timestep vector [B, D] and cross-attention context [B, T_c, D]."""
        cfg = self.cfg
        z = self._batched(z)
        B = z.shape[0]
        F_, C, H, W = cfg.video_shape
        cells = z.permute(0, 1, 3, 4, 2).reshape(B, F_ * H * W, C)
        spatial = (self.pos_h[:, None, :] + self.pos_w[None, :, :]).reshape(H * W, -1)
        x = self.token_embed(cells) + spatial.repeat(F_, 1)[None]
        if conditioning is None:
            conditioning = self.condition(cond, t, B)
        c, ctx = conditioning
        if c.shape[0] != B:
            raise DimensionError(f"conditioning for batch {c.shape[0]}, latent batch {B}")
        return x, c, ctx

    def _frame_pos(self) -> torch.Tensor:
        HW = self.cfg.height * self.cfg.width
        return self.pos_f.repeat_interleave(HW, dim=0)[None]

    # -- forward -------------------------------------------------------------
    def forward(self, z, cond, t, capture_block: Optional[int] = None, truncate_at: Optional[int] = None,
                conditioning=None):
        """Returns (prediction or None, AttentionCapture or None).

        With ``truncate_at == capture_block == i`` block i stops right after
        its QKV projection: the capture is all that is needed downstream.
        """
        N = self.cfg.n_blocks
        for name, val in (("capture_block", capture_block), ("truncate_at", truncate_at)):
            if val is not None and not 1 <= val <= N:
                raise UsageError(f"{name}={val} outside 1..{N}")
        x, c, ctx = self.embed_video(z, cond, t, conditioning)
        last = truncate_at if truncate_at is not None else N
        capture = None
        counter = self.counter
        for i, block in enumerate(self.blocks[:last], start=1):
            counter.forward[counter.tag] += 1
            self._count_backward(x)
            qk_only = i == last and truncate_at is not None and capture_block == i
            x, qk = block(x, c, ctx, capture=(capture_block == i), qk_only=qk_only)
            if qk is not None:
                capture = AttentionCapture(i, qk[0], qk[1])
            if i == 1 and x is not None:
                x = x + self._frame_pos()
        if truncate_at is not None:
            return None, capture
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        h = _modulate(layer_norm(x, self._ones, self._zeros), shift, scale)
        out = self.head(h)
        B = out.shape[0]
        F_, C, H, W = self.cfg.video_shape
        pred = out.reshape(B, F_, H, W, C).permute(0, 1, 4, 2, 3)
        return pred, capture


    def _count_backward(self, x):
        if torch.is_grad_enabled() and x.requires_grad:
            counter = self.counter
            x.register_hook(lambda g, tag=counter.tag: counter.backward.update([tag]))

    def capture_with_prefix(self, z, cond, t, block: int, conditioning=None):
        """Capture at ``block`` plus a RowPrefix for ``capture_rows``.

        Everything every token contributes to (the embedding, blocks before
        ``block - 1`` and the QKV projection of block ``block - 1``) runs once,
        on the graph when a tape is active. The rest of the truncated forward
        runs detached and only serves to pick rows. Forward counts match
        ``forward(..., truncate_at=block)``.
        """
        if not 1 <= block <= self.cfg.n_blocks:
            raise UsageError(f"block={block} outside 1..{self.cfg.n_blocks}")
        x, c, ctx = self.embed_video(z, cond, t, conditioning)
        counter = self.counter
        counter.forward[counter.tag] += block
        for i in range(1, block - 1):
            self._count_backward(x)
            x, _ = self.blocks[i - 1](x, c, ctx)
            if i == 1:
                x = x + self._frame_pos()
        if block == 1:
            mods = self.blocks[0].modulation(c)
            with torch.no_grad():
                q, k, _ = self.blocks[0].qk(x.detach(), mods)
            return AttentionCapture(1, q, k), RowPrefix(1, x, ctx, mods)
        self._count_backward(x)
        blk = self.blocks[block - 2]
        mods = blk.modulation(c)
        qkv = blk.qk(x, mods)
        with torch.no_grad():
            h = blk.finish(x.detach(), *(a.detach() for a in qkv), ctx, mods)
            if block == 2:
                h = h + self._frame_pos()
        nxt_mods = self.blocks[block - 1].modulation(c)
        with torch.no_grad():
            q, k, _ = self.blocks[block - 1].qk(h, nxt_mods)
        return AttentionCapture(block, q, k), RowPrefix(block, x, ctx, nxt_mods, qkv, mods)

    def capture_rows(self, prefix: "RowPrefix", rows: torch.Tensor):
        """Q, K of ``prefix.block`` at token subset ``rows`` (frame-major token ids), on the graph.

        Block ``block - 1`` is finished only at ``rows``, reusing the prefix's
        keys and values over every token. Adds backward counts but no forward
        counts, like an activation-checkpointing recompute.
        """
        if prefix.block == 1:
            x = prefix.x[:, rows]
        else:
            blk = self.blocks[prefix.block - 2]
            q, k, v = prefix.qkv
            x = blk.finish(prefix.x[:, rows], q[:, :, rows], k, v, prefix.ctx, prefix.prev_mods)
            if prefix.block == 2:
                x = x + self._frame_pos()[:, rows]
        self._count_backward(x)
        q, k, _ = self.blocks[prefix.block - 1].qk(x, prefix.mods)
        return q, k


@dataclass
class RowPrefix:
    """Graph-tracked state shared by row selection and the row-restricted capture."""

    block: int
    x: torch.Tensor  # input of block ``block - 1`` (of block 1 when block == 1)
    ctx: torch.Tensor
    mods: tuple  # modulation of ``block``
    qkv: Optional[tuple] = None  # q, k, v of block ``block - 1`` over every token
    prev_mods: Optional[tuple] = None


def full_attention(capture: AttentionCapture) -> torch.Tensor:
    """softmax(QK^T / sqrt(C_h)) over all spatio-temporal tokens: [B, N_h, HWF, HWF]."""
    ch = capture.q.shape[-1]
    return softmax(matmul(capture.q, capture.k.transpose(-1, -2)) / math.sqrt(ch), -1)


def init_params(cfg: ModelConfig, seed: int = 0, dtype: Optional[torch.dtype] = None) -> DiT:
    """Deterministic init: projections N(0, 1/fan_in), zero biases, zero output head."""
    dtype = dtype or default_dtype()
    gen = torch.Generator().manual_seed(seed)
    model = DiT(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("head."):
                p.zero_()
            elif name.endswith(".bias") or name.endswith("_bias"):
                p.zero_()
            elif name.endswith("_gain"):
                p.fill_(1.0)
            elif p.dim() == 2 and name.endswith("weight"):
                fan_in = p.shape[1]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in))
            else:
                # embedding tables: three factorized positions sum to unit variance
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) / math.sqrt(3.0))
    return model.to(dtype)


def save_checkpoint(model: DiT, path, meta: Optional[dict] = None) -> None:
    info = {
        "config": dataclasses.asdict(model.cfg),
        "qk_capture": QK_CAPTURE_POINT,
        "token_order": "frame-major",
    }
    if meta:
        info.update(meta)
    tensors = {k: v for k, v in model.state_dict().items()}
    tdt.save_archive(path, tensors, info)


def load_checkpoint(path, dtype: Optional[torch.dtype] = None) -> tuple[DiT, dict]:
    tensors, meta = tdt.load_archive(path)
    cfg = ModelConfig(**meta["config"])
    model = DiT(cfg)
    model.load_state_dict({k: v for k, v in tensors.items()})
    if dtype is not None:
        model = model.to(dtype)
    model.requires_grad_(False)
    return model, meta
