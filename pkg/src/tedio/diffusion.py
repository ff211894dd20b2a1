"""DDPM (epsilon prediction) and flow-matching objectives with deterministic samplers.

Training draws integer schedule positions in 1..train_positions; sampling step
t in 1..T maps onto position t * train_positions / T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .config import ScheduleConfig, TedioConfig, TrainConfig
from .errors import TrainingError, UsageError
from .temporal import latent_refine
from .tensor import default_dtype, no_tape

COSINE_OFFSET = 0.008
MIN_ALPHA_BAR = 1e-4


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    train_positions: int
    alpha: np.ndarray  # indexed by schedule position 0..train_positions
    sigma: np.ndarray
    clip_x0: bool = True

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "NoiseSchedule":
        n = cfg.train_positions
        tau = np.arange(n + 1, dtype=np.float64) / n
        if cfg.kind == "ddpm":
            f = np.cos((tau + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
            abar = np.clip(f / f[0], MIN_ALPHA_BAR, 1.0)
            alpha, sigma = np.sqrt(abar), np.sqrt(1.0 - abar)
        else:
            # data weight, noise weight of the linear interpolation path
            alpha, sigma = 1.0 - tau, tau
        return cls(cfg.kind, cfg.T, n, alpha, sigma, cfg.clip_x0)

    @property
    def stride(self) -> int:
        return self.train_positions // self.T

    def position(self, t: int) -> int:
        """Schedule position of sampling step t (0..T)."""
        if not 0 <= t <= self.T:
            raise UsageError(f"sampling step {t} outside 0..{self.T}")
        return t * self.stride


def ddpm_corrupt(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """alpha_t * z0 + sigma_t * eps at schedule position(s) t in 1..train_positions."""
    tt = torch.as_tensor(t).reshape(-1)
    if bool((tt < 1).any()) or bool((tt > schedule.train_positions).any()):
        raise UsageError(f"timestep outside 1..{schedule.train_positions}")
    a = torch.as_tensor(schedule.alpha[tt.numpy()], dtype=z0.dtype)
    s = torch.as_tensor(schedule.sigma[tt.numpy()], dtype=z0.dtype)
    if a.numel() > 1:
        a = a.reshape(-1, *([1] * (z0.dim() - 1)))
        s = s.reshape(-1, *([1] * (z0.dim() - 1)))
    else:
        a, s = a.reshape(()), s.reshape(())
    return a * z0 + s * eps


def flow_interpolate(z0: torch.Tensor, zT: torch.Tensor, t, T: int) -> torch.Tensor:
    """(1 - t/T) z0 + (t/T) zT; ``t`` may be a per-sample vector for batched input."""
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    w = (tt / T).to(z0.dtype)
    if z0.dim() == 5:
        w = w.reshape(-1, 1, 1, 1, 1)
    else:
        w = w.reshape(())
    return (1 - w) * z0 + w * zT


def build_optimizer(model, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    if cfg.optimizer == "momentum":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.lr)


def training_loss(model, schedule: NoiseSchedule, z0, cond, gen: torch.Generator) -> torch.Tensor:
    B = z0.shape[0]
    pos = torch.randint(1, schedule.train_positions + 1, (B,), generator=gen)
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    if schedule.kind == "ddpm":
        zt = ddpm_corrupt(schedule, z0, pos, noise)
        target = noise
    else:
        zt = flow_interpolate(z0, noise, pos, schedule.train_positions)
        target = noise - z0
    pred, _ = model(zt, cond, pos.to(torch.float64))
    return ((pred - target) ** 2).mean()


def train_step(model, optimizer, schedule: NoiseSchedule, z0, cond, gen: torch.Generator, step: int = 0) -> float:
    """One optimizer step on the selected objective; returns the mean-reduced loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    with torch.enable_grad():
        loss = training_loss(model, schedule, z0, cond, gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(step, value)
        loss.backward()
    optimizer.step()
    return value


def train(model, schedule: NoiseSchedule, videos: torch.Tensor, conds: torch.Tensor, cfg: TrainConfig,
          callback: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Minibatch training over an in-memory corpus; deterministic given cfg.seed.

    With ``cfg.ema_decay > 0`` the model ends up holding the averaged weights.
    """
    model.requires_grad_(True)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = build_optimizer(model, cfg)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    ema = None
    if cfg.ema_decay > 0:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay), use_buffers=True)
    videos = videos.to(next(model.parameters()).dtype)
    losses = []
    n = videos.shape[0]
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        loss = train_step(model, opt, schedule, videos[idx], conds[idx], gen, step)
        if sched is not None:
            sched.step()
        if ema is not None:
            ema.update_parameters(model)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    if ema is not None:
        model.load_state_dict(ema.module.state_dict())
    model.requires_grad_(False)
    model.eval()
    return losses


@dataclass
class SamplerState:
    z: torch.Tensor  # [B, F, C, H, W]
    t: int
    cond: object
    seed: Optional[int] = None


def _predict(model, z, cond, pos):
    out = model(z, cond, float(pos))
    return out[0] if isinstance(out, tuple) else out


def denoise_step(model, schedule: NoiseSchedule, state: SamplerState) -> SamplerState:
    """DDIM (eta=0) for ddpm, explicit Euler with step 1/T for flow. Runs without a tape."""
    t = state.t
    if t < 1:
        raise UsageError("denoise_step needs t >= 1")
    pos, prev = schedule.position(t), schedule.position(t - 1)
    with no_tape():
        pred = _predict(model, state.z, state.cond, pos)
        if schedule.kind == "ddpm":
            a, s = schedule.alpha[pos], schedule.sigma[pos]
            a_prev, s_prev = schedule.alpha[prev], schedule.sigma[prev]
            x0 = (state.z - s * pred) / a
            if schedule.clip_x0:
                x0 = x0.clamp(-1.0, 1.0)
            z = a_prev * x0 + s_prev * pred
        else:
            z = state.z - (1.0 / schedule.T) * pred
    return SamplerState(z, t - 1, state.cond, state.seed)


@dataclass
class SampleResult:
    z0: torch.Tensor
    events: list = field(default_factory=list)  # (t, iter, loss)
    refine_logs: list = field(default_factory=list)


def initial_noise(shape, seed: int, dtype=None) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn((1,) + tuple(shape), generator=gen, dtype=torch.float64).to(dtype or default_dtype())


def sample(model, schedule: NoiseSchedule, cond, seed: int, tedio: Optional[TedioConfig] = None) -> SampleResult:
    """Deterministic sampling from z_T ~ N(0, I) drawn from ``seed``.

    When ``tedio`` is given, the latent is refined before the denoising
    update at each of its optimized sampling steps (1 = first step, t = T).
    """
    dtype = next(model.parameters()).dtype
    z = initial_noise(model.cfg.video_shape, seed, dtype)
    result = SampleResult(z0=z)
    steps = set()
    if tedio is not None:
        tedio.validate(model.cfg, schedule.T)
        steps = tedio.optimized_steps(schedule.T) if tedio.n_iters > 0 else set()
    state = SamplerState(z, schedule.T, cond, seed)
    for i, t in enumerate(range(schedule.T, 0, -1), start=1):
        if i in steps:
            z_ref, log = latent_refine(model, state.z, cond, schedule.position(t), tedio, t=t)
            state = SamplerState(z_ref, t, cond, seed)
            result.refine_logs.append(log)
            result.events.extend((t, it, loss) for it, loss in enumerate(log.losses))
        with model.counter.tagged("baseline"):
            state = denoise_step(model, schedule, state)
    result.z0 = state.z[0]
    return result
