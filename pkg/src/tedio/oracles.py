"""Independent reference computations used by tests and the gradcheck command.

Nothing here shares code paths with the implementations it checks: the
temporal-attention oracle gathers rows with explicit loops, and gradients are
compared against central finite differences of forward evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .config import ModelConfig, TedioConfig
from .model import init_params
from .temporal import tedio_objective
from .tensor import (
    finite_diff_gradient,
    gelu,
    layer_norm,
    matmul,
    permute_reshape,
    precision,
    softmax,
    tape,
)

MICRO_CONFIG = dict(frames=4, height=2, width=2, channels=1, d_model=8, n_blocks=2, n_heads=2, head_dim=4,
                    cond_vocab=2, cond_tokens=2, mlp_ratio=2)


def micro_config() -> ModelConfig:
    return ModelConfig(**MICRO_CONFIG)


def naive_temporal_attention(q: torch.Tensor, k: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Loop over (h, w, head), gather the F frame rows of each cell, softmax per map.

    ``q``, ``k``: [N_h, F*H*W, C_h]. Returns [H*W*N_h, F, F].
    """
    F_, H, W, Nh = cfg.frames, cfg.height, cfg.width, cfg.n_heads
    ch = q.shape[-1]
    maps = []
    for h in range(H):
        for w in range(W):
            for head in range(Nh):
                rows = [f * H * W + h * W + w for f in range(F_)]
                qp = torch.stack([q[head, r] for r in rows])
                kp = torch.stack([k[head, r] for r in rows])
                logits = torch.empty(F_, F_, dtype=q.dtype)
                for i in range(F_):
                    for j in range(F_):
                        logits[i, j] = (qp[i] * kp[j]).sum() / math.sqrt(ch)
                e = torch.exp(logits - logits.max(dim=1, keepdim=True).values)
                maps.append(e / e.sum(dim=1, keepdim=True))
    return torch.stack(maps)


def grad_rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |analytic - numeric| divided by the largest gradient magnitude."""
    a, n = analytic.detach().double(), numeric.detach().double()
    scale = max(float(a.abs().max()), float(n.abs().max()), 1e-30)
    return float((a - n).abs().max()) / scale


def check_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-4) -> float:
    x = x.detach().clone()
    with tape():
        xr = x.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(f(xr), [xr])
    return grad_rel_err(g, finite_diff_gradient(f, x, step))


def tedio_gradient_error(seed: int, step: float = 1e-4, cfg: TedioConfig | None = None) -> float:
    """Reverse-mode vs finite-difference gradient of the TeDiO loss on the micro-config (f64)."""
    mcfg = micro_config()
    tcfg = cfg or TedioConfig(block=2, k=1)
    with precision("f64"):
        model = init_params(mcfg, seed=seed, dtype=torch.float64)
        model.requires_grad_(False)
        gen = torch.Generator().manual_seed(10_000 + seed)
        z = torch.randn((1,) + mcfg.video_shape, generator=gen, dtype=torch.float64)
        pos = float(torch.randint(1, 1001, (1,), generator=gen))
        cond = seed % mcfg.cond_vocab
        return check_gradient(lambda zz: tedio_objective(model, zz, cond, pos, tcfg), z, step)


@dataclass
class SuiteResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def _rnd(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _matmul_case(gen):
    b = _rnd(gen, 2, 4, 3)
    return (lambda a: (matmul(a, b) ** 2).sum()), _rnd(gen, 2, 3, 4)


def _softmax_case(gen):
    w = _rnd(gen, 3, 5)
    return (lambda x: (softmax(x, -1) * w).sum()), _rnd(gen, 3, 5)


def _layer_norm_case(gen):
    gain, bias, w = _rnd(gen, 6), _rnd(gen, 6), _rnd(gen, 4, 6)
    return (lambda x: (layer_norm(x, gain, bias) * w).sum()), _rnd(gen, 4, 6)


def _permute_case(gen):
    w = _rnd(gen, 4, 6)
    return (lambda x: (permute_reshape(x, (2, 0, 1), (4, 6)) * w).sum()), _rnd(gen, 2, 3, 4)


def _elementwise_case(gen):
    return (lambda x: (gelu(x) ** 2).mean() + (x * x).sum()), _rnd(gen, 7)


def _chain_case(gen):
    b = _rnd(gen, 3, 4)
    return (lambda a: (softmax(matmul(a, b), -1) ** 2).sum()), _rnd(gen, 2, 3)


PRIMITIVE_CASES = {
    "matmul": _matmul_case,
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "permute_reshape": _permute_case,
    "elementwise": _elementwise_case,
    "matmul_softmax_square": _chain_case,
}


def gradcheck_suites(n_seeds: int = 20, tol: float = 1e-4) -> list[SuiteResult]:
    """Finite-difference checks of every differentiable primitive plus the full loss (f64)."""
    out = []
    with precision("f64"):
        for name, case in PRIMITIVE_CASES.items():
            errs = [check_gradient(*case(torch.Generator().manual_seed(s))) for s in range(n_seeds)]
            out.append(SuiteResult(name, max(errs), tol))
    out.append(SuiteResult("tedio_loss_wrt_latent", max(tedio_gradient_error(s) for s in range(n_seeds)), tol))
    return out
