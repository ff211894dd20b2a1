"""Dense tensor helpers on top of torch autograd.

torch supplies storage and reverse-mode differentiation; this module pins down
the contracts the rest of the package relies on: explicit shape errors, an
explicitly scoped gradient tape, an f32/f64 precision switch and a central
finite-difference oracle that never touches autograd.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, UsageError

_dtype_override: list[torch.dtype] = []


def default_dtype() -> torch.dtype:
    if _dtype_override:
        return _dtype_override[-1]
    return torch.float64 if os.environ.get("TEDIO_F64", "0") == "1" else torch.float32


@contextlib.contextmanager
def precision(dtype: str | torch.dtype):
    """Temporarily switch the default element type ("f32" or "f64")."""
    if isinstance(dtype, str):
        dtype = {"f32": torch.float32, "f64": torch.float64}[dtype]
    _dtype_override.append(dtype)
    try:
        yield dtype
    finally:
        _dtype_override.pop()


def debug_enabled() -> bool:
    return os.environ.get("TEDIO_DEBUG", "0") == "1"


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"{what} contains NaN/Inf")
    return x


@contextlib.contextmanager
def tape():
    """Record operations for differentiation. Outside a tape nothing is recorded."""
    with torch.enable_grad():
        yield


@contextlib.contextmanager
def no_tape():
    with torch.no_grad():
        yield


def _broadcast_batch(a: Sequence[int], b: Sequence[int]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    if not _broadcast_batch(a.shape[:-2], b.shape[:-2]):
        raise DimensionError(f"matmul batch extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    out = a @ b
    return check_finite(out, "matmul output") if debug_enabled() else out


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise UsageError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    if bool(torch.isnan(x).any()):
        raise NumericError("softmax input contains NaN")
    if x.shape[axis] > 64:
        # torch subtracts the running max internally, so 1e3-scale logits stay finite
        return torch.softmax(x, dim=axis)
    # the fused kernel is slow on short rows such as F x F frame maps
    e = (x - x.amax(axis, keepdim=True)).exp()
    return e / e.sum(axis, keepdim=True)


def permute_reshape(x: torch.Tensor, axis_order: Sequence[int], new_shape: Sequence[int]) -> torch.Tensor:
    order = list(axis_order)
    if sorted(order) != list(range(x.dim())):
        raise DimensionError(f"invalid permutation {order} for shape {tuple(x.shape)}")
    if math.prod(new_shape) != x.numel():
        raise DimensionError(f"cannot reshape {tuple(x.shape)} into {tuple(new_shape)}")
    return x.permute(*order).reshape(*new_shape)


def inverse_permutation(order: Sequence[int]) -> list[int]:
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return inv


def _same_or_scalar(x: torch.Tensor, y, op: str) -> None:
    if isinstance(y, (int, float)) or (isinstance(y, torch.Tensor) and y.dim() == 0):
        return
    if x.dim() == 0:
        return
    if tuple(x.shape) != tuple(y.shape):
        raise DimensionError(f"{op} shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def add(x, y):
    _same_or_scalar(x, y, "add")
    return x + y


def sub(x, y):
    _same_or_scalar(x, y, "sub")
    return x - y


def mul(x, y):
    _same_or_scalar(x, y, "mul")
    return x * y


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


def square(x: torch.Tensor) -> torch.Tensor:
    return x * x


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def sum_all(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm expects gain/bias of shape ({d},), got {tuple(gain.shape)} and {tuple(bias.shape)}"
        )
    return F.layer_norm(x, (d,), gain, bias, eps)


def backward(
    loss: torch.Tensor, wrt: Mapping[str, torch.Tensor] | Sequence[torch.Tensor]
) -> dict:
    """Gradient of a scalar ``loss`` with respect to each leaf in ``wrt``.

    Returns a dict keyed like ``wrt`` (names, or positions for a sequence).
    The graph is retained so repeated calls give identical results.
    """
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("loss is detached from the gradient tape")
    if isinstance(wrt, Mapping):
        keys, leaves = list(wrt.keys()), list(wrt.values())
    else:
        leaves = list(wrt)
        keys = list(range(len(leaves)))
    for k, leaf in zip(keys, leaves):
        if not leaf.requires_grad:
            raise UsageError(f"leaf {k!r} does not require grad")
    grads = torch.autograd.grad(loss.reshape(()), leaves, retain_graph=True, allow_unused=True)
    return {k: (torch.zeros_like(leaf) if g is None else g) for k, leaf, g in zip(keys, leaves, grads)}


def finite_diff_gradient(
    f: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor, step: float = 1e-4
) -> torch.Tensor:
    """Central differences, one coordinate at a time. Independent of autograd."""
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    base = x.detach().clone()
    flat = base.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(base))
            flat[i] = orig - step
            fm = float(f(base))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = a.detach().double()
    b = b.detach().double()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())
