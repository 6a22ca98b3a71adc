"""Dense tensor primitives with reverse-mode autodiff.

All model and loss code is written against the functions in this module.
Tensors are ``torch.Tensor`` objects; the autograd graph recorded by torch
plays the role of the tape and :func:`backward` is the only entry point used
to run it. :func:`finite_diff_grad` is a pure-numpy float64 oracle and shares
no code with the analytic path.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = torch.float32
FD_STEP = 1e-3


def tensor(data, dtype: torch.dtype = DEFAULT_DTYPE, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with per-row max subtraction.

    Rows that are entirely ``-inf`` (fully masked) come back as zeros rather
    than NaN.
    """
    row_max = x.max(dim=-1, keepdim=True).values
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    e = torch.exp(x - row_max.detach())
    denom = e.sum(dim=-1, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: gain {tuple(gain.shape)} / bias {tuple(bias.shape)} "
            f"do not match last dim of {tuple(x.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def masked_mean(x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean over the sequence axis (-2) of ``x`` counting only ``keep`` slots."""
    w = keep.to(x.dtype).unsqueeze(-1)
    count = w.sum(dim=-2).clamp_min(1.0)
    return (x * w).sum(dim=-2) / count


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) "
            f"(min {int(ids.min())}, max {int(ids.max())})"
        )
    return table[ids]


def concat_seq(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat(list(parts), dim=-2)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``.

    Accumulates in float64 with elementwise products summed along the last
    axis, so ``cosine_matrix(a, b)`` is bit-for-bit ``cosine_matrix(b, a).T``.
    Zero-norm rows are a contract violation.
    """
    a64 = a.to(torch.float64)
    b64 = b.to(torch.float64)
    na = torch.sqrt((a64 * a64).sum(dim=-1))
    nb = torch.sqrt((b64 * b64).sum(dim=-1))
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ContractError("cosine similarity of a zero-norm representation")
    dots = (a64[:, None, :] * b64[None, :, :]).sum(dim=-1)
    return dots / (na[:, None] * nb[None, :])


def backward(loss: torch.Tensor, leaves: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Run reverse mode from a scalar ``loss``.

    Returns gradients for ``leaves`` (zeros for leaves the loss does not
    reach), keyed like the input mapping.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if leaves is None:
        loss.backward()
        return {}
    names = list(leaves)
    tensors = [leaves[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(t))
        for n, t, g in zip(names, tensors, grads)
    }


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_mismatch(analytic, numeric, rtol: float = 1e-3, tiny: float = 1e-6) -> float:
    """Worst violation ratio between analytic and numeric gradients.

    Elements with ``|analytic| >= tiny`` are compared relatively, the rest
    absolutely against ``tiny``. A value <= 1 means every element passes.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    err = np.abs(a - n)
    big = np.abs(a) >= tiny
    ratio = np.where(big, err / (rtol * np.maximum(np.abs(a), 1e-300)), err / tiny)
    return float(ratio.max())
