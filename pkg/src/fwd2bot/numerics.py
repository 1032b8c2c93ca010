"""Differentiable primitives and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
torch autograd. This module adds the shape/finiteness contracts the rest of
the package relies on and the central-difference oracle used to verify them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

Tensor = torch.Tensor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def tensor(data, dtype: str | torch.dtype = "float32", requires_grad: bool = False) -> Tensor:
    if isinstance(dtype, str):
        dtype = DTYPES[dtype]
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    _check_finite(t, op="tensor")
    return t.requires_grad_(requires_grad)


def _check_finite(*xs: Tensor, op: str) -> None:
    for x in xs:
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"{op}: non-finite input")


def matmul(a: Tensor, b: Tensor, check: bool = True) -> Tensor:
    """Batched matrix product. ``check=False`` skips the finiteness scan (hot paths)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if check:
        _check_finite(a, b, op="matmul")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax: axis {axis} invalid for rank {x.dim()}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax: empty axis")
    # torch's kernel subtracts the row max before exponentiating
    return torch.softmax(x, dim=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax: empty axis")
    return torch.log_softmax(x, dim=axis)


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[V]`` with an integer target, or ``[N, V]`` with ``N``
    targets; ``reduction`` applies to the batched form only.
    """
    vocab = logits.shape[-1]
    tgt = torch.as_tensor(target, dtype=torch.long)
    if tgt.numel() and (int(tgt.min()) < 0 or int(tgt.max()) >= vocab):
        raise IndexError(f"cross_entropy: target out of range for V={vocab}")
    logp = log_softmax(logits, axis=-1)
    if logits.dim() == 1:
        return -logp[tgt]
    nll = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: shapes {tuple(u.shape)} and {tuple(v.shape)}")
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if float(nu) == 0.0 or float(nv) == 0.0:
        raise DegenerateInputError("cosine_sim: zero vector")
    return (u * v).sum() / (nu * nv)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("cosine_matrix: zero row")
    return matmul(a / na, (b / nb).transpose(-1, -2))


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * scale`` over the last axis."""
    return F.rms_norm(x, (x.shape[-1],), scale, eps)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    return F.gelu(x, approximate="tanh")


def embedding(table: Tensor, ids) -> Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    return table[ids]


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Parameters listed in ``params`` that the loss does not depend on get an
    explicit zero gradient instead of ``None``.
    """
    if loss.dim() != 0:
        raise ContractError(f"backward: root must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-6,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Worst elementwise relative error between autograd and central differences.

    ``fn`` is re-evaluated with each checked element nudged by ``±eps``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``sample``,
    only that many randomly chosen elements per parameter are checked.
    """
    for p in params:
        p.grad = None
    backward(fn(), params)
    analytic = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if sample is not None and sample < flat.numel():
                idx = rng.choice(flat.numel(), size=sample, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = g.view(-1)[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst
