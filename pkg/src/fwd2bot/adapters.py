"""Low-rank adapters with one independent set per forward-pass stage."""

from __future__ import annotations

import torch
from torch import nn

from . import numerics as nx
from .errors import ContractError, DimensionError

STAGES = ("compression", "generation")
SHARED = "shared"
TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")


class LoraAdapter(nn.Module):
    """Update ``alpha * B @ A`` for a base matrix of shape ``d_in x m``."""

    def __init__(self, d_in: int, m: int, rank: int, alpha: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if not 0 < rank < min(d_in, m):
            raise ContractError(f"rank {rank} must be in (0, min({d_in}, {m}))")
        self.rank = rank
        self.alpha = alpha
        self.A = nn.Parameter(torch.randn(rank, m, generator=generator) * 0.02)
        self.B = nn.Parameter(torch.zeros(d_in, rank))

    def delta(self) -> torch.Tensor:
        return self.alpha * (self.B @ self.A)

    def delta_norm(self) -> float:
        """Frobenius norm of the update from the factors: tr((B^T B)(A A^T))."""
        with torch.no_grad():
            gram = (self.B.T @ self.B) * (self.A @ self.A.T)
            return abs(self.alpha) * float(gram.sum().clamp_min(0).sqrt())


def adapted_linear(x: torch.Tensor, w_base: torch.Tensor, adapter: LoraAdapter | None = None) -> torch.Tensor:
    """``x @ (W + alpha B A)`` without materialising the update."""
    y = nx.matmul(x, w_base, check=False)
    if adapter is None:
        return y
    if adapter.B.shape[0] != w_base.shape[0] or adapter.A.shape[1] != w_base.shape[1]:
        raise DimensionError(
            f"adapter {tuple(adapter.B.shape)}x{tuple(adapter.A.shape)} does not fit base {tuple(w_base.shape)}"
        )
    return y + adapter.alpha * nx.matmul(nx.matmul(x, adapter.B, check=False), adapter.A, check=False)


def target_key(layer: int, target: str) -> str:
    return f"layers_{layer}_{target}"


class AdapterSet(nn.Module):
    def __init__(self, stage: str, shapes: dict[str, tuple[int, int]], rank: int, alpha: float, generator=None):
        super().__init__()
        self.stage = stage
        self.adapters = nn.ModuleDict(
            {k: LoraAdapter(d_in, m, rank, alpha, generator) for k, (d_in, m) in shapes.items()}
        )

    def get(self, layer: int, target: str) -> LoraAdapter | None:
        return self.adapters[target_key(layer, target)] if target_key(layer, target) in self.adapters else None

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


class AdapterBank(nn.Module):
    """The adapter sets of a model plus the stage currently selected.

    In ``stage`` mode there is one set per stage; in ``single`` mode one set
    is shared and stage selection has no effect.
    """

    def __init__(self, shapes: dict[str, tuple[int, int]], rank: int, alpha: float, mode: str = "stage", seed: int = 0):
        super().__init__()
        if mode not in ("stage", "single"):
            raise ContractError(f"unknown adapter mode {mode!r}")
        g = torch.Generator().manual_seed(seed)
        self.mode = mode
        names = STAGES if mode == "stage" else (SHARED,)
        self.sets = nn.ModuleDict({n: AdapterSet(n, shapes, rank, alpha, g) for n in names})
        self.active: str | None = None

    def select_stage(self, stage: str | None) -> None:
        if stage is not None and stage not in STAGES:
            raise ContractError(f"unknown stage {stage!r}")
        self.active = stage

    def for_stage(self, stage: str | None) -> AdapterSet | None:
        if stage is None:
            return None
        if stage not in STAGES:
            raise ContractError(f"unknown stage {stage!r}")
        return self.sets[SHARED] if self.mode == "single" else self.sets[stage]

    def merge_single(self) -> None:
        """Switch to one shared set (the compression set is kept)."""
        if self.mode == "single":
            return
        shared = self.sets["compression"]
        shared.stage = SHARED
        self.sets = nn.ModuleDict({SHARED: shared})
        self.mode = "single"

    def n_params(self) -> int:
        return sum(s.n_params() for s in self.sets.values())

    def delta_norms(self) -> list[tuple[str, int, str, float]]:
        """(set, layer, target, ||BA||_F) for every adapter."""
        out = []
        for name, s in self.sets.items():
            for key, ad in s.adapters.items():
                _, layer, target = key.split("_")
                out.append((name, int(layer), target, ad.delta_norm()))
        return out


def select_stage(model, stage: str) -> None:
    model.select_stage(stage)


def merge_single(model) -> None:
    model.merge_single()
