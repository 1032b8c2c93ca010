"""Diagnostics over trained checkpoints plus inference cost accounting.

Every probe is a pure function of its inputs; CSV output uses fixed float
formatting so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .data import Record, Scene
from .errors import ConfigError, ContractError
from .inference import GenerationParams, answer_records, compress_scenes, generate_batch
from .model import Fwd2BotModel

PASSES = ("compression", "generation")


# -- attention ---------------------------------------------------------------


@torch.no_grad()
def attention_map(
    model: Fwd2BotModel,
    scene: Scene,
    pass_: str = "compression",
    question: Sequence[int] | None = None,
    source: str = "compressed",
) -> list[torch.Tensor]:
    """Per-layer attention, summed over heads and restricted to the probed rows.

    ``compression``: summary rows over vision columns, ``[k', k]``.
    ``generation``: the rows that emit each generated token (the closing EOS
    included) over the prefix columns. The prefix is the compressed tokens,
    or all vision tokens on base weights when ``source="uncompressed"``.
    """
    if pass_ not in PASSES:
        raise ContractError(f"pass must be one of {PASSES}")
    k, ks = model.cfg.k_vision, model.cfg.k_summary
    h_v = model.encode_scene(scene)
    if pass_ == "compression":
        _, atts = model.compress(h_v, need_attention=True)
        return [a.sum(dim=0)[-ks:, :k] for a in atts]
    if question is None:
        raise ContractError("the generation pass needs a question")
    if source == "compressed":
        prefix, stage = model.compress(h_v), "generation"
    elif source == "uncompressed":
        prefix, stage = h_v, None
    else:
        raise ContractError(f"unknown prefix source {source!r}")
    params = GenerationParams(max_new_tokens=3)
    answer = generate_batch(model, [prefix], [list(question)], params, stage=stage)[0]
    seq = torch.cat([prefix, model.embed_tokens(list(question)), model.embed_tokens(answer)])
    out = model.forward(seq, stage=stage, need_attention=True)
    n = len(answer) + 1
    p = prefix.shape[0]
    return [a.sum(dim=0)[-n:, :p] for a in out.attention]


def coverage(maps: Sequence[torch.Tensor]) -> float:
    """Fraction of columns whose share of the cumulative weight exceeds half of uniform."""
    total = torch.stack([m.sum(dim=0) for m in maps]).sum(dim=0)
    share = total / total.sum()
    return float((share > 0.5 / share.numel()).double().mean())


# -- masking -----------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceReport:
    group_size: int
    baseline: float
    groups: tuple[tuple[int, ...], ...]
    drops: tuple[float, ...]

    def rows(self) -> list[tuple[str, float]]:
        return [("-".join(map(str, g)), d) for g, d in zip(self.groups, self.drops)]


def _accuracy(preds: Sequence[Sequence[int]], records: Sequence[Record]) -> float:
    return sum(list(p) == list(r.answer) for p, r in zip(preds, records)) / len(records)


def _compressed(model: Fwd2BotModel, records: Sequence[Record]) -> dict[str, torch.Tensor]:
    scenes: dict[str, Scene] = {}
    for r in records:
        scenes.setdefault(r.image_id, r.scene)
    ids = list(scenes)
    return dict(zip(ids, compress_scenes(model, [scenes[i] for i in ids])))


def masked_accuracy(
    model: Fwd2BotModel,
    records: Sequence[Record],
    indices: Iterable[int] = (),
    hc_by_id: dict[str, torch.Tensor] | None = None,
) -> float:
    """QA exact match with the given summary-token rows zeroed (positions kept)."""
    records = [r for r in records if r.has_qa]
    if not records:
        raise ContractError("no QA records to evaluate")
    idx = sorted(set(indices))
    if any(not 0 <= i < model.cfg.k_summary for i in idx):
        raise ContractError(f"mask index outside 0..{model.cfg.k_summary - 1}")
    hc_by_id = hc_by_id if hc_by_id is not None else _compressed(model, records)

    def zero(h: torch.Tensor) -> torch.Tensor:
        if not idx:
            return h
        h = h.clone()
        h[idx] = 0
        return h

    return _accuracy(answer_records(model, records, hc_by_id=hc_by_id, transform=zero), records)


def mask_importance(model: Fwd2BotModel, records: Sequence[Record], group_size: int) -> ImportanceReport:
    """Accuracy drop from zeroing each contiguous group of summary tokens in turn."""
    if group_size < 1:
        raise ContractError("group_size must be positive")
    records = [r for r in records if r.has_qa]
    hc = _compressed(model, records)
    base = masked_accuracy(model, records, (), hc)
    ks = model.cfg.k_summary
    groups = tuple(tuple(range(s, min(s + group_size, ks))) for s in range(0, ks, group_size))
    drops = tuple(base - masked_accuracy(model, records, g, hc) for g in groups)
    return ImportanceReport(group_size, base, groups, drops)


def chance_accuracy(train_records: Sequence[Record], eval_records: Sequence[Record]) -> float:
    """Blind baseline: answer each question with its most frequent training answer."""
    by_q: dict[tuple[int, ...], Counter] = {}
    overall: Counter = Counter()
    for r in train_records:
        if r.has_qa:
            by_q.setdefault(tuple(r.question), Counter())[tuple(r.answer)] += 1
            overall[tuple(r.answer)] += 1
    evals = [r for r in eval_records if r.has_qa]
    if not evals or not overall:
        raise ContractError("chance_accuracy needs QA records on both sides")

    def guess(q):
        c = by_q.get(tuple(q), overall)
        return min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    return sum(guess(r.question) == tuple(r.answer) for r in evals) / len(evals)


# -- truncation --------------------------------------------------------------


def prefix_truncation_eval(
    model: Fwd2BotModel,
    records: Sequence[Record],
    m: int,
    hc_by_id: dict[str, torch.Tensor] | None = None,
) -> float:
    """QA exact match when generation sees only the first ``m`` summary tokens."""
    if m < 1:
        raise ContractError("m must be at least 1")
    if m > model.cfg.k_summary:
        raise ContractError(f"m={m} exceeds k_summary={model.cfg.k_summary}")
    records = [r for r in records if r.has_qa]
    hc_by_id = hc_by_id if hc_by_id is not None else _compressed(model, records)
    return _accuracy(answer_records(model, records, hc_by_id=hc_by_id, transform=lambda h: h[:m]), records)


def truncation_sweep(model: Fwd2BotModel, records: Sequence[Record], ms: Sequence[int] = (1, 2, 4, 8)) -> list[tuple[int, float]]:
    records = [r for r in records if r.has_qa]
    hc = _compressed(model, records)
    return [(m, prefix_truncation_eval(model, records, m, hc)) for m in ms if m <= model.cfg.k_summary]


# -- adapters ----------------------------------------------------------------


def adapter_delta_norms(model: Fwd2BotModel) -> list[tuple[str, int, str, float]]:
    """(set, layer, target, Frobenius norm of the update) for every adapter."""
    if model.lora is None:
        raise ContractError("checkpoint has no adapters")
    return sorted(model.lora.delta_norms(), key=lambda r: (r[0], r[1], r[2]))


# -- cost accounting ---------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    N_v: float
    N_LLM: float
    V: int
    K: int
    Q: int
    G: int
    d: int
    c: float = 2.0

    def __post_init__(self):
        if min(self.N_v, self.N_LLM, self.V, self.K, self.Q, self.G, self.d, self.c) <= 0:
            raise ConfigError("cost model fields must be positive")
        if self.K > self.V:
            raise ConfigError("K must not exceed V")


# LLaVA-1.5-7B scale: CLIP ViT-L/336 encoder, 576 vision tokens
FULL_SCALE = CostModel(N_v=0.3e9, N_LLM=7e9, V=576, K=16, Q=32, G=64, d=4096)

COST_MODES = ("baseline", "offline_compress", "online_query", "query_dependent_online")


@dataclass(frozen=True)
class FlopsEstimate:
    vision: float
    llm: float

    @property
    def total(self) -> float:
        return self.vision + self.llm


def flops_estimate(cost: CostModel, mode: str) -> FlopsEstimate:
    """Token-FLOPs ``c * N * T`` for the vision encoder and the decoder."""
    c = cost.c
    if mode == "baseline":
        return FlopsEstimate(c * cost.N_v * cost.V, c * cost.N_LLM * (cost.V + cost.Q + cost.G))
    if mode == "offline_compress":
        return FlopsEstimate(c * cost.N_v * cost.V, c * cost.N_LLM * (cost.V + cost.K))
    if mode == "online_query":
        return FlopsEstimate(0.0, c * cost.N_LLM * (cost.K + cost.Q + cost.G))
    if mode == "query_dependent_online":
        return FlopsEstimate(0.0, c * cost.N_LLM * (cost.K + 2 * cost.Q + cost.G))
    raise ContractError(f"mode must be one of {COST_MODES}")


ELEMENT_BYTES = {"half": 2, "float32": 4}


def storage_bytes(K: int, d: int, dtype: str = "half") -> int:
    if dtype not in ELEMENT_BYTES:
        raise ConfigError(f"unknown dtype {dtype!r}")
    if K < 0 or d < 0:
        raise ContractError("K and d must be non-negative")
    return ELEMENT_BYTES[dtype] * K * d


# -- output ------------------------------------------------------------------


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def to_gnuplot(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Whitespace-separated columns under a ``#`` header line."""
    lines = ["# " + " ".join(header)]
    lines += [" ".join(_fmt(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def write_outputs(path: str | Path, header: Sequence[str], rows: Sequence[Sequence], gnuplot: bool = False) -> None:
    """Write ``path`` as CSV and, with ``gnuplot``, a sibling ``.dat`` file."""
    path = Path(path)
    path.write_text(to_csv(header, rows), encoding="utf-8")
    if gnuplot:
        path.with_suffix(".dat").write_text(to_gnuplot(header, rows), encoding="utf-8")


def attention_rows(maps: Sequence[torch.Tensor]) -> list[tuple[int, int, int, float]]:
    """Long-format ``(layer, row, col, weight)`` rows for plotting."""
    out = []
    for layer, m in enumerate(maps):
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                out.append((layer, i, j, float(m[i, j])))
    return out
