"""Answer generation and retrieval from compressed summary tokens."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import EOS, Scene
from .errors import ConfigError, ContractError
from .model import Fwd2BotModel


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 4

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be at least 1")


def _check_hc(model: Fwd2BotModel, hc: torch.Tensor) -> None:
    k, d = model.cfg.k_summary, model.cfg.d_model
    if hc.dim() != 2 or hc.shape[1] != d or not 1 <= hc.shape[0] <= k:
        raise ConfigError(f"compressed tokens {tuple(hc.shape)} do not match model ({k}, {d})")


@torch.no_grad()
def generate_batch(
    model: Fwd2BotModel,
    prefixes: Sequence[torch.Tensor],
    queries: Sequence[Sequence[int]],
    params: GenerationParams = GenerationParams(),
    stage: str | None = "generation",
) -> list[list[int]]:
    """Greedy decoding over ``[prefix ; query ; generated...]`` for a batch.

    Returns each answer without the end-of-sequence token.
    """
    query_rows = [model.embed_tokens(list(q)) for q in queries]
    generated: list[list[int]] = [[] for _ in prefixes]
    done = [False] * len(prefixes)
    for _ in range(params.max_new_tokens):
        segs = []
        for p, q, g in zip(prefixes, query_rows, generated):
            segs.append([p, q, model.embed_tokens(g)] if g else [p, q])
        inputs, pos, valid = model.pack(segs)
        logits = model.forward(inputs, stage=stage, positions=pos, valid=valid).logits[:, -1]
        nxt = logits.argmax(dim=-1).tolist()
        for i, t in enumerate(nxt):
            if done[i]:
                continue
            if t == EOS:
                done[i] = True
            else:
                generated[i].append(t)
        if all(done):
            break
    return generated


def generate(
    model: Fwd2BotModel,
    hc: torch.Tensor,
    query_tokens: Sequence[int],
    params: GenerationParams = GenerationParams(),
) -> list[int]:
    """Answer one query from compressed tokens only."""
    _check_hc(model, hc)
    return generate_batch(model, [hc.to(model.dtype)], [query_tokens], params)[0]


@torch.no_grad()
def compress_scenes(model: Fwd2BotModel, scenes: Sequence[Scene], chunk: int = 128) -> torch.Tensor:
    """``[N, k_summary, d]`` compressed tokens, computed in fixed-size chunks."""
    out = [model.compress(model.encode_scene(list(scenes[i: i + chunk]))) for i in range(0, len(scenes), chunk)]
    return torch.cat(out) if out else torch.zeros(0, model.cfg.k_summary, model.cfg.d_model)


def pool(hc: torch.Tensor) -> torch.Tensor:
    """Mean over summary tokens, unit-normalized."""
    e = hc.mean(dim=-2)
    return e / torch.linalg.vector_norm(e, dim=-1, keepdim=True)


@torch.no_grad()
def embed_text(model: Fwd2BotModel, caption_tokens, chunk: int = 128) -> torch.Tensor:
    """Pooled unit-norm text embedding for one caption (``[d]``) or a list (``[N, d]``)."""
    if len(caption_tokens) and isinstance(caption_tokens[0], (int, np.integer)):
        return pool(model.compress_text(list(caption_tokens)))
    parts = [model.compress_text(caption_tokens[i: i + chunk]) for i in range(0, len(caption_tokens), chunk)]
    return pool(torch.cat(parts))


@dataclass
class RetrievalIndex:
    ids: list[str]
    vectors: torch.Tensor

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise ContractError("one vector per id required")

    @classmethod
    def from_compressed(cls, ids: Sequence[str], hc: torch.Tensor) -> "RetrievalIndex":
        return cls(list(ids), pool(hc.float()))

    def __len__(self) -> int:
        return len(self.ids)


def retrieve(index: RetrievalIndex, e_t: torch.Tensor, topk: int) -> list[tuple[str, float]]:
    """Ids by descending cosine similarity; equal scores ordered by id."""
    if len(index) == 0:
        raise ContractError("empty index")
    if not 1 <= topk <= len(index):
        raise ContractError(f"topk={topk} outside 1..{len(index)}")
    q = e_t.float() / torch.linalg.vector_norm(e_t.float())
    scores = (index.vectors @ q).tolist()
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], scores[i]) for i in order[:topk]]


def rank_all(index: RetrievalIndex, queries: torch.Tensor) -> list[list[str]]:
    """Full ranking of the index for each row of ``queries``."""
    q = queries.float() / torch.linalg.vector_norm(queries.float(), dim=-1, keepdim=True)
    scores = (q @ index.vectors.T).tolist()
    return [[index.ids[i] for i in sorted(range(len(index)), key=lambda i: (-row[i], index.ids[i]))] for row in scores]


def recall_at_k(ranked: Sequence[Sequence[str]], truth: Sequence[str], k: int) -> float:
    if len(ranked) != len(truth) or any(t is None for t in truth):
        raise ContractError("every query needs exactly one ground-truth id")
    if not ranked:
        raise ContractError("no queries")
    return sum(1 for r, t in zip(ranked, truth) if t in r[:k]) / len(ranked)


@torch.no_grad()
def zero_shot_embed(model: Fwd2BotModel, item: Scene | Sequence[int]) -> torch.Tensor:
    """Last-token state of ``[input ; prompt]`` on base weights (no summary tokens)."""
    if isinstance(item, Scene):
        rows = model.encode_scene(item)
    else:
        rows = model.embed_tokens(list(item))
    seq = torch.cat([rows, model.prompt_embeddings()])
    return model.last_token_embedding(seq, stage=None)


def write_ranked_csv(rows: Iterable[tuple[str, int, str, float]], fh: io.TextIOBase) -> None:
    """``query_id, rank, image_id, score`` lines."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["query_id", "rank", "image_id", "score"])
    for qid, rank, iid, score in rows:
        w.writerow([qid, rank, iid, f"{score:.6f}"])


# -- evaluation ------------------------------------------------------------


@torch.no_grad()
def answer_records(
    model: Fwd2BotModel,
    records: Sequence,
    source: str = "compressed",
    hc_by_id: dict[str, torch.Tensor] | None = None,
    transform=None,
    params: GenerationParams = GenerationParams(max_new_tokens=3),
    chunk: int = 128,
) -> list[list[int]]:
    """Greedy answers for QA records.

    ``source`` is ``compressed`` (summary tokens, optionally supplied through
    ``hc_by_id`` and altered by ``transform``), ``uncompressed`` (all vision
    tokens on base weights) or ``pooled`` (input-space baseline).
    """
    records = [r for r in records if r.has_qa]
    if source == "compressed" and hc_by_id is None:
        scenes, ids = {}, []
        for r in records:
            if r.image_id not in scenes:
                scenes[r.image_id] = r.scene
                ids.append(r.image_id)
        hc = compress_scenes(model, [scenes[i] for i in ids], chunk)
        hc_by_id = dict(zip(ids, hc))
    preds: list[list[int]] = []
    for i in range(0, len(records), chunk):
        part = records[i: i + chunk]
        if source == "compressed":
            prefixes = [hc_by_id[r.image_id].to(model.dtype) for r in part]
            if transform is not None:
                prefixes = [transform(p) for p in prefixes]
            stage = "generation"
        elif source == "uncompressed":
            prefixes = list(model.encode_scene([r.scene for r in part]))
            stage = None
        elif source == "pooled":
            prefixes = list(model.pool(model.encode_scene([r.scene for r in part])))
            stage = "generation"
        else:
            raise ContractError(f"unknown answer source {source!r}")
        preds += generate_batch(model, prefixes, [r.question for r in part], params, stage=stage)
    return preds


def qa_accuracy(model: Fwd2BotModel, records: Sequence, **kwargs) -> float:
    """Exact-match accuracy over the QA records."""
    records = [r for r in records if r.has_qa]
    if not records:
        raise ContractError("no QA records to evaluate")
    preds = answer_records(model, records, **kwargs)
    return sum(p == list(r.answer) for p, r in zip(preds, records)) / len(records)


@torch.no_grad()
def retrieval_recall(model: Fwd2BotModel, pairs: Sequence[tuple[str, Scene, list[int]]], k: int = 1) -> float:
    """Text-to-image recall@k over (image id, scene, caption) pairs."""
    ids = [p[0] for p in pairs]
    index = RetrievalIndex.from_compressed(ids, compress_scenes(model, [p[1] for p in pairs]))
    ranked = rank_all(index, embed_text(model, [p[2] for p in pairs]))
    return recall_at_k(ranked, ids, k)


@torch.no_grad()
def zero_shot_recall(model: Fwd2BotModel, pairs: Sequence[tuple[str, Scene, list[int]]], k: int = 1) -> float:
    ids = [p[0] for p in pairs]
    img = torch.stack([zero_shot_embed(model, p[1]) for p in pairs])
    txt = torch.stack([zero_shot_embed(model, p[2]) for p in pairs])
    index = RetrievalIndex(ids, img / torch.linalg.vector_norm(img, dim=-1, keepdim=True))
    return recall_at_k(rank_all(index, txt), ids, k)
