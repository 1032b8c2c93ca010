import math

import pytest
import torch

from fwd2bot.data import VOCAB
from fwd2bot.errors import ConfigError, ContractError
from fwd2bot.inference import (
    GenerationParams, RetrievalIndex, answer_records, embed_text, generate, generate_batch, pool, rank_all,
    recall_at_k, retrieval_recall, retrieve, write_ranked_csv, zero_shot_embed, zero_shot_recall,
)


def test_pool_of_constant_rows_is_that_row_normalized():
    row = torch.tensor([3.0, 4.0])
    assert torch.allclose(pool(row.expand(5, 2)), torch.tensor([0.6, 0.8]))


def test_retrieve_orders_by_score_then_id():
    v = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
    idx = RetrievalIndex(["b", "c", "a", "d"], v)
    got = retrieve(idx, torch.tensor([2.0, 0.0]), 4)
    assert [g[0] for g in got] == ["a", "b", "d", "c"]
    assert got[0][1] == pytest.approx(1.0)
    with pytest.raises(ContractError):
        retrieve(idx, torch.tensor([1.0, 0.0]), 5)
    with pytest.raises(ContractError):
        retrieve(RetrievalIndex([], torch.zeros(0, 2)), torch.ones(2), 1)


def test_rank_all_and_recall():
    idx = RetrievalIndex(["x", "y"], torch.eye(2))
    ranked = rank_all(idx, torch.tensor([[0.0, 1.0], [0.0, 1.0]]))
    assert ranked == [["y", "x"], ["y", "x"]]
    assert recall_at_k(ranked, ["y", "x"], 1) == 0.5
    assert recall_at_k(ranked, ["y", "x"], 2) == 1.0
    with pytest.raises(ContractError):
        recall_at_k(ranked, ["y"], 1)


def test_ranked_csv_format():
    import io

    buf = io.StringIO()
    write_ranked_csv([("q0", 1, "img00003", 0.5)], buf)
    assert buf.getvalue() == "query_id,rank,image_id,score\nq0,1,img00003,0.500000\n"


def test_generate_validates_summary_shape(tiny_model):
    q = VOCAB.tokenize("how many circles")
    with pytest.raises(ConfigError):
        generate(tiny_model, torch.randn(5, 16), q)
    with pytest.raises(ConfigError):
        generate(tiny_model, torch.randn(4, 8), q)
    out = generate(tiny_model, torch.randn(2, 16), q, GenerationParams(3))
    assert len(out) <= 3
    with pytest.raises(ContractError):
        GenerationParams(0)


def test_batched_generation_matches_single(tiny_model):
    qs = [VOCAB.tokenize("how many circles"), VOCAB.tokenize("is there a square"), VOCAB.tokenize("what color is the triangle")]
    prefixes = [torch.randn(4, 16, generator=torch.Generator().manual_seed(i)) for i in range(3)]
    batch = generate_batch(tiny_model, prefixes, qs)
    for p, q, b in zip(prefixes, qs, batch):
        assert generate(tiny_model, p, q) == b


def test_answer_sources(tiny_model, small_corpus):
    recs = small_corpus.qa_records()[:6]
    for src in ("compressed", "uncompressed"):
        assert len(answer_records(tiny_model, recs, source=src)) == 6
    with pytest.raises(ContractError):
        answer_records(tiny_model, recs, source="pooled")
    with pytest.raises(ContractError):
        answer_records(tiny_model, recs, source="telepathy")


def test_embed_text_single_and_batch(tiny_model):
    caps = [VOCAB.tokenize("a red circle"), VOCAB.tokenize("a blue square and a red circle")]
    one = embed_text(tiny_model, caps[0])
    both = embed_text(tiny_model, caps)
    assert one.shape == (16,) and both.shape == (2, 16)
    assert torch.allclose(both[0], one, atol=1e-5)
    assert torch.linalg.vector_norm(one).item() == pytest.approx(1.0)


def test_recall_helpers_run_on_untrained_model(tiny_model, small_corpus):
    pairs = small_corpus.caption_pairs()[:8]
    for fn in (retrieval_recall, zero_shot_recall):
        r = fn(tiny_model, pairs)
        assert 0.0 <= r <= 1.0 and not math.isnan(r)
    assert zero_shot_embed(tiny_model, pairs[0][1]).shape == (16,)
