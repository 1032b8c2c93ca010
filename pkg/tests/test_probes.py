import pytest
import torch

from fwd2bot.data import VOCAB, build_corpus
from fwd2bot.errors import ConfigError, ContractError
from fwd2bot.probes import (
    COST_MODES, FULL_SCALE, CostModel, adapter_delta_norms, attention_map, attention_rows, chance_accuracy, coverage,
    flops_estimate, mask_importance, masked_accuracy, prefix_truncation_eval, storage_bytes, to_csv, to_gnuplot,
    truncation_sweep, write_outputs,
)


def test_storage_bytes():
    assert storage_bytes(32, 64, "half") == 4096
    assert storage_bytes(0, 64, "half") == 0
    assert storage_bytes(16, 4096, "float32") == 2 * storage_bytes(16, 4096, "half")
    with pytest.raises(ConfigError):
        storage_bytes(1, 1, "int8")


def test_flops_relationships():
    c = FULL_SCALE
    assert c.V == 576  # [PAPER] LLaVA-1.5 vision token count
    online = flops_estimate(c, "online_query")
    qdep = flops_estimate(c, "query_dependent_online")
    base = flops_estimate(c, "baseline")
    assert qdep.llm - online.llm == c.c * c.N_LLM * c.Q
    assert online.llm / base.llm == pytest.approx(1 / 6, abs=1e-12)
    assert (16 + 32 + 64) / (576 + 32 + 64) == 1 / 6
    off = flops_estimate(c, "offline_compress")
    assert off.vision == base.vision == 2 * 0.3e9 * 576
    assert off.llm == 2 * 7e9 * (576 + 16)
    with pytest.raises(ContractError):
        flops_estimate(c, "bogus")


@pytest.mark.parametrize("mode", COST_MODES)
def test_flops_linear_in_parameters(mode):
    a = CostModel(N_v=1e6, N_LLM=1e8, V=64, K=8, Q=4, G=2, d=32)
    b = CostModel(N_v=3e6, N_LLM=3e8, V=64, K=8, Q=4, G=2, d=32)
    assert flops_estimate(b, mode).total == pytest.approx(3 * flops_estimate(a, mode).total)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(N_v=1, N_LLM=1, V=4, K=8, Q=1, G=1, d=1)
    with pytest.raises(ConfigError):
        CostModel(N_v=0, N_LLM=1, V=4, K=2, Q=1, G=1, d=1)


def test_attention_map_shapes(tiny_model, small_corpus):
    rec = small_corpus.qa_records()[0]
    comp = attention_map(tiny_model, rec.scene, "compression")
    assert len(comp) == 2 and comp[0].shape == (4, 36)
    gen = attention_map(tiny_model, rec.scene, "generation", rec.question)
    assert gen[0].shape[1] == 4
    base = attention_map(tiny_model, rec.scene, "generation", rec.question, source="uncompressed")
    assert base[0].shape[1] == 36
    assert 0.0 <= coverage(comp) <= 1.0
    with pytest.raises(ContractError):
        attention_map(tiny_model, rec.scene, "third")
    with pytest.raises(ContractError):
        attention_map(tiny_model, rec.scene, "generation")


def test_coverage_definition():
    uniform = [torch.ones(2, 10)]
    assert coverage(uniform) == 1.0
    peaked = [torch.zeros(2, 10)]
    peaked[0][:, 3] = 1.0
    assert coverage(peaked) == 0.1


def test_compression_attention_rows_sum_to_heads(tiny_model, small_corpus):
    hv = tiny_model.encode_scene(small_corpus.scenes[0])
    _, atts = tiny_model.compress(hv, need_attention=True)
    for a in atts:
        assert torch.allclose(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-6)


def test_masking_and_truncation(tiny_model, small_corpus):
    recs = small_corpus.qa_records()[:10]
    rep = mask_importance(tiny_model, recs, 3)
    assert rep.groups == ((0, 1, 2), (3,))
    assert masked_accuracy(tiny_model, recs, ()) == rep.baseline
    assert prefix_truncation_eval(tiny_model, recs, 4) == rep.baseline
    assert [m for m, _ in truncation_sweep(tiny_model, recs)] == [1, 2, 4]
    with pytest.raises(ContractError):
        prefix_truncation_eval(tiny_model, recs, 5)
    with pytest.raises(ContractError):
        prefix_truncation_eval(tiny_model, recs, 0)
    with pytest.raises(ContractError):
        masked_accuracy(tiny_model, recs, [4])


def test_chance_baseline_is_majority_per_question():
    corpus = build_corpus(0, 300, qa_per_scene=2)
    train, held = corpus.split(50)
    c = chance_accuracy(train.records, held.records)
    assert 0.3 < c < 0.7


def test_delta_norm_rows(tiny_model):
    rows = adapter_delta_norms(tiny_model)
    assert len(rows) == 24 and all(r[3] == 0.0 for r in rows)
    assert rows[0][:3] == ("compression", 0, "w1")


def test_csv_and_gnuplot_output(tmp_path):
    rows = [(1, 0.5), (2, 0.25)]
    assert to_csv(["m", "acc"], rows) == "m,acc\n1,0.500000\n2,0.250000\n"
    assert to_gnuplot(["m", "acc"], rows) == "# m acc\n1 0.500000\n2 0.250000\n"
    write_outputs(tmp_path / "p.csv", ["m", "acc"], rows, gnuplot=True)
    assert (tmp_path / "p.dat").exists()
    assert len(attention_rows([torch.ones(2, 3)])) == 6
