import numpy as np
import pytest
import torch

from fwd2bot.data import Record, Scene, build_corpus
from fwd2bot.model import Fwd2BotModel, ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=16, n_layers=2, n_heads=2, ffn_width=32, k_vision=36, k_summary=4, max_seq_len=64, lora_rank=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return Fwd2BotModel(tiny_cfg, seed=3)


@pytest.fixture
def randomized_adapters():
    """Give every adapter a nonzero B so adapter paths carry signal."""

    def apply(model, seed=0, scale=0.05):
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.startswith("lora.") and name.endswith(".B"):
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
        return model

    return apply


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(7, 96, qa_per_scene=2)


def micro_setup():
    """A <500-parameter float64 model and a two-sample batch of synthetic tokens."""
    cfg = ModelConfig(
        d_model=4, n_layers=1, n_heads=1, ffn_width=8, vocab_size=12, k_vision=4, k_summary=2,
        max_seq_len=8, lora_rank=1, prompt_len=1,
    )
    model = Fwd2BotModel(cfg, seed=11).double()
    rng = np.random.default_rng(0)
    scenes = [Scene(2, 2, (1, 0, 5, 0)), Scene(2, 2, (0, 9, 0, 12))]
    records = [
        Record(scenes[0], caption=[7, 8, 9], question=[10, 7], answer=[11]),
        Record(scenes[1], caption=[9, 10], question=[8, 11], answer=[7, 9]),
    ]
    return model, records, rng
