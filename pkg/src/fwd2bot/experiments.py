"""The toy benchmark shared by the ablation scripts and the acceptance suite.

2048 training scenes plus 256 held-out scenes, four QA pairs per scene.
Trained checkpoints are cached on disk keyed by variant, seed and step
count, so repeated evaluations do not retrain.
"""

from __future__ import annotations

import math
import os
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .data import Corpus, build_corpus
from .inference import qa_accuracy, retrieval_recall
from .model import Fwd2BotModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer, derive_model, pretrain

N_TRAIN = 2048
N_HELDOUT = 256
QA_PER_SCENE = 4
CACHE_ENV = "FWD2BOT_CACHE"

VARIANTS = {
    "joint": {},
    "generative": {"loss_mode": "generative"},
    "discriminative": {"loss_mode": "discriminative"},
    "single_forward": {"method": "single"},
}
MODEL_VARIANTS = {"single_lora": {"adapter_mode": "single"}, "bidirectional": {"attention_mode_compression": "bidirectional"}}


def cache_dir() -> Path:
    d = Path(os.environ.get(CACHE_ENV, Path.cwd() / ".fwd2bot_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def config_tag(*cfgs) -> str:
    """Short digest of the configs a cached artifact depends on."""
    return f"{zlib.crc32(repr(cfgs).encode()):08x}"


def _base_stem(seed: int, cfg: TrainConfig, model_cfg: ModelConfig) -> Path:
    pre = (cfg.pretrain_steps, cfg.pretrain_lr, cfg.pretrain_caption_frac, cfg.batch_size, cfg.weight_decay,
           cfg.warmup_steps, cfg.schedule, cfg.clip_norm)
    return cache_dir() / f"base_s{seed}_p{cfg.pretrain_steps}_{config_tag(pre, model_cfg)}"


def benchmark_corpus(seed: int) -> tuple[Corpus, Corpus]:
    corpus = build_corpus(seed, N_TRAIN + N_HELDOUT, qa_per_scene=QA_PER_SCENE)
    return corpus.split(N_HELDOUT)


def base_model(seed: int, cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None) -> Fwd2BotModel:
    """Pretrained base for ``seed`` (cached)."""
    cfg = cfg or TrainConfig(seed=seed)
    model_cfg = model_cfg or ModelConfig()
    path = _base_stem(seed, cfg, model_cfg).with_suffix(".ckpt")
    if path.exists():
        return load_checkpoint(path)
    train_c, _ = benchmark_corpus(seed)
    torch.manual_seed(seed)
    model = Fwd2BotModel(model_cfg, seed=seed)
    t0 = time.perf_counter()
    pretrain(model, train_c, cfg)
    path.with_suffix(".time").write_text(f"{time.perf_counter() - t0:.3f}\n")
    save_checkpoint(model, path)
    return model


def base_seconds(seed: int) -> float:
    """Wall time of the cached base pretraining run (nan if unknown)."""
    path = _base_stem(seed, TrainConfig(seed=seed), ModelConfig()).with_suffix(".time")
    return float(path.read_text()) if path.exists() else math.nan


@dataclass
class RunResult:
    variant: str
    seed: int
    model: Fwd2BotModel
    qa: float
    r_at_1: float
    seconds: float
    path: Path


def run_variant(variant: str, seed: int, steps: int | None = None, progress=None) -> RunResult:
    """Fine-tune the cached base with one ablation variant and evaluate it."""
    overrides = VARIANTS.get(variant, {})
    model_over = MODEL_VARIANTS.get(variant, {})
    if variant not in VARIANTS and variant not in MODEL_VARIANTS:
        raise KeyError(f"unknown variant {variant!r}")
    cfg = replace(TrainConfig(seed=seed), **overrides)
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    model_cfg = replace(ModelConfig(), **model_over)
    stem = cache_dir() / f"{variant}_s{seed}_n{cfg.steps}_{config_tag(cfg, model_cfg)}"
    ckpt, log, timing = stem.with_suffix(".ckpt"), stem.with_suffix(".csv"), stem.with_suffix(".time")
    train_c, held = benchmark_corpus(seed)
    if ckpt.exists() and timing.exists():
        model = load_checkpoint(ckpt)
        seconds = float(timing.read_text())
    else:
        base = base_model(seed)
        t0 = time.perf_counter()
        model = derive_model(base, model_cfg, with_pooler=cfg.method == "single", seed=seed + 1)
        Trainer(model, train_c, cfg, eval_corpus=held).run(log, progress)
        seconds = time.perf_counter() - t0
        save_checkpoint(model, ckpt)
        timing.write_text(f"{seconds:.3f}\n")
    qa, r1 = evaluate(model, held, cfg)
    return RunResult(variant, seed, model, qa, r1, seconds, ckpt)


def evaluate(model: Fwd2BotModel, held: Corpus, cfg: TrainConfig) -> tuple[float, float]:
    source = "compressed" if cfg.method == "double" else "pooled"
    qa = qa_accuracy(model, held.qa_records()[: cfg.eval_questions], source=source)
    r1 = math.nan
    if cfg.method == "double":
        r1 = retrieval_recall(model, held.caption_pairs()[: cfg.eval_pairs])
    return qa, r1


def uncompressed_baseline(seed: int) -> float:
    """Held-out QA of the base model reading all vision tokens."""
    cfg = TrainConfig(seed=seed)
    _, held = benchmark_corpus(seed)
    return qa_accuracy(base_model(seed), held.qa_records()[: cfg.eval_questions], source="uncompressed")

