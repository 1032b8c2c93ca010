"""Double-forward bottleneck training.

Pass one runs the decoder over ``[H_v ; prompt ; H_r]`` with the compression
adapters and keeps the last ``k_summary`` states. Pass two runs it over
``[H^c_v ; question ; answer]`` with the generation adapters. The
autoregressive loss on pass two and the contrastive loss on pass one are
summed; gradients of both reach the compression stage through ``H^c_v``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .data import DESCRIBE, EOS, VOCAB, Corpus, Record, render_caption

DESCRIBE_ID = VOCAB.ids[DESCRIBE]
from .errors import ConfigError, ContractError, NumericError, SamplerError
from .inference import qa_accuracy, retrieval_recall
from .model import Fwd2BotModel, ModelConfig

LOSS_MODES = ("both", "generative", "discriminative")
METHODS = ("double", "single")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_steps: int = 20
    schedule: str = "cosine"
    seed: int = 0
    ratio: float = 1.0
    loss_mode: str = "both"
    method: str = "double"
    temperature: float = 1.0
    clip_norm: float = 1.0
    eval_every: int = 500
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_caption_frac: float = 0.5
    disc_warmup_steps: int = 500
    heldout_scenes: int = 256
    eval_pairs: int = 64
    eval_questions: int = 512

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be cosine or constant")
        if self.disc_warmup_steps < 0:
            raise ConfigError("disc_warmup_steps must be non-negative")
        if self.ratio < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("ratio, batch_size and steps must be non-negative (batch_size >= 1)")


def train_config_keys() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


# -- batches ---------------------------------------------------------------


@dataclass
class TrainSample:
    record: Record
    use_ar: bool
    use_disc: bool

    def __post_init__(self):
        if self.use_ar and not self.record.has_qa:
            raise ContractError("autoregressive flag on a sample without QA")
        if self.use_disc and not self.record.has_caption:
            raise ContractError("contrastive flag on a sample without caption")


@dataclass
class TrainBatch:
    samples: list[TrainSample]
    kind: str = "ar"

    @property
    def contrastive_size(self) -> int:
        return sum(s.use_disc for s in self.samples)

    @property
    def applies_ar(self) -> bool:
        return any(s.use_ar for s in self.samples)

    @property
    def applies_disc(self) -> bool:
        return any(s.use_disc for s in self.samples)


class MixedSampler:
    """Draws batches of distinct scenes, interleaving step kinds at ``ratio``.

    ``ratio`` is contrastive steps per autoregressive step. Step kinds follow
    a deterministic error-diffusion schedule; records carrying both a caption
    and QA get both loss flags whichever kind drew them.
    """

    def __init__(self, corpus: Corpus, batch_size: int, rng: np.random.Generator, ratio: float = 1.0, loss_mode: str = "both"):
        if not corpus.records:
            raise SamplerError("empty dataset")
        self.batch_size = batch_size
        self.rng = rng
        self.loss_mode = loss_mode
        self.qa: dict[str, list[Record]] = {}
        self.cap: dict[str, list[Record]] = {}
        for r in corpus.records:
            if r.has_qa:
                self.qa.setdefault(r.image_id, []).append(r)
            if r.has_caption:
                self.cap.setdefault(r.image_id, []).append(r)
        if loss_mode == "generative":
            self.p_disc = 0.0
        elif loss_mode == "discriminative":
            self.p_disc = 1.0
        else:
            self.p_disc = ratio / (1.0 + ratio)
        self.n_steps = 0
        self.n_disc = 0

    def next_kind(self) -> str:
        disc = math.floor((self.n_steps + 1) * self.p_disc + 1e-9) > self.n_disc
        self.n_steps += 1
        self.n_disc += disc
        return "disc" if disc else "ar"

    def sample(self) -> TrainBatch:
        kind = self.next_kind()
        pool = self.cap if kind == "disc" else self.qa
        if not pool:
            raise SamplerError(f"no records available for a {kind} step")
        ids = sorted(pool)
        if kind == "disc" and len(ids) < max(2, self.batch_size):
            raise SamplerError(f"need {self.batch_size} distinct captioned scenes, have {len(ids)}")
        n = min(self.batch_size, len(ids))
        chosen = self.rng.choice(len(ids), size=n, replace=False)
        samples = []
        for j in chosen:
            recs = pool[ids[j]]
            r = recs[int(self.rng.integers(len(recs)))]
            use_ar = r.has_qa and self.loss_mode != "discriminative"
            use_disc = r.has_caption and self.loss_mode != "generative"
            samples.append(TrainSample(r, use_ar, use_disc))
        return TrainBatch(samples, kind)


def sample_batch(sampler: MixedSampler) -> TrainBatch:
    return sampler.sample()


# -- losses ----------------------------------------------------------------


def second_pass_inputs(model: Fwd2BotModel, prefixes: Sequence[torch.Tensor], questions, answers):
    """Packed ``[prefix ; question ; answer]`` rows (answers without the final EOS)."""
    segs = [[p, model.embed_tokens(list(q)), model.embed_tokens(list(a))] for p, q, a in zip(prefixes, questions, answers)]
    return model.pack(segs)


def answer_logits(model, prefixes, questions, answers, stage: str | None = "generation") -> torch.Tensor:
    """Logits at the positions that predict each answer token and the closing EOS.

    Rows are concatenated over the batch in order; sample ``i`` contributes
    ``len(answers[i]) + 1`` rows.
    """
    for a in answers:
        if len(a) == 0:
            raise ContractError("empty answer")
    inputs, pos, valid = second_pass_inputs(model, prefixes, questions, answers)
    out = model.forward(inputs, stage=stage, positions=pos, valid=valid)
    t = inputs.shape[1]
    bi, ti = [], []
    for i, a in enumerate(answers):
        n = len(a) + 1
        bi += [i] * n
        ti += list(range(t - n, t))
    return out.logits[torch.tensor(bi), torch.tensor(ti)]


def answer_targets(answers) -> torch.Tensor:
    return torch.tensor([tok for a in answers for tok in list(a) + [EOS]], dtype=torch.long)


def ar_loss(model: Fwd2BotModel, hc: torch.Tensor, questions, answers, stage: str | None = "generation") -> torch.Tensor:
    """Mean next-token cross-entropy over answer positions, conditioned on ``hc``.

    ``hc`` is ``[k, d]`` with one question/answer, or ``[B, k, d]`` with lists.
    """
    if hc.dim() == 2:
        hc, questions, answers = hc.unsqueeze(0), [questions], [answers]
    logits = answer_logits(model, list(hc), questions, answers, stage)
    return nx.cross_entropy(logits, answer_targets(answers))


def contrastive_loss(e_v: torch.Tensor, e_t: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Symmetric softmax loss over cosine similarities of paired rows."""
    if e_v.shape != e_t.shape or e_v.dim() != 2:
        raise ContractError(f"paired [B, d] embeddings required, got {tuple(e_v.shape)} and {tuple(e_t.shape)}")
    b = e_v.shape[0]
    if b < 2:
        warnings.warn("contrastive batch of size < 2; loss is identically zero", RuntimeWarning, stacklevel=2)
    return contrastive_from_similarity(nx.cosine_matrix(e_v, e_t) / temperature)


def contrastive_from_similarity(sim: torch.Tensor) -> torch.Tensor:
    b = sim.shape[0]
    target = torch.arange(b)
    image_to_text = nx.cross_entropy(sim, target, reduction="sum")
    text_to_image = nx.cross_entropy(sim.T, target, reduction="sum")
    return (image_to_text + text_to_image) / b


@dataclass
class Losses:
    ar: torch.Tensor
    disc: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.ar + self.disc


def compute_losses(model: Fwd2BotModel, batch: TrainBatch, method: str = "double", temperature: float = 1.0) -> Losses:
    """Both passes for one batch; absent loss components are exact zeros."""
    samples = batch.samples
    zero = model.head.new_zeros(())
    h_v = model.encode_scene([s.record.scene for s in samples])
    hc = model.compress(h_v) if method == "double" else model.pool(h_v)
    ar_idx = [i for i, s in enumerate(samples) if s.use_ar]
    disc_idx = [i for i, s in enumerate(samples) if s.use_disc]
    l_ar = zero
    if ar_idx:
        l_ar = ar_loss(
            model, hc[ar_idx], [samples[i].record.question for i in ar_idx], [samples[i].record.answer for i in ar_idx]
        )
    l_disc = zero
    if disc_idx and method == "double":
        ht = model.compress_text([samples[i].record.caption for i in disc_idx])
        l_disc = contrastive_loss(hc[disc_idx].mean(dim=1), ht.mean(dim=1), temperature)
    return Losses(l_ar, l_disc)


# -- optimisation ------------------------------------------------------------


def lr_lambda(cfg_steps: int, warmup: int, schedule: str):
    def f(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if schedule == "constant" or cfg_steps <= warmup:
            return 1.0
        progress = (step - warmup) / max(1, cfg_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return f


def make_optimizer(params, lr: float, weight_decay: float, steps: int, warmup: int, schedule: str):
    params = [p for p in params if p.requires_grad]
    decay = [p for p in params if p.dim() >= 2]
    no_decay = [p for p in params if p.dim() < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}], lr=lr
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(steps, warmup, schedule))
    return opt, sched


@dataclass
class StepResult:
    step: int
    l_ar: float
    l_disc: float
    l_total: float


@dataclass
class MetricRow:
    step: int
    l_ar: float
    l_disc: float
    qa_acc: float
    r_at_1: float

    def csv(self) -> str:
        return f"{self.step},{self.l_ar:.6f},{self.l_disc:.6f},{self.qa_acc:.6f},{self.r_at_1:.6f}"


METRICS_HEADER = "step,L_AR,L_disc,qa_acc,r_at_1"


def freeze_for_adaptation(model: Fwd2BotModel) -> list[torch.nn.Parameter]:
    for p in model.parameters():
        p.requires_grad_(False)
    params = model.adaptation_parameters()
    for p in params:
        p.requires_grad_(True)
    return params


class Trainer:
    """Owns the optimiser state for compression fine-tuning of one model."""

    def __init__(self, model: Fwd2BotModel, corpus: Corpus, cfg: TrainConfig, eval_corpus: Corpus | None = None):
        self.model = model
        self.cfg = cfg
        self.corpus = corpus
        self.eval_corpus = eval_corpus
        self.params = freeze_for_adaptation(model)
        self.opt, self.sched = make_optimizer(
            self.params, cfg.lr, cfg.weight_decay, cfg.steps, cfg.warmup_steps, cfg.schedule
        )
        self.rng = np.random.default_rng(cfg.seed + 1000)
        # the input-space baseline has no first-pass text embedding, so it trains on QA only
        mode = "generative" if cfg.method == "single" else cfg.loss_mode
        self.sampler = MixedSampler(corpus, cfg.batch_size, self.rng, cfg.ratio, mode)
        # joint runs start with AR-only steps: contrastive pressure from step 0
        # can pull every summary row onto one shared scene vector
        self.warmup_sampler = None
        if mode == "both" and cfg.disc_warmup_steps > 0:
            self.warmup_sampler = MixedSampler(corpus, cfg.batch_size, self.rng, cfg.ratio, "generative")
        self.n = 0

    def next_batch(self) -> TrainBatch:
        if self.warmup_sampler is not None and self.n < self.cfg.disc_warmup_steps:
            return self.warmup_sampler.sample()
        return self.sampler.sample()

    def step(self, batch: TrainBatch) -> StepResult:
        self.model.train()
        losses = compute_losses(self.model, batch, self.cfg.method, self.cfg.temperature)
        total = losses.total
        if not bool(torch.isfinite(total)):
            raise NumericError(f"non-finite loss at step {self.n}")
        self.opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            nx.backward(total)
            if self.cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(self.params, self.cfg.clip_norm)
            self.opt.step()
        self.sched.step()
        self.n += 1
        return StepResult(self.n, losses.ar.item(), losses.disc.item(), total.item())

    def evaluate(self) -> tuple[float, float]:
        if self.eval_corpus is None:
            return math.nan, math.nan
        self.model.eval()
        qa = self.eval_corpus.qa_records()[: self.cfg.eval_questions]
        source = "compressed" if self.cfg.method == "double" else "pooled"
        acc = qa_accuracy(self.model, qa, source=source) if qa else math.nan
        pairs = self.eval_corpus.caption_pairs()[: self.cfg.eval_pairs]
        r1 = retrieval_recall(self.model, pairs) if self.cfg.method == "double" and len(pairs) >= 2 else math.nan
        return acc, r1

    def run(self, log_path: str | Path | None = None, progress=None) -> list[MetricRow]:
        rows: list[MetricRow] = []
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        if fh:
            fh.write(METRICS_HEADER + "\n")
        acc_ar, acc_disc, n_ar, n_disc = 0.0, 0.0, 0, 0
        try:
            for _ in range(self.cfg.steps):
                batch = self.next_batch()
                res = self.step(batch)
                if batch.applies_ar:
                    acc_ar, n_ar = acc_ar + res.l_ar, n_ar + 1
                if batch.applies_disc:
                    acc_disc, n_disc = acc_disc + res.l_disc, n_disc + 1
                last = self.n == self.cfg.steps
                if (self.cfg.eval_every and self.n % self.cfg.eval_every == 0) or last:
                    qa, r1 = self.evaluate()
                    row = MetricRow(self.n, acc_ar / max(n_ar, 1), acc_disc / max(n_disc, 1), qa, r1)
                    rows.append(row)
                    if fh:
                        fh.write(row.csv() + "\n")
                        fh.flush()
                    if progress:
                        progress(row)
                    acc_ar, acc_disc, n_ar, n_disc = 0.0, 0.0, 0, 0
        finally:
            if fh:
                fh.close()
        self.model.eval()
        return rows


# -- base model --------------------------------------------------------------


def pretrain(model: Fwd2BotModel, corpus: Corpus, cfg: TrainConfig, progress=None) -> list[float]:
    """Train the base decoder on uncompressed ``[H_v ; question ; answer]`` sequences.

    Stands in for the pretrained vision-language model that compression
    fine-tuning starts from. Adapters and summary embeddings are unused.
    """
    for p in model.parameters():
        p.requires_grad_(True)
    params = [p for n, p in model.named_parameters() if not n.startswith(("lora.", "pooler.", "summary"))]
    opt, sched = make_optimizer(params, cfg.pretrain_lr, cfg.weight_decay, cfg.pretrain_steps, cfg.warmup_steps, cfg.schedule)
    rng = np.random.default_rng(cfg.seed + 2000)
    sampler = MixedSampler(corpus, cfg.batch_size, rng, loss_mode="generative")
    losses = []
    model.train()
    for step in range(cfg.pretrain_steps):
        batch = sampler.sample()
        recs = [s.record for s in batch.samples]
        h_v = model.encode_scene([r.scene for r in recs])
        describe = rng.random(len(recs)) < cfg.pretrain_caption_frac
        questions = [[DESCRIBE_ID] if c else r.question for r, c in zip(recs, describe)]
        answers = [render_caption(r.scene) if c else r.answer for r, c in zip(recs, describe)]
        loss = nx.cross_entropy(
            answer_logits(model, list(h_v), questions, answers, stage=None), answer_targets(answers)
        )
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad(set_to_none=True)
        nx.backward(loss)
        if cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if progress and (step + 1) % 250 == 0:
            progress(step + 1, float(np.mean(losses[-250:])))
    model.eval()
    return losses


def derive_model(base: Fwd2BotModel, cfg: ModelConfig | None = None, with_pooler: bool = False, seed: int = 0) -> Fwd2BotModel:
    """A fresh model (new adapters, new pooler) carrying ``base``'s base weights."""
    cfg = cfg or base.cfg
    model = Fwd2BotModel(cfg, seed=seed, with_pooler=with_pooler).to(base.dtype)
    state = {k: v for k, v in base.state_dict().items() if not k.startswith(("lora.", "pooler."))}
    model.load_state_dict(state, strict=False)
    return model


@dataclass
class TrainResult:
    model: Fwd2BotModel
    base: Fwd2BotModel
    metrics: list[MetricRow] = field(default_factory=list)
    pretrain_losses: list[float] = field(default_factory=list)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    base: Fwd2BotModel | None = None,
    log_path: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Pretrain a base model (unless given) and fine-tune it for compression."""
    torch.manual_seed(train_cfg.seed)
    train_c, held = corpus.split(train_cfg.heldout_scenes)
    pre_losses: list[float] = []
    if base is None:
        base = Fwd2BotModel(model_cfg, seed=train_cfg.seed)
        pre_losses = pretrain(base, train_c, train_cfg)
    model = derive_model(base, model_cfg, with_pooler=train_cfg.method == "single", seed=train_cfg.seed + 1)
    trainer = Trainer(model, train_c, train_cfg, eval_corpus=held)
    rows = trainer.run(log_path, progress)
    return TrainResult(model, base, rows, pre_losses)
