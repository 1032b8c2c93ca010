"""The toy vision-language decoder used for both forward passes.

Sequences are batched with left padding. Every batch carries explicit
position ids and a key-validity mask, so a padded row attends only to its
own real tokens and keeps the positions it would have had unpadded.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .adapters import TARGETS, AdapterBank, adapted_linear, target_key
from .data import COLORS, N_RESERVED, N_SHAPES, SUM_IDS, Scene
from .errors import CapacityError, ConfigError, ContractError, CorruptionError, DataError, VocabularyError

N_FEATURES = len(COLORS) + N_SHAPES + 1
ATTENTION_MODES = ("causal", "bidirectional")
ADAPTER_MODES = ("stage", "single", "full")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_width: int = 256
    vocab_size: int = 64
    k_vision: int = 36
    k_summary: int = 8
    max_seq_len: int = 64
    attention_mode_compression: str = "causal"
    lora_rank: int = 4
    adapter_mode: str = "stage"
    lora_alpha: float = 1.0
    prompt_len: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.k_summary > self.k_vision:
            raise ConfigError("k_summary must not exceed k_vision")
        if self.k_vision + self.prompt_len + self.k_summary > self.max_seq_len:
            raise ConfigError("k_vision + prompt + k_summary exceeds max_seq_len")
        if math.isqrt(self.k_vision) ** 2 != self.k_vision:
            raise ConfigError("k_vision must be a square grid")
        if self.attention_mode_compression not in ATTENTION_MODES:
            raise ConfigError(f"attention mode must be one of {ATTENTION_MODES}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter mode must be one of {ADAPTER_MODES}")
        # smaller vocabularies are allowed for synthetic-token micro models; the
        # default grammar needs len(VOCAB) and embed_tokens rejects overflow
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED} reserved tokens")
        if not 1 <= self.prompt_len <= len(SUM_IDS):
            raise ConfigError(f"prompt_len must be in 1..{len(SUM_IDS)}")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.k_vision)


@dataclass
class PassOutput:
    hidden_states: torch.Tensor
    logits: torch.Tensor
    attention: list[torch.Tensor] | None


def scene_features(scene: Scene) -> np.ndarray:
    """Frozen featurizer: one-hot color, one-hot shape, occupancy bit per cell."""
    f = np.zeros((len(scene.cells), N_FEATURES), dtype=np.float32)
    for i, code in enumerate(scene.cells):
        if code:
            c = code - 1
            f[i, c // N_SHAPES] = 1.0
            f[i, len(COLORS) + c % N_SHAPES] = 1.0
            f[i, -1] = 1.0
    return f


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        d, f = cfg.d_model, cfg.ffn_width
        out_std = 1.0 / math.sqrt(2 * cfg.n_layers)
        self.norm1 = nn.Parameter(torch.ones(d))
        self.wq = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d))
        self.wk = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d))
        self.wv = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d))
        self.wo = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d) * out_std)
        self.norm2 = nn.Parameter(torch.ones(d))
        self.w1 = nn.Parameter(torch.randn(d, f, generator=g) / math.sqrt(d))
        self.w2 = nn.Parameter(torch.randn(f, d, generator=g) / math.sqrt(f) * out_std)
        self.n_heads = cfg.n_heads

    def forward(self, x, bias, adapters, layer, need_attention):
        def lin(h, name):
            ad = adapters.get(layer, name) if adapters is not None else None
            return adapted_linear(h, getattr(self, name), ad)

        b, t, d = x.shape
        nh, dh = self.n_heads, d // self.n_heads
        h = nx.rms_norm(x, self.norm1)
        q = lin(h, "wq").view(b, t, nh, dh).transpose(1, 2)
        k = lin(h, "wk").view(b, t, nh, dh).transpose(1, 2)
        v = lin(h, "wv").view(b, t, nh, dh).transpose(1, 2)
        scores = nx.matmul(q, k.transpose(-1, -2), check=False) / math.sqrt(dh) + bias
        att = nx.softmax(scores, axis=-1)
        ctx = nx.matmul(att, v, check=False).transpose(1, 2).reshape(b, t, d)
        x = x + lin(ctx, "wo")
        h = nx.rms_norm(x, self.norm2)
        x = x + lin(nx.gelu(lin(h, "w1")), "w2")
        return x, (att if need_attention else None)


class InputSpaceCompressor(nn.Module):
    """Single-pass baseline: learned queries pool vision tokens before the decoder."""

    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.queries = nn.Parameter(torch.randn(cfg.k_summary, d, generator=g))
        self.wk = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d))
        self.wv = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        scores = nx.matmul(self.queries, nx.matmul(h, self.wk).transpose(-1, -2)) / math.sqrt(h.shape[-1])
        return nx.matmul(nx.softmax(scores, axis=-1), nx.matmul(h, self.wv))


class Fwd2BotModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, with_pooler: bool = False):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        d = cfg.d_model
        self.embed_words = nn.Parameter(torch.randn(cfg.vocab_size - N_RESERVED, d, generator=g))
        self.embed_reserved = nn.Parameter(torch.randn(N_RESERVED, d, generator=g))
        self.embed_pos = nn.Parameter(torch.randn(cfg.max_seq_len, d, generator=g) * 0.5)
        self.projector = nn.Parameter(torch.randn(N_FEATURES, d, generator=g))
        self.summary = nn.Parameter(torch.randn(cfg.k_summary, d, generator=g))
        self.layers = nn.ModuleList([Block(cfg, g) for _ in range(cfg.n_layers)])
        self.final_norm = nn.Parameter(torch.ones(d))
        self.head = nn.Parameter(torch.randn(d, cfg.vocab_size, generator=g) * 0.02)
        self.lora: AdapterBank | None = None
        if cfg.adapter_mode != "full":
            self.lora = AdapterBank(self.adapter_shapes(), cfg.lora_rank, cfg.lora_alpha, cfg.adapter_mode, seed + 1)
        self.pooler = InputSpaceCompressor(cfg, g) if with_pooler else None
        self.stage: str | None = None

    # -- configuration -------------------------------------------------

    def adapter_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        for i, blk in enumerate(self.layers):
            for t in TARGETS:
                shapes[target_key(i, t)] = tuple(getattr(blk, t).shape)
        return shapes

    def select_stage(self, stage: str | None) -> None:
        if self.lora is not None:
            self.lora.select_stage(stage)
        elif stage is not None and stage not in ("compression", "generation"):
            raise ContractError(f"unknown stage {stage!r}")
        self.stage = stage

    def merge_single(self) -> None:
        if self.lora is None:
            raise ContractError("model has no adapters")
        self.lora.merge_single()
        self.cfg.adapter_mode = "single"

    def adaptation_parameters(self) -> list[nn.Parameter]:
        """Parameters trained during compression fine-tuning; the rest are frozen."""
        if self.cfg.adapter_mode == "full":
            return list(self.parameters())
        params = [self.projector, self.summary, self.embed_reserved]
        params += list(self.lora.parameters())
        if self.pooler is not None:
            params += list(self.pooler.parameters())
        return params

    @property
    def dtype(self) -> torch.dtype:
        return self.head.dtype

    # -- embeddings ----------------------------------------------------

    def token_table(self) -> torch.Tensor:
        return torch.cat([self.embed_reserved, self.embed_words], dim=0)

    def embed_tokens(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise VocabularyError("token id outside vocabulary")
        return nx.embedding(self.token_table(), ids)

    def prompt_embeddings(self) -> torch.Tensor:
        return self.embed_tokens(list(SUM_IDS[: self.cfg.prompt_len]))

    def scene_features(self, scenes: Sequence[Scene]) -> torch.Tensor:
        for s in scenes:
            if len(s.cells) != self.cfg.k_vision:
                raise DataError(f"scene has {len(s.cells)} cells, model expects {self.cfg.k_vision}")
        return torch.as_tensor(np.stack([scene_features(s) for s in scenes]), dtype=self.dtype)

    def encode_scene(self, scene: Scene | Sequence[Scene]) -> torch.Tensor:
        """Vision tokens ``g(X_v) W``: ``[k, d]`` for one scene, ``[B, k, d]`` for a list."""
        single = isinstance(scene, Scene)
        feats = self.scene_features([scene] if single else scene)
        h = nx.matmul(feats, self.projector)
        return h[0] if single else h

    # -- transformer ---------------------------------------------------

    def forward(
        self,
        inputs: torch.Tensor,
        stage: str | None = "default",
        mode: str = "causal",
        positions: torch.Tensor | None = None,
        valid: torch.Tensor | None = None,
        need_attention: bool = False,
    ) -> PassOutput:
        """Run the decoder over embedding rows ``[T, d]`` or ``[B, T, d]``.

        ``stage`` picks the adapter set (``None`` = base weights only); the
        default uses whatever ``select_stage`` chose last.
        """
        if stage == "default":
            stage = self.stage
        if mode not in ATTENTION_MODES:
            raise ContractError(f"unknown attention mode {mode!r}")
        single = inputs.dim() == 2
        x = inputs.unsqueeze(0) if single else inputs
        b, t, _ = x.shape
        if t > self.cfg.max_seq_len:
            raise CapacityError(f"sequence of {t} exceeds max_seq_len={self.cfg.max_seq_len}")
        if t == 0:
            raise ContractError("empty sequence")
        if positions is None:
            positions = torch.arange(t).expand(b, t)
        if valid is None:
            valid = torch.ones(b, t, dtype=torch.bool)
        adapters = self.lora.for_stage(stage) if self.lora is not None else None
        if self.lora is None and stage not in (None, "compression", "generation"):
            raise ContractError(f"unknown stage {stage!r}")
        bias = self._attention_bias(valid, mode)
        x = x + self.embed_pos[positions]
        atts = []
        for i, blk in enumerate(self.layers):
            x, att = blk(x, bias, adapters, i, need_attention)
            atts.append(att)
        hidden = nx.rms_norm(x, self.final_norm)
        logits = nx.matmul(hidden, self.head, check=False)
        if single:
            hidden, logits = hidden[0], logits[0]
            atts = [a[0] for a in atts] if need_attention else atts
        return PassOutput(hidden, logits, atts if need_attention else None)

    def _attention_bias(self, valid: torch.Tensor, mode: str) -> torch.Tensor:
        b, t = valid.shape
        allowed = valid[:, None, :].expand(b, t, t)
        if mode == "causal":
            allowed = allowed & torch.ones(t, t, dtype=torch.bool).tril()
        allowed = allowed | torch.eye(t, dtype=torch.bool)
        bias = torch.zeros(b, 1, t, t, dtype=self.dtype)
        return bias.masked_fill(~allowed[:, None], float("-inf"))

    # -- passes --------------------------------------------------------

    def pack(self, segments: Sequence[Sequence[torch.Tensor]]):
        """Left-pad per-sample lists of ``[n_i, d]`` rows into one batch.

        Returns ``(inputs, positions, valid)``.
        """
        rows = [torch.cat(list(seg), dim=0) for seg in segments]
        t = max(r.shape[0] for r in rows)
        d = self.cfg.d_model
        b = len(rows)
        if all(r.shape[0] == t for r in rows):
            return torch.stack(rows), torch.arange(t).expand(b, t), torch.ones(b, t, dtype=torch.bool)
        inputs, positions, valid = [], torch.zeros(b, t, dtype=torch.long), torch.zeros(b, t, dtype=torch.bool)
        for i, r in enumerate(rows):
            pad = t - r.shape[0]
            inputs.append(torch.cat([r.new_zeros(pad, d), r], dim=0))
            positions[i, pad:] = torch.arange(r.shape[0])
            valid[i, pad:] = True
        return torch.stack(inputs), positions, valid

    def compress(self, h_v: torch.Tensor, need_attention: bool = False):
        """First pass over ``[H_v ; prompt ; H_r]``; returns the last ``k_summary`` states.

        Accepts ``[k, d]`` or ``[B, k, d]``. With ``need_attention`` also
        returns the per-layer attention.
        """
        single = h_v.dim() == 2
        hv = h_v.unsqueeze(0) if single else h_v
        b = hv.shape[0]
        prompt = self.prompt_embeddings().expand(b, -1, -1)
        summary = self.summary.expand(b, -1, -1)
        out = self.forward(
            torch.cat([hv, prompt, summary], dim=1),
            stage="compression",
            mode=self.cfg.attention_mode_compression,
            need_attention=need_attention,
        )
        hc = out.hidden_states[:, -self.cfg.k_summary:]
        if not need_attention:
            return hc[0] if single else hc
        if single:
            return hc[0], [a[0] for a in out.attention]
        return hc, out.attention

    def compress_text(self, token_ids: Sequence[int] | Sequence[Sequence[int]]) -> torch.Tensor:
        """First pass over ``[H_query ; prompt ; H_r]`` for one caption or a list of captions."""
        single = len(token_ids) > 0 and isinstance(token_ids[0], (int, np.integer))
        batch = [token_ids] if single else token_ids
        prompt, summary = self.prompt_embeddings(), self.summary
        segs = [[self.embed_tokens(list(ids)), prompt, summary] for ids in batch]
        inputs, pos, valid = self.pack(segs)
        out = self.forward(
            inputs, stage="compression", mode=self.cfg.attention_mode_compression, positions=pos, valid=valid
        )
        hc = out.hidden_states[:, -self.cfg.k_summary:]
        return hc[0] if single else hc

    def pool(self, h_v: torch.Tensor) -> torch.Tensor:
        """Input-space compression for the single-pass baseline."""
        if self.pooler is None:
            raise ContractError("model has no input-space compressor")
        k = h_v.shape[-2]
        return self.pooler(h_v + self.embed_pos[:k])

    def last_token_embedding(self, sequence: torch.Tensor, stage: str | None = None) -> torch.Tensor:
        if sequence.dim() != 2 or sequence.shape[0] == 0:
            raise ContractError("last_token_embedding needs a nonempty [T, d] sequence")
        return self.forward(sequence, stage=stage).hidden_states[-1]

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def to_float64(model: Fwd2BotModel) -> Fwd2BotModel:
    return model.to(torch.float64)


# -- checkpoint format ---------------------------------------------------

CKPT_MAGIC = b"F2BCKPT\0"
CKPT_VERSION = 1
_INT_FIELDS = (
    "d_model", "n_layers", "n_heads", "ffn_width", "vocab_size", "k_vision",
    "k_summary", "max_seq_len", "attention_mode_compression", "lora_rank", "adapter_mode", "prompt_len",
)
DTYPE_CODES = {torch.float16: 0, torch.float32: 1, torch.float64: 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_NP = {0: "<f2", 1: "<f4", 2: "<f8"}


def _encode_field(cfg: ModelConfig, name: str) -> int:
    v = getattr(cfg, name)
    if name == "attention_mode_compression":
        return ATTENTION_MODES.index(v)
    if name == "adapter_mode":
        return ADAPTER_MODES.index(v)
    return int(v)


def _decode_fields(values: Sequence[int]) -> dict:
    out = dict(zip(_INT_FIELDS, values))
    out["attention_mode_compression"] = ATTENTION_MODES[out["attention_mode_compression"]]
    out["adapter_mode"] = ADAPTER_MODES[out["adapter_mode"]]
    return out


def write_block(fh, name: str, t: torch.Tensor) -> None:
    arr = t.detach().cpu().numpy()
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<BB", DTYPE_CODES[t.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_NP[DTYPE_CODES[t.dtype]]).tobytes())


def read_block(buf: memoryview, off: int) -> tuple[str, torch.Tensor, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = bytes(buf[off: off + n]).decode("utf-8")
    off += n
    code, rank = struct.unpack_from("<BB", buf, off)
    off += 2
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dt = np.dtype(_NP[code])
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).copy()
    off += count * dt.itemsize
    return name, torch.from_numpy(arr), off


def _block_name(state_name: str) -> str:
    # lora.sets.<stage>.adapters.<key>.A -> lora.<stage>.<key>.A
    if state_name.startswith("lora.sets."):
        return "lora." + state_name[len("lora.sets."):].replace(".adapters.", ".", 1)
    return state_name


def _state_name(block_name: str) -> str:
    if block_name.startswith("lora."):
        stage, rest = block_name[len("lora."):].split(".", 1)
        return f"lora.sets.{stage}.adapters.{rest}"
    return block_name


def save_checkpoint(model: Fwd2BotModel, path: str | Path) -> None:
    cfg = model.cfg
    state = model.state_dict()
    blocks = [(_block_name(k), v) for k, v in state.items()] + [("meta.lora_alpha", torch.tensor([cfg.lora_alpha], dtype=torch.float64))]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HH", CKPT_VERSION, len(_INT_FIELDS)))
        fh.write(struct.pack(f"<{len(_INT_FIELDS)}I", *(_encode_field(cfg, f) for f in _INT_FIELDS)))
        fh.write(struct.pack("<I", len(blocks)))
        for name, t in blocks:
            write_block(fh, name, t)


def load_checkpoint(path: str | Path) -> Fwd2BotModel:
    data = Path(path).read_bytes()
    buf = memoryview(data)
    try:
        if data[:8] != CKPT_MAGIC:
            raise CorruptionError(f"{path}: not a checkpoint (bad magic)")
        version, n_fields = struct.unpack_from("<HH", buf, 8)
        if version != CKPT_VERSION:
            raise CorruptionError(f"{path}: unsupported checkpoint version {version}")
        values = struct.unpack_from(f"<{n_fields}I", buf, 12)
        off = 12 + 4 * n_fields
        (n_blocks,) = struct.unpack_from("<I", buf, off)
        off += 4
        blocks = {}
        for _ in range(n_blocks):
            name, t, off = read_block(buf, off)
            blocks[_state_name(name)] = t
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptionError(f"{path}: truncated or malformed checkpoint ({exc})") from None
    if off != len(data):
        raise CorruptionError(f"{path}: trailing bytes after last block")
    alpha = float(blocks.pop("meta.lora_alpha")[0])
    cfg = ModelConfig(**_decode_fields(values), lora_alpha=alpha)
    model = Fwd2BotModel(cfg, with_pooler=any(k.startswith("pooler.") for k in blocks))
    dtype = next(iter(blocks.values())).dtype
    model.to(dtype)
    missing, unexpected = model.load_state_dict(blocks, strict=False)
    if missing or unexpected:
        raise CorruptionError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {unexpected[:3]})")
    return model


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_keys() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
