"""Command-line entry point: ``fwd2bot <command> [options] [key=value ...]``.

Anything that affects results lives in a ``key=value`` config (file given
with ``--config``, then inline overrides); flags carry only paths and seeds.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import torch

from . import probes
from .data import VOCAB, build_corpus, corpus_stats, load_corpus, save_corpus
from .errors import ConfigError, Fwd2BotError
from .inference import GenerationParams, RetrievalIndex, embed_text, generate, retrieve, write_ranked_csv
from .model import N_FEATURES, ModelConfig, load_checkpoint, save_checkpoint
from .store import Store, ingest
from .training import TrainConfig, train

SEED_ENV = "FWD2BOT_SEED"
OVERRIDE = re.compile(r"^[a-z_]+\.[A-Za-z_0-9]+=")


@dataclass
class StoreOptions:
    dtype: str = "half"


@dataclass
class ProbeOptions:
    group_size: int = 4
    truncation: str = "1,2,4,8"
    scene_index: int = 0
    attention_pass: str = "compression"
    n_questions: int = 512
    preset: str = "full"
    gnuplot: bool = False


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "store": StoreOptions, "probe": ProbeOptions}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    store: StoreOptions = field(default_factory=StoreOptions)
    probe: ProbeOptions = field(default_factory=ProbeOptions)


def config_defaults() -> list[tuple[str, object]]:
    out = []
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            out.append((f"{section}.{f.name}", f.default))
    return out


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def parse_assignments(lines: list[str]) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(assignments: dict[str, str]) -> RunConfig:
    defaults = dict(config_defaults())
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in assignments.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        values[section][name] = _convert(raw, defaults[key], key)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        values["train"]["seed"] = _convert(seed, 0, SEED_ENV)
    return RunConfig(**{s: cls(**values[s]) for s, cls in SECTIONS.items()})


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    lines = Path(path).read_text(encoding="utf-8").splitlines() if path else []
    assignments = parse_assignments(lines)
    assignments.update(parse_assignments(overrides))
    return build_config(assignments)


# -- commands ----------------------------------------------------------------


def cmd_dataset(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    corpus = build_corpus(seed, args.n, qa_per_scene=args.qa_per_scene)
    save_corpus(corpus, args.out)
    for k, v in corpus_stats(corpus).items():
        print(f"{k}\t{v:.4f}" if isinstance(v, float) else f"{k}\t{v}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    torch.manual_seed(cfg.train.seed)
    corpus = load_corpus(args.data)
    base = load_checkpoint(args.base) if args.base else None
    metrics = args.metrics or str(args.out) + ".metrics.csv"
    progress = (lambda row: print(row.csv(), file=sys.stderr, flush=True)) if args.verbose else None
    result = train(cfg.model, cfg.train, corpus, base=base, log_path=metrics, progress=progress)
    save_checkpoint(result.model, args.out)
    if args.base_out:
        save_checkpoint(result.base, args.base_out)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"qa_acc\t{last.qa_acc:.4f}\nr_at_1\t{last.r_at_1:.4f}")
    return 0


def cmd_compress(args) -> int:
    cfg = load_config(args.config, args.overrides)
    model = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    header = ingest(model, list(zip(corpus.ids, corpus.scenes)), args.out, cfg.store.dtype)
    print(f"stored\t{header.count}\nbytes_per_image\t{header.bytes_per_record_payload}")
    return 0


def _open_pair(ckpt: str, store_path: str):
    model = load_checkpoint(ckpt)
    store = Store(store_path)
    store.require_compatible(model.cfg)
    return model, store


def cmd_generate(args) -> int:
    model, store = _open_pair(args.ckpt, args.store)
    hc = store.read(args.image_id).to(model.dtype)
    answer = generate(model, hc, VOCAB.tokenize(args.question), GenerationParams(args.max_new_tokens))
    print(VOCAB.detokenize(answer))
    return 0


def cmd_retrieve(args) -> int:
    model, store = _open_pair(args.ckpt, args.store)
    vectors = store.read_all()
    index = RetrievalIndex.from_compressed(store.ids, torch.stack([vectors[i] for i in store.ids]))
    e_t = embed_text(model, VOCAB.tokenize(args.caption))
    ranked = retrieve(index, e_t, args.topk)
    write_ranked_csv([("q0", r + 1, i, s) for r, (i, s) in enumerate(ranked)], sys.stdout)
    return 0


def _eval_records(cfg: RunConfig, data: str):
    corpus = load_corpus(data)
    _, held = corpus.split(cfg.train.heldout_scenes)
    return held.qa_records()[: cfg.probe.n_questions], held


def _toy_cost(model) -> probes.CostModel:
    d = model.cfg.d_model
    n_llm = sum(p.numel() for n, p in model.named_parameters() if not n.startswith(("lora.", "pooler.")))
    return probes.CostModel(
        N_v=N_FEATURES * d, N_LLM=n_llm, V=model.cfg.k_vision, K=model.cfg.k_summary, Q=6, G=2, d=d
    )


def cmd_probe(args) -> int:
    cfg = load_config(args.config, args.overrides)
    opt = cfg.probe
    which = args.which
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    needs_model = which in ("attention", "mask", "prefix", "norms")
    if needs_model and model is None:
        raise ConfigError(f"probe {which} needs --ckpt")
    if which in ("attention", "mask", "prefix") and not args.data:
        raise ConfigError(f"probe {which} needs --data")

    if which == "attention":
        records, held = _eval_records(cfg, args.data)
        if not 0 <= opt.scene_index < len(records):
            raise ConfigError(f"probe.scene_index={opt.scene_index} outside 0..{len(records) - 1}")
        rec = records[opt.scene_index]
        question = rec.question if opt.attention_pass == "generation" else None
        maps = probes.attention_map(model, rec.scene, opt.attention_pass, question)
        header, rows = ["layer", "row", "col", "weight"], probes.attention_rows(maps)
    elif which == "mask":
        records, _ = _eval_records(cfg, args.data)
        report = probes.mask_importance(model, records, opt.group_size)
        header = ["group", "drop"]
        rows = [("none", 0.0)] + report.rows()
    elif which == "prefix":
        records, _ = _eval_records(cfg, args.data)
        ms = [int(m) for m in opt.truncation.split(",") if m.strip()]
        header, rows = ["m", "qa_acc"], probes.truncation_sweep(model, records, ms)
    elif which == "norms":
        header, rows = ["set", "layer", "target", "frobenius"], probes.adapter_delta_norms(model)
    elif which == "flops":
        cost = probes.FULL_SCALE if opt.preset == "full" else None
        if cost is None:
            if model is None:
                raise ConfigError("probe.preset=toy needs --ckpt")
            cost = _toy_cost(model)
        header = ["mode", "V", "K", "Q", "G", "vision_flops", "llm_flops", "total_flops"]
        rows = []
        for mode in probes.COST_MODES:
            est = probes.flops_estimate(cost, mode)
            rows.append((mode, cost.V, cost.K, cost.Q, cost.G, f"{est.vision:.6e}", f"{est.llm:.6e}", f"{est.total:.6e}"))
    elif which == "storage":
        d = model.cfg.d_model if model is not None else probes.FULL_SCALE.d
        header = ["K", "d", "dtype", "bytes"]
        rows = [(k, d, dt, probes.storage_bytes(k, d, dt)) for dt in ("half", "float32") for k in (1, 2, 4, 8, 16, 32)]
    else:
        raise ConfigError(f"unknown probe {which!r}")

    if args.out:
        probes.write_outputs(args.out, header, rows, gnuplot=opt.gnuplot)
    else:
        sys.stdout.write(probes.to_csv(header, rows))
    return 0


# -- parser ------------------------------------------------------------------


def _keys_epilog() -> str:
    lines = ["config keys (in a --config file or as section.key=value arguments; defaults shown):"]
    lines += [f"  {k} = {v}" for k, v in config_defaults()]
    lines.append(f"environment: {SEED_ENV} overrides train.seed")
    lines.append("exit codes: 0 ok, 2 usage, 3 data error, 4 numeric error, 5 I/O error")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _keys_epilog()
    p = argparse.ArgumentParser(prog="fwd2bot", description="Double-forward token compression toolkit.", epilog=epilog, formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, fn):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    def configurable(sp):
        sp.add_argument("--config", help="key=value config file; section.key=value arguments override it")
        sp.set_defaults(overrides=[])

    sp = add("dataset", "build a synthetic corpus file", cmd_dataset)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--n", type=int, default=2304, help="number of scenes")
    sp.add_argument("--qa-per-scene", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = add("train", "pretrain a base model and fine-tune it for compression", cmd_train)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    sp.add_argument("--base", help="reuse this base checkpoint instead of pretraining")
    sp.add_argument("--base-out", help="also save the base checkpoint here")
    sp.add_argument("--verbose", action="store_true")
    configurable(sp)

    sp = add("compress", "compress every scene of a corpus into a store", cmd_compress)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    configurable(sp)

    sp = add("generate", "answer a question from stored tokens only", cmd_generate)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--image-id", required=True)
    sp.add_argument("--question", required=True)
    sp.add_argument("--max-new-tokens", type=int, default=4)

    sp = add("retrieve", "rank stored images for a caption", cmd_retrieve)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--caption", required=True)
    sp.add_argument("--topk", type=int, default=5)

    sp = add("probe", "run a diagnostic probe and emit CSV", cmd_probe)
    sp.add_argument("which", choices=("attention", "mask", "prefix", "norms", "flops", "storage"))
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    configurable(sp)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = [a for a in argv if OVERRIDE.match(a)]
    try:
        args = parser.parse_args([a for a in argv if not OVERRIDE.match(a)])
    except SystemExit as exc:
        return int(exc.code or 0)
    if overrides and not hasattr(args, "overrides"):
        print(f"fwd2bot: {args.command} takes no config overrides", file=sys.stderr)
        return 2
    if overrides:
        args.overrides = overrides
    try:
        return args.fn(args)
    except Fwd2BotError as exc:
        print(f"fwd2bot: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fwd2bot: I/O error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
