"""``slicenet`` command line: train, decode, audit and analyze.

Exit codes: 0 on success, 2 for usage / configuration / input problems,
3 when training hits a non-finite value. Progress goes to stderr only with
``--verbose``; successful runs are otherwise silent there.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig
from .convops import (
    ConvSpec,
    allocated_count,
    coverage_profile,
    flops_per_position,
    param_count,
    parse_mode,
    parse_padding,
    probe_receptive_field,
    receptive_field,
    undilated_alternative,
)
from .decoding import DecodeConfig, decode_lines, strip_end
from .errors import ConfigurationError, DataExhaustedError, InputError, NonFiniteError
from .model import SliceNet, expected_counts, layer_plan, load_checkpoint
from .training import Vocabulary, corpus_stream, fixed_batches, synth_task, train_loop

SEED_ENV = "SLICENET_SEED"
CONFIG_NAME = "config.json"
SRC_VOCAB = "vocab.src.txt"
TGT_VOCAB = "vocab.tgt.txt"

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"slicenet: error: {msg}", file=sys.stderr)


def resolve_seed(cli_seed: Optional[int], cfg: ExperimentConfig) -> int:
    """``--seed`` wins over ``SLICENET_SEED``, which wins over the config."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.train.seed


# ------------------------------------------------------------------ train


def _data(cfg: ExperimentConfig, seed: int):
    d = cfg.data
    bs = cfg.train.batch_size
    if d.corpus is not None:
        c = d.corpus
        try:
            src_lines = Path(c.train_src).read_text(encoding="utf-8").splitlines()
            tgt_lines = Path(c.train_tgt).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise UsageError(f"cannot read corpus file {e.filename}: {e.strerror}") from None
        src_vocab = Vocabulary.build(src_lines, c.min_count)
        tgt_vocab = Vocabulary.build(tgt_lines, c.min_count)
        model = dataclasses.replace(cfg.model, vocab_src=len(src_vocab), vocab_tgt=len(tgt_vocab))
        cfg = dataclasses.replace(cfg, model=model)
        stream = corpus_stream(c.train_src, c.train_tgt, src_vocab, tgt_vocab, bs, seed, c.repeat)
        eval_stream = corpus_stream(c.eval_src, c.eval_tgt, src_vocab, tgt_vocab, bs, seed, repeat=True)
        eval_set = fixed_batches(eval_stream, cfg.train.eval_batches)
        return cfg, stream, eval_set, src_vocab, tgt_vocab
    v = cfg.model.vocab_src
    kw = dict(min_len=d.min_len, grammar_seed=d.grammar_seed, batch_size=bs)
    stream = synth_task(d.task, v, d.max_len, seed, **kw)
    eval_set = fixed_batches(synth_task(d.task, v, d.max_len, seed + d.eval_seed_offset, **kw), cfg.train.eval_batches)
    vocab = Vocabulary.numeric(v)
    return cfg, stream, eval_set, vocab, vocab


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    seed = resolve_seed(args.seed, cfg)
    cfg = cfg.with_seed(seed)
    cfg, stream, eval_set, src_vocab, tgt_vocab = _data(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_json(), encoding="utf-8")
    src_vocab.save(out / SRC_VOCAB)
    tgt_vocab.save(out / TGT_VOCAB)
    model = SliceNet(cfg.model, seed=seed)

    def progress(rec):
        print(
            f"step {rec.step}: loss {rec.loss:.4f} neg_log {rec.neg_log_ppl:.4f} acc {rec.accuracy:.4f}",
            file=sys.stderr,
            flush=True,
        )

    result = train_loop(model, stream, cfg.train, eval_set, out, progress if args.verbose else None)
    fin = result.final
    print(
        f"trained {fin.step} steps: neg_log {fin.neg_log_ppl:.4f} accuracy {fin.accuracy:.4f} "
        f"(best neg_log {result.best_neg_log_ppl:.4f} at step {result.best_step}); "
        f"checkpoint {out / 'final.ckpt'}"
    )
    return EXIT_OK


# ----------------------------------------------------------------- decode


def load_model(checkpoint, config_path=None):
    """Rebuild the model described by the config next to ``checkpoint`` and load the weights."""
    ckpt = Path(checkpoint)
    cfg_path = Path(config_path) if config_path else ckpt.parent / CONFIG_NAME
    cfg = config_mod.load(cfg_path)
    try:
        state = load_checkpoint(ckpt)
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {ckpt}: {e.strerror or e}") from None
    model = SliceNet(cfg.model, seed=0, zero=True)
    try:
        model.params.load_state(state)
    except ConfigurationError as e:
        raise ConfigurationError(f"checkpoint {ckpt} does not fit config {cfg_path}: {e}") from None
    return cfg, model


def _vocab(directory: Path, name: str, size: int) -> Vocabulary:
    p = directory / name
    vocab = Vocabulary.load(p) if p.exists() else Vocabulary.numeric(size)
    if len(vocab) != size:
        raise ConfigurationError(f"vocabulary {p} has {len(vocab)} entries, model expects {size}")
    return vocab


def cmd_decode(args) -> int:
    cfg, model = load_model(args.checkpoint, args.config)
    here = Path(args.checkpoint).parent
    src_vocab = _vocab(here, SRC_VOCAB, cfg.model.vocab_src)
    tgt_vocab = _vocab(here, TGT_VOCAB, cfg.model.vocab_tgt)
    dc = cfg.decode
    dcfg = DecodeConfig(
        beam=args.beam if args.beam is not None else dc.beam,
        alpha=args.alpha if args.alpha is not None else dc.alpha,
        max_len=args.max_len if args.max_len is not None else dc.max_len,
    )
    try:
        if args.input == "-":
            lines = sys.stdin.read().splitlines()
        else:
            lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UsageError(f"cannot read input {args.input}: {e.strerror or e}") from None
    encoded = [src_vocab.encode(line) for line in lines]
    todo = [i for i, ids in enumerate(encoded) if ids]

    def progress(i):
        print(f"decoded {i + 1}/{len(todo)}", file=sys.stderr, flush=True)

    hyps = decode_lines(model, [encoded[i] for i in todo], dcfg, args.workers, progress if args.verbose else None)
    out = [""] * len(lines)
    for i, h in zip(todo, hyps):
        out[i] = tgt_vocab.decode(strip_end(h.tokens))
    text = "".join(line + "\n" for line in out)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ audit


def audit_report(cfg: ExperimentConfig) -> dict:
    """Per-layer and total parameter counts plus multiply-adds per position."""
    mc = cfg.model
    rows = []
    for name, spec in layer_plan(mc):
        shared = mc.share_attention_kernels and name.endswith("attention/step2")
        params = 0 if shared else allocated_count(spec)
        row = {
            "layer": name,
            "mode": spec.mode.value,
            "k": spec.k,
            "d": spec.d,
            "c_in": spec.c_in,
            "c_out": spec.c_out,
            "g": spec.g,
            "params": params,
            "layer_norm": 0 if shared else 2,
            "flops_per_position": flops_per_position(spec),
        }
        if spec.c_in == spec.c_out and not shared:
            row["formula"] = param_count(spec)
        rows.append(row)
    emb, non_emb = expected_counts(mc)
    conv = sum(r["params"] for r in rows)
    ln = sum(r["layer_norm"] for r in rows)
    return {
        "layers": rows,
        "conv_params": conv,
        "layer_norm_params": ln,
        "projection_params": 0 if mc.tie_projection else mc.depth * mc.vocab_tgt,
        "embedding": emb,
        "non_embedding": non_emb,
        "total": emb + non_emb,
        "flops_per_position": sum(r["flops_per_position"] for r in rows),
    }


def _fmt_audit(rep: dict) -> str:
    head = f"{'layer':<34} {'mode':<9} {'k':>3} {'d':>3} {'c_in':>6} {'c_out':>6} {'g':>3} {'params':>12} {'flops/pos':>12}"
    lines = [head, "-" * len(head)]
    for r in rep["layers"]:
        lines.append(
            f"{r['layer']:<34} {r['mode']:<9} {r['k']:>3} {r['d']:>3} {r['c_in']:>6} {r['c_out']:>6} "
            f"{r['g']:>3} {r['params']:>12,} {r['flops_per_position']:>12,}"
        )
    lines.append("-" * len(head))
    lines.append(f"conv kernels        {rep['conv_params']:>14,}")
    lines.append(f"layer-norm scalars  {rep['layer_norm_params']:>14,}")
    if rep["projection_params"]:
        lines.append(f"output projection   {rep['projection_params']:>14,}")
    lines.append(f"non-embedding       {rep['non_embedding']:>14,}")
    lines.append(f"embedding           {rep['embedding']:>14,}")
    lines.append(f"total               {rep['total']:>14,}")
    lines.append(f"flops per position  {rep['flops_per_position']:>14,}")
    return "\n".join(lines) + "\n"


def cmd_audit(args) -> int:
    cfg = config_mod.load(args.config)
    rep = audit_report(cfg)
    sys.stdout.write(json.dumps(rep, indent=2) + "\n" if args.json else _fmt_audit(rep))
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def parse_stack(text: str) -> list:
    """Stack description to ConvSpecs.

    Accepted JSON shapes:

    * ``[[k, d], ...]`` or ``[{"k": 3, "d": 2}, ...]``
    * ``{"k": [3, 3], "d": [1, 2]}`` (``d`` defaults to all ones)
    * either object form wrapped as ``{"layers": [...], "channels": 64,
      "mode": "separable", "g": 1, "padding": "same"}``
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"stack is not valid JSON ({e.msg} at line {e.lineno} column {e.colno})") from None
    opts = {"channels": 64, "mode": "separable", "g": 1, "padding": "same"}
    if isinstance(raw, dict) and "layers" in raw:
        extra = set(raw) - set(opts) - {"layers"}
        if extra:
            raise UsageError(f"unknown stack keys: {sorted(extra)}")
        opts.update({k: raw[k] for k in opts if k in raw})
        raw = raw["layers"]
    pairs = []
    if isinstance(raw, dict):
        extra = set(raw) - {"k", "d"}
        if extra or "k" not in raw:
            raise UsageError("stack object needs a 'k' list and optionally a 'd' list")
        ks = raw["k"]
        ds = raw.get("d", [1] * len(ks) if isinstance(ks, list) else None)
        if not isinstance(ks, list) or not isinstance(ds, list) or len(ks) != len(ds):
            raise UsageError("stack 'k' and 'd' must be lists of equal length")
        pairs = list(zip(ks, ds))
    elif isinstance(raw, list):
        for item in raw:
            if isinstance(item, dict) and set(item) <= {"k", "d"} and "k" in item:
                pairs.append((item["k"], item.get("d", 1)))
            elif isinstance(item, list) and len(item) == 2:
                pairs.append(tuple(item))
            else:
                raise UsageError(f"cannot read stack layer {item!r}")
    else:
        raise UsageError("stack must be a JSON list or object")
    if not pairs:
        raise UsageError("stack is empty")
    for k, d in pairs:
        if not (isinstance(k, int) and isinstance(d, int)) or isinstance(k, bool) or isinstance(d, bool):
            raise UsageError(f"layer (k={k!r}, d={d!r}) needs integer k and d")
    try:
        mode = parse_mode(opts["mode"])
        padding = parse_padding(opts["padding"])
        c, g = int(opts["channels"]), int(opts["g"])
        return [ConvSpec(k=k, d=d, c_in=c, c_out=c, mode=mode, g=g, padding=padding) for k, d in pairs]
    except (ConfigurationError, ValueError, TypeError) as e:
        raise UsageError(f"invalid stack: {e}") from None


def analyze_report(stack: Sequence[ConvSpec]) -> dict:
    def describe(st):
        prof = coverage_profile(st)
        return {
            "layers": [[s.k, s.d] for s in st],
            "receptive_field": receptive_field(st),
            "coverage": dict(zip((str(o) for o in prof.offsets), prof.counts)),
            "dead_zones": prof.dead_zones,
            "params": sum(allocated_count(s) for s in st),
        }

    main = describe(stack)
    main["probe_receptive_field"] = probe_receptive_field(stack)[0]
    alt = describe(undilated_alternative(stack))
    spec = stack[0]
    return {
        "channels": spec.c_in,
        "mode": spec.mode.value,
        "g": spec.g,
        "padding": spec.padding.value,
        "stack": main,
        "undilated_alternative": alt,
        "param_ratio": alt["params"] / main["params"] if main["params"] else None,
    }


def _fmt_analyze(rep: dict) -> str:
    def block(title, st):
        out = [f"{title}: layers (k, d) = {', '.join(f'({k},{d})' for k, d in st['layers'])}"]
        out.append(f"  receptive field      {st['receptive_field']}")
        if "probe_receptive_field" in st:
            out.append(f"  probed extent        {st['probe_receptive_field']}")
        out.append(f"  parameters           {st['params']:,}")
        dz = st["dead_zones"]
        out.append(f"  dead zones           {len(dz)}" + (f" at offsets {dz}" if dz else ""))
        out.append("  coverage (offset: paths)")
        items = list(st["coverage"].items())
        for i in range(0, len(items), 8):
            out.append("    " + "  ".join(f"{o:>4}:{n:<5}" for o, n in items[i : i + 8]).rstrip())
        return out

    lines = [f"channels {rep['channels']}, mode {rep['mode']}, g {rep['g']}, padding {rep['padding']}"]
    lines += block("stack", rep["stack"])
    lines += block("undilated alternative", rep["undilated_alternative"])
    if rep["param_ratio"] is not None:
        lines.append(f"parameter ratio (alternative / stack): {rep['param_ratio']:.3f}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    text = args.stack
    if not text.lstrip().startswith(("[", "{")):
        try:
            text = Path(text).read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"stack is neither JSON nor a readable file: {args.stack} ({e.strerror or e})") from None
    rep = analyze_report(parse_stack(text))
    sys.stdout.write(json.dumps(rep, indent=2) + "\n" if args.json else _fmt_analyze(rep))
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicenet", description="Depthwise-separable convolutional seq2seq toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help=f"overrides {SEED_ENV} and the config seed")
    t.add_argument("--out", required=True, help="output directory for checkpoints, metrics and config echo")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="beam-decode one source per input line")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config", default=None, help=f"defaults to {CONFIG_NAME} next to the checkpoint")
    d.add_argument("--input", required=True, help="input file, or - for stdin")
    d.add_argument("--out", default=None)
    d.add_argument("--beam", type=int, default=None, help="beam size (config value, default 4)")
    d.add_argument("--alpha", type=float, default=None, help="length penalty exponent")
    d.add_argument("--max-len", type=int, default=None, dest="max_len")
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--verbose", action="store_true")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("audit", help="per-layer parameter and cost report")
    a.add_argument("--config", required=True)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_audit)

    z = sub.add_parser("analyze", help="receptive field and coverage of a conv stack")
    z.add_argument("--stack", required=True, help="inline JSON or a path to a JSON file")
    z.add_argument("--json", action="store_true")
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "beam", None) is not None and args.beam < 1:
            raise UsageError(f"--beam must be >= 1, got {args.beam}")
        # non-finite values are caught explicitly (exit 3); numpy's own
        # warnings would only add noise on stderr
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except NonFiniteError as e:
        _err(str(e))
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, InputError, DataExhaustedError) as e:
        _err(str(e))
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
