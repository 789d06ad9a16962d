"""``toktrans`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
Errors are reported on stderr as one JSON line ``{"error": ..., "code": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import NumericalError
from .config import ConfigError, ExperimentConfig, config_from_dict, default_seed, load_config
from .coupling import Marginals
from .lm import LmConfig, evaluate
from .tokenizer import (
    DataError,
    TokenizerModel,
    byte_tokenizer,
    compression_ratio,
    ingest,
    pack_sequences,
    train_bpe,
)
from .train import (
    RunConfig,
    SuiteData,
    config_hash,
    finetune_whole,
    format_table,
    make_marginals,
    run_baseline_suite,
    train_source_model,
    train_translator,
    transfer_translator,
    translated_model,
    truncated_model,
)

log = logging.getLogger("toktrans")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _load_tok(spec: str) -> TokenizerModel:
    return byte_tokenizer() if spec == "byte" else TokenizerModel.load(spec)


def _meta(args, cfg_doc: dict, mode: str) -> dict:
    return {"seed": args.seed, "mode": mode, "config_doc": cfg_doc, "config_hash": config_hash(cfg_doc)}


def _metrics_writer(path):
    if not path:
        return None, None
    fh = open(path, "w")

    def write(rec):
        fh.write(json.dumps(rec) + "\n")

    return write, fh


def _run_config(args, mode: str) -> RunConfig:
    return RunConfig(
        mode=mode, entropy_alpha=getattr(args, "entropy_alpha", 0.0), steps=args.steps,
        batch_size=args.batch_size, grad_accum=getattr(args, "grad_accum", 1), seed=args.seed,
        sinkhorn_iters=getattr(args, "sinkhorn_iters", 3), lr=args.lr,
        marginals=getattr(args, "marginals", "uniform"),
        embedding_scaling=getattr(args, "embedding_scaling", "mu"),
        corrections=not getattr(args, "no_corrections", False),
    )


# ---------------------------------------------------------------- commands

def cmd_tokenizer_train(args):
    corpus = ingest(args.input)
    tok = train_bpe(corpus, args.vocab_size, alphabet=args.alphabet)
    tok.save(args.out)
    print(json.dumps({"vocab_size": tok.size, "merges": len(tok.merges),
                      "compression_ratio": compression_ratio(tok, corpus)}))


def cmd_tokenizer_stats(args):
    tok = _load_tok(args.tokenizer)
    corpus = ingest(args.input)
    out = {"vocab_size": tok.size, "sequences": len(corpus), "bytes": corpus.byte_count,
           "compression_ratio": compression_ratio(tok, corpus)}
    if args.reference is not None:
        out["reference"] = args.reference
        out["difference"] = out["compression_ratio"] - args.reference
    print(json.dumps(out))


def cmd_pretrain(args):
    corpus = ingest(args.input)
    tok = byte_tokenizer()
    cfg = LmConfig(tok.size, args.d, args.layers, args.heads, args.context_len)
    write, fh = _metrics_writer(args.metrics)
    try:
        model, history = train_source_model(corpus, tok, cfg, args.steps, seed=args.seed, lr=args.lr,
                                            batch_size=args.batch_size, on_step=write)
    finally:
        if fh:
            fh.close()
    doc = {"command": "pretrain", "model": cfg.to_dict(), "steps": args.steps, "lr": args.lr,
           "batch_size": args.batch_size, "seed": args.seed}
    ckpt.save_model(args.out, model, _meta(args, doc, "pretrain"))
    print(json.dumps({"final_nll": history[-1]["nll"] if history else None, "out": args.out}))


def cmd_translate_train(args):
    source, _ = ckpt.load_model(args.model)
    tok = _load_tok(args.tokenizer)
    corpus = ingest(args.input)
    cfg = _run_config(args, args.mode)
    cfg = replace(cfg, context_len=source.config.context_len)
    blocks = pack_sequences(corpus, tok, source.config.context_len)
    m = None
    if args.mode != "unconstrained":
        src_corpus = ingest(args.source_corpus) if args.source_corpus else None
        m = make_marginals(cfg.marginals, source, tok, byte_tokenizer(), corpus, src_corpus)
    write, fh = _metrics_writer(args.metrics)
    try:
        res = train_translator(source, blocks, m, cfg, on_step=write)
    finally:
        if fh:
            fh.close()
    meta = _meta(args, cfg.to_dict(), args.mode)
    if res.coupling is not None:
        ckpt.save_coupling(args.out, res.coupling, res.weights, meta)
    else:
        ckpt.save_checkpoint(args.out, {"translator/W": res.weights}, {"kind": "unconstrained", **meta})
    if args.model_out:
        ckpt.save_model(args.model_out, res.model, meta)
    summary = {"out": args.out, "final_loss": res.history[-1]["loss"] if res.history else None}
    if res.coupling is not None:
        from .coupling import entropy, sparsity

        summary.update(entropy=entropy(res.coupling), sparsity=sparsity(res.coupling),
                       row_err=res.coupling.row_err, col_err=res.coupling.col_err)
    print(json.dumps(summary))


_INIT_MODES = {"s2t2": "s2t2", "dense": "dense_sinkhorn", "unconstrained": "unconstrained"}


def _init_model(args, source, tok):
    if args.init == "orig-tok":
        return source, "ft_orig_tok"
    if args.init == "new-tok-truncate":
        return truncated_model(source, tok.size, args.seed), "ft_new_tok"
    if not args.translator:
        raise ConfigError(f"--init {args.init} needs --translator")
    tensors, meta = ckpt.load_checkpoint(args.translator)
    mode = _INIT_MODES[args.init]
    if meta.get("mode") != mode:
        raise ConfigError(f"translator checkpoint was trained with mode {meta.get('mode')!r}, not {mode!r}")
    doc = meta.get("config_doc", {})
    cfg = RunConfig(mode=mode, sinkhorn_iters=doc.get("sinkhorn_iters", 3),
                    embedding_scaling=doc.get("embedding_scaling", "mu"),
                    corrections=doc.get("corrections", True))
    if mode == "unconstrained":
        model, _ = translated_model(source, mode, tensors["translator/W"], None, cfg)
    else:
        m = Marginals(tensors["marginals/mu"], tensors["marginals/nu"])
        model, _ = translated_model(source, mode, tensors["coupling/C"], m, cfg)
    return model, mode


def cmd_finetune(args):
    source, _ = ckpt.load_model(args.model)
    tok = byte_tokenizer() if args.init == "orig-tok" else _load_tok(args.tokenizer)
    model, mode = _init_model(args, source, tok)
    corpus = ingest(args.input)
    cfg = replace(_run_config(args, "ft_new_tok" if mode != "ft_orig_tok" else mode),
                  context_len=source.config.context_len, weight_decay=args.weight_decay)
    blocks = pack_sequences(corpus, tok, source.config.context_len)
    write, fh = _metrics_writer(args.metrics)
    try:
        tuned, history = finetune_whole(model, blocks, cfg, on_step=write)
    finally:
        if fh:
            fh.close()
    ckpt.save_model(args.out, tuned, _meta(args, {**cfg.to_dict(), "init": args.init}, cfg.mode))
    print(json.dumps({"out": args.out, "final_nll": history[-1]["nll"] if history else None}))


def cmd_eval(args):
    model, _ = ckpt.load_model(args.model)
    tok = _load_tok(args.tokenizer)
    rep = evaluate(model, tok, ingest(args.input))
    print(json.dumps(rep.to_dict()))


def cmd_transfer(args):
    cp, _, meta = ckpt.load_coupling(args.coupling)
    target, _ = ckpt.load_model(args.model)
    scaling = args.embedding_scaling or meta.get("config_doc", {}).get("embedding_scaling", "mu")
    model = transfer_translator(cp, target, scaling)
    ckpt.save_model(args.out, model, _meta(args, {"coupling": str(args.coupling), "model": str(args.model),
                                                  "embedding_scaling": scaling}, "transfer"))
    out = {"out": args.out}
    if args.input and args.tokenizer:
        out["eval"] = evaluate(model, _load_tok(args.tokenizer), ingest(args.input)).to_dict()
    print(json.dumps(out))


def cmd_suite(args):
    if args.config:
        exp = load_config(args.config)
    else:
        exp = config_from_dict({})
        exp.paths.source_corpus, exp.paths.target_corpus = args.source_corpus, args.target_corpus
        exp.seeds = [args.seed]
        exp.target_vocab = args.vocab_size
        exp.run = replace(exp.run, steps=args.steps, batch_size=args.batch_size, context_len=args.context_len)
        exp.model = replace(exp.model, d=args.d, n_layers=args.layers, n_heads=args.heads,
                            pretrain_steps=args.pretrain_steps)
    rows = run_suite_from_config(exp)
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps({"columns": ["mode", "perplexity", "bpb", "steps", "seed"],
                                              "rows": rows, "config_hash": exp.hash()}, indent=1))


def run_suite_from_config(exp: ExperimentConfig) -> list[dict]:
    p = exp.paths
    if not p.source_corpus or not p.target_corpus:
        raise ConfigError("suite needs paths.source_corpus and paths.target_corpus")
    src_corpus = ingest(p.source_corpus)
    target = ingest(p.target_corpus)
    if p.eval_corpus:
        train_c, eval_c = target, ingest(p.eval_corpus)
    else:
        train_c, eval_c = target.split(0.15, seed=0)
    btok = byte_tokenizer()
    tgt_tok = TokenizerModel.load(p.tokenizer) if p.tokenizer else train_bpe(train_c, exp.target_vocab,
                                                                              alphabet="corpus")
    ctx = exp.run.context_len
    rows = []
    for seed in exp.seeds:
        if p.source_checkpoint:
            source, _ = ckpt.load_model(p.source_checkpoint)
        else:
            cfg = LmConfig(btok.size, exp.model.d, exp.model.n_layers, exp.model.n_heads, ctx)
            source, _ = train_source_model(src_corpus, btok, cfg, exp.model.pretrain_steps, seed=seed,
                                           lr=exp.model.pretrain_lr, batch_size=exp.run.batch_size)
        data = SuiteData(source, btok, tgt_tok, train_c, eval_c, src_corpus)
        r, _ = run_baseline_suite(data, replace(exp.run, seed=seed, context_len=source.config.context_len),
                                  exp.finetune_steps)
        rows.extend(r)
    return rows


# ---------------------------------------------------------------- parser

def _add_train_flags(p, steps=500, lr=None):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-accum", type=int, default=1)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--metrics", help="JSON-lines metrics log path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toktrans", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="defaults to $TOKTRANS_SEED or 0")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tk = sub.add_parser("tokenizer").add_subparsers(dest="tok_command", required=True)
    p = tk.add_parser("train", help="train a BPE tokenizer")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--alphabet", choices=("bytes", "corpus"), default="bytes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer_train)
    p = tk.add_parser("stats", help="compression ratio of a tokenizer on a corpus")
    p.add_argument("--tokenizer", required=True, help="tokenizer JSON or 'byte'")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", type=float, default=None, help="ratio to compare against, e.g. 1.82")
    p.set_defaults(func=cmd_tokenizer_stats)

    p = sub.add_parser("pretrain", help="train a desk-scale byte-level source model")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--context-len", type=int, default=256)
    _add_train_flags(p, lr=3e-3)
    p.set_defaults(func=cmd_pretrain)

    tr = sub.add_parser("translate").add_subparsers(dest="tr_command", required=True)
    p = tr.add_parser("train", help="learn a token translator with the source model frozen")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out")
    p.add_argument("--mode", choices=("s2t2", "dense_sinkhorn", "unconstrained"), default="s2t2")
    p.add_argument("--entropy-alpha", type=float, default=0.0)
    p.add_argument("--sinkhorn-iters", type=int, default=3)
    p.add_argument("--marginals", choices=("uniform", "empirical"), default="uniform")
    p.add_argument("--source-corpus", help="source-domain text for empirical source marginals")
    p.add_argument("--embedding-scaling", choices=("mu", "nu"), default="mu")
    p.add_argument("--no-corrections", action="store_true", help="dense mode: drop Dykstra corrections")
    _add_train_flags(p)
    p.set_defaults(func=cmd_translate_train)

    p = sub.add_parser("finetune", help="whole-model finetuning (CFT and FT baselines)")
    p.add_argument("--model", required=True, help="source model checkpoint")
    p.add_argument("--init", choices=("s2t2", "dense", "unconstrained", "orig-tok", "new-tok-truncate"),
                   required=True)
    p.add_argument("--translator", help="translator checkpoint for s2t2/dense/unconstrained init")
    p.add_argument("--tokenizer", help="target tokenizer JSON (not needed for orig-tok)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weight-decay", type=float, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="perplexity and bits-per-byte")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True, help="tokenizer JSON or 'byte'")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="apply a saved coupling to another model")
    p.add_argument("--coupling", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedding-scaling", choices=("mu", "nu"))
    p.add_argument("--tokenizer")
    p.add_argument("--input", help="optional corpus to evaluate the transferred model on")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("suite", help="side-by-side comparison of every method")
    p.add_argument("--config", help="experiment config JSON (overrides the flags below)")
    p.add_argument("--source-corpus")
    p.add_argument("--target-corpus")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--context-len", type=int, default=256)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--pretrain-steps", type=int, default=500)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", help="write the comparison table as JSON")
    p.set_defaults(func=cmd_suite)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.seed is None:
            args.seed = default_seed()
        args.func(args)
    except (ConfigError, ValueError) as e:
        code = EXIT_DATA if isinstance(e, (DataError, ckpt.CheckpointError)) else EXIT_CONFIG
        return _fail(e, code)
    except (OSError, KeyError, IndexError) as e:
        return _fail(e, EXIT_DATA)
    except (NumericalError, FloatingPointError) as e:
        return _fail(e, EXIT_NUMERIC)
    return 0


def _fail(e: BaseException, code: int) -> int:
    print(json.dumps({"error": type(e).__name__, "code": code, "message": str(e)}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
