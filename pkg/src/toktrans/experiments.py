"""Desk-scale experiments shared by the acceptance suite and scripts/.

Everything here runs on synthetic corpora with small models so that a full
three-seed sweep fits in a few CPU minutes. The data is fixed across seeds;
a seed changes source pretraining, translator initialisation and batching.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from .coupling import entropy, sparsity
from .lm import LmConfig, LmParams, evaluate
from .synthetic import english_like_corpus, protein_like_corpus
from .tokenizer import Corpus, TokenizerModel, byte_tokenizer, pack_sequences
from .train import (
    RunConfig,
    SuiteData,
    make_marginals,
    prepare_target_tokenizer,
    run_baseline_suite,
    train_source_model,
    train_translator,
    transfer_translator,
    truncated_model,
)


@dataclass(frozen=True)
class DeskConfig:
    source_sentences: int = 3000
    target_sequences: int = 700
    holdout_frac: float = 0.15
    target_vocab: int = 512
    d: int = 64
    large_d: int = 128
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    pretrain_steps: int = 400
    translator_steps: int = 600
    finetune_steps: int = 200


@dataclass
class DeskData:
    source_corpus: Corpus
    target_train: Corpus
    target_eval: Corpus
    source_tok: TokenizerModel
    target_tok: TokenizerModel


@functools.lru_cache(maxsize=4)
def desk_data(cfg: DeskConfig = DeskConfig()) -> DeskData:
    src = english_like_corpus(cfg.source_sentences, seed=0)
    prot = protein_like_corpus(cfg.target_sequences, seed=1)
    train, held = prot.split(cfg.holdout_frac, seed=0)
    tgt_tok = prepare_target_tokenizer(train, cfg.target_vocab, alphabet="corpus")
    return DeskData(src, train, held, byte_tokenizer(), tgt_tok)


def _lm_config(cfg: DeskConfig, d: int, vocab: int) -> LmConfig:
    return LmConfig(vocab=vocab, d=d, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                    context_len=cfg.context_len)


@functools.lru_cache(maxsize=16)
def source_model(cfg: DeskConfig, seed: int, d: int | None = None) -> LmParams:
    """Byte-level source model pretrained on the English-like corpus."""
    data = desk_data(cfg)
    lm_cfg = _lm_config(cfg, d or cfg.d, data.source_tok.size)
    model, _ = train_source_model(data.source_corpus, data.source_tok, lm_cfg,
                                  steps=cfg.pretrain_steps, seed=seed)
    return model


def run_config(cfg: DeskConfig, seed: int, **kw) -> RunConfig:
    return RunConfig(steps=cfg.translator_steps, context_len=cfg.context_len, seed=seed, **kw)


def desk_table(cfg: DeskConfig, seed: int) -> tuple[list[dict], dict]:
    """One seed of the method comparison. Returns (rows, artifacts)."""
    data = desk_data(cfg)
    suite = SuiteData(source_model(cfg, seed), data.source_tok, data.target_tok,
                      data.target_train, data.target_eval, data.source_corpus)
    return run_baseline_suite(suite, run_config(cfg, seed), finetune_steps=cfg.finetune_steps)


def weak_to_strong(cfg: DeskConfig, seed: int, coupling=None) -> dict:
    """Move a coupling learned on the small model onto a wider one.

    If no coupling is given, one is trained on the small model first.
    """
    data = desk_data(cfg)
    small = source_model(cfg, seed)
    if coupling is None:
        blocks = pack_sequences(data.target_train, data.target_tok, cfg.context_len)
        m = make_marginals("uniform", small, data.target_tok, data.source_tok, data.target_train)
        coupling = train_translator(small, blocks, m, run_config(cfg, seed)).coupling
    large = source_model(cfg, seed, cfg.large_d)
    moved = evaluate(transfer_translator(coupling, large), data.target_tok, data.target_eval)
    trunc = evaluate(truncated_model(large, data.target_tok.size, seed), data.target_tok, data.target_eval)
    return {"seed": seed, "transfer_nll": moved.mean_nll, "truncation_nll": trunc.mean_nll,
            "uniform_nll": math.log(data.target_tok.size)}


def entropy_sweep(cfg: DeskConfig, seed: int, alphas=(0.0, 0.01, 0.1), known: dict | None = None) -> list[dict]:
    """Final coupling entropy and sparsity for each regulariser weight.

    `known` maps alpha to an already trained coupling for this seed (for
    example the alpha=0 run of `desk_table`) so it is not trained twice.
    """
    known = known or {}
    data = desk_data(cfg)
    src = source_model(cfg, seed)
    blocks = pack_sequences(data.target_train, data.target_tok, cfg.context_len)
    m = make_marginals("uniform", src, data.target_tok, data.source_tok, data.target_train)
    out = []
    for a in alphas:
        if a in known:
            P = known[a].P
        else:
            P = train_translator(src, blocks, m, run_config(cfg, seed, entropy_alpha=a)).coupling.P
        out.append({"alpha": a, "seed": seed, "entropy": entropy(P), "sparsity": sparsity(P)})
    return out


def median_by(rows: list[dict], key: str, value: str) -> dict:
    """Median of `value` grouped by `key`."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in groups.items()}


def with_overrides(cfg: DeskConfig, **kw) -> DeskConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
