"""Training recipes: source pretraining, translator training, finetuning,
baseline suite and cross-model transfer."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .coupling import (
    Coupling,
    Marginals,
    entropy_op,
    init_weights,
    marginal_residual,
    project_tensor,
    sparsity,
)
from .lm import EvalReport, LmConfig, LmParams, evaluate, init_params, nll_loss
from .optim import OptimizerState, Schedule, adamw_step, lr_at
from .tokenizer import Corpus, TokenizerModel, byte_tokenizer, pack_sequences, token_counts, train_bpe
from .translation import (
    build_translated_model,
    translate_heads,
    truncation_resize,
    unconstrained_translate,
)

log = logging.getLogger(__name__)

Mode = Literal["s2t2", "dense_sinkhorn", "unconstrained", "ft_orig_tok", "ft_new_tok"]
MODES: tuple[str, ...] = ("s2t2", "dense_sinkhorn", "unconstrained", "ft_orig_tok", "ft_new_tok")
TRANSLATOR_MODES = ("s2t2", "dense_sinkhorn", "unconstrained")

# learning rates and decay quoted for the translator / whole-model recipes
TRANSLATOR_LR = 1e-3
TRANSFER_LR = 2e-5
FINETUNE_LR = 2e-5
FINETUNE_WEIGHT_DECAY = 0.01


@dataclass
class RunConfig:
    mode: str = "s2t2"
    entropy_alpha: float = 0.0
    steps: int = 500
    batch_size: int = 8
    grad_accum: int = 1
    context_len: int = 256
    seed: int = 0
    sinkhorn_iters: int = 3
    lr: float | None = None
    weight_decay: float | None = None
    marginals: str = "uniform"
    embedding_scaling: str = "mu"
    corrections: bool = True
    c_init: str = "constant"
    warmup_frac: float = 0.2
    final_frac: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.entropy_alpha < 0:
            raise ValueError("entropy_alpha must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("steps must be >= 0 and batch sizes positive")
        if self.marginals not in ("uniform", "empirical"):
            raise ValueError("marginals must be 'uniform' or 'empirical'")
        if self.embedding_scaling not in ("mu", "nu"):
            raise ValueError("embedding_scaling must be 'mu' or 'nu'")

    def translator_lr(self) -> float:
        return TRANSLATOR_LR if self.lr is None else self.lr

    def finetune_lr(self) -> float:
        return FINETUNE_LR if self.lr is None else self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: dict) -> str:
    import json

    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


class BatchStream:
    """Epoch-shuffled mini-batches of packed blocks."""

    def __init__(self, blocks: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(blocks) == 0:
            raise ValueError("no training blocks")
        self.blocks, self.batch_size, self.rng = blocks, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(len(self.blocks))])
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size:]
        return self.blocks[idx]


def _optimise(trainable: dict[str, np.ndarray], loss_fn: Callable, blocks: np.ndarray,
              cfg: RunConfig, lr: float, weight_decay: float,
              on_step: Callable | None = None) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Generic loop: ``loss_fn(tensors, batch) -> (loss, record)``."""
    rng = np.random.default_rng(cfg.seed)
    stream = BatchStream(blocks, cfg.batch_size, rng)
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    sched = Schedule(lr, max(cfg.steps, 1), cfg.warmup_frac, cfg.final_frac)
    history: list[dict] = []
    params = dict(trainable)
    for step in range(cfg.steps):
        grads: dict[str, np.ndarray] = {}
        records = []
        for _ in range(cfg.grad_accum):
            tensors = {k: Tensor(v, requires_grad=True, name=k, dtype=v.dtype) for k, v in params.items()}
            loss, rec = loss_fn(tensors, stream.next())
            if not math.isfinite(float(loss.data)):
                raise NumericalError(f"loss is not finite at step {step}: {rec}")
            ad.backward(loss)
            for k, t in tensors.items():
                if t.grad is not None:
                    g = t.grad / cfg.grad_accum
                    grads[k] = grads[k] + g if k in grads else g
            records.append(rec)
        lr_t = lr_at(sched, step + 1)
        params = adamw_step(params, grads, state, lr_t)
        rec = {k: float(np.mean([r[k] for r in records])) if records[0][k] is not None else None
               for k in records[0]}
        rec = {"step": step + 1, "lr": lr_t, **rec}
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return params, history


# ---------------------------------------------------------------- source model

def train_source_model(corpus: Corpus, tok: TokenizerModel, config: LmConfig, steps: int,
                       seed: int = 0, lr: float = 3e-3, batch_size: int = 8,
                       weight_decay: float = 0.01, on_step: Callable | None = None) -> tuple[LmParams, list[dict]]:
    """Pretrain a desk-scale source model from random init."""
    if tok.size != config.vocab:
        raise ValueError("tokenizer size does not match model vocabulary")
    model = init_params(config, seed)
    blocks = pack_sequences(corpus, tok, config.context_len)
    cfg = RunConfig(mode="ft_orig_tok", steps=steps, batch_size=batch_size,
                    context_len=config.context_len, seed=seed)

    def loss_fn(t, batch):
        loss = nll_loss(LmParams(config, t), batch)
        return loss, {"loss": float(loss.data), "nll": float(loss.data)}

    arrays, history = _optimise(model.arrays(), loss_fn, blocks, cfg, lr, weight_decay, on_step)
    return _from_arrays(config, arrays), history


def _from_arrays(config: LmConfig, arrays: dict[str, np.ndarray]) -> LmParams:
    return LmParams(config, {k: Tensor(v, name=k, dtype=v.dtype) for k, v in arrays.items()})


# ---------------------------------------------------------------- translators

def make_marginals(kind: str, source_model: LmParams, target_tok: TokenizerModel,
                   source_tok: TokenizerModel | None = None, target_corpus: Corpus | None = None,
                   source_corpus: Corpus | None = None) -> Marginals:
    v, u = source_model.vocab, target_tok.size
    if kind == "uniform":
        return Marginals.uniform(v, u)
    if kind == "empirical":
        if source_tok is None or target_corpus is None:
            raise ValueError("empirical marginals need the source tokenizer and target corpus")
        src = token_counts(source_tok, source_corpus if source_corpus is not None else target_corpus)
        return Marginals.from_counts(src, token_counts(target_tok, target_corpus))
    raise ValueError(f"unknown marginals {kind!r}")


@dataclass
class TranslatorResult:
    mode: str
    weights: np.ndarray  # C (coupling modes) or W (unconstrained)
    marginals: Marginals | None
    coupling: Coupling | None
    model: LmParams  # source encoder with translated heads baked in
    history: list[dict] = field(default_factory=list)


def _coupling_from_weights(C: np.ndarray, m: Marginals, cfg: RunConfig) -> Coupling:
    from .coupling import _alternating_projections

    method = "sparsemax" if cfg.mode == "s2t2" else "softmax"
    corrections = True if cfg.mode == "s2t2" else cfg.corrections
    return _alternating_projections(C, m, cfg.sinkhorn_iters, method, corrections)


def translated_model(source: LmParams, mode: str, weights: np.ndarray, m: Marginals | None,
                     cfg: RunConfig) -> tuple[LmParams, Coupling | None]:
    """Bake a trained translator into a standalone target-vocabulary model."""
    if mode == "unconstrained":
        heads = unconstrained_translate(source.E, source.L, weights)
        return source.with_heads(heads.E_prime.detach(), heads.L_prime.detach()), None
    cp = _coupling_from_weights(weights, m, replace(cfg, mode=mode))
    model = build_translated_model(source, cp, m, cfg.embedding_scaling)
    return model.with_heads(model.E.detach(), model.L.detach()), cp


def train_translator(source_model: LmParams, blocks: np.ndarray, m: Marginals | None, cfg: RunConfig,
                     C: np.ndarray | None = None, on_step: Callable | None = None) -> TranslatorResult:
    """Learn C (or W) with the source model frozen.

    Each step: P = project(C), build E'/L', loss = nll + entropy_alpha * H(P),
    backpropagate through the projections to C, AdamW update.
    """
    if cfg.mode not in TRANSLATOR_MODES:
        raise ValueError(f"{cfg.mode} is not a translator mode")
    v = source_model.vocab
    u = int(blocks.max()) + 1 if m is None else m.shape[1]
    if m is not None and m.shape[0] != v:
        raise ValueError(f"marginals expect {m.shape[0]} source tokens, model has {v}")
    if C is None:
        C = init_weights(v, u, cfg.c_init, np.random.default_rng(cfg.seed))
    frozen = LmParams(source_model.config, {k: Tensor(t.data, name=k, dtype=t.data.dtype)
                                            for k, t in source_model.params.items()})
    method = "sparsemax" if cfg.mode == "s2t2" else "softmax"
    corrections = True if cfg.mode == "s2t2" else cfg.corrections

    def loss_fn(t, batch):
        W = t["C"]
        if cfg.mode == "unconstrained":
            heads = unconstrained_translate(frozen.E, frozen.L, W)
            nll = nll_loss(frozen, batch, heads.E_prime, heads.L_prime)
            return nll, {"loss": float(nll.data), "nll": float(nll.data), "entropy": None,
                         "row_err": None, "col_err": None, "sparsity": None}
        P = project_tensor(W, m, cfg.sinkhorn_iters, method, corrections)
        heads = translate_heads(frozen.E, frozen.L, P, m, cfg.embedding_scaling)
        nll = nll_loss(frozen, batch, heads.E_prime, heads.L_prime)
        H = entropy_op(P)
        loss = nll + ad.scale(H, cfg.entropy_alpha) if cfg.entropy_alpha else nll
        row_err, col_err = marginal_residual(P.data, m)
        return loss, {"loss": float(loss.data), "nll": float(nll.data), "entropy": float(H.data),
                      "row_err": row_err, "col_err": col_err, "sparsity": sparsity(P.data)}

    arrays, history = _optimise({"C": np.asarray(C, dtype=source_model.E.data.dtype)}, loss_fn, blocks,
                                cfg, cfg.translator_lr(), 0.0, on_step)
    weights = arrays["C"]
    model, cp = translated_model(source_model, cfg.mode, weights, m, cfg)
    return TranslatorResult(cfg.mode, weights, m, cp, model, history)


def finetune_whole(model: LmParams, blocks: np.ndarray, cfg: RunConfig,
                   on_step: Callable | None = None) -> tuple[LmParams, list[dict]]:
    """Train every parameter (lr 2e-5, weight decay 0.01 unless overridden)."""
    wd = FINETUNE_WEIGHT_DECAY if cfg.weight_decay is None else cfg.weight_decay
    config = model.config

    def loss_fn(t, batch):
        loss = nll_loss(LmParams(config, t), batch)
        return loss, {"loss": float(loss.data), "nll": float(loss.data)}

    arrays, history = _optimise(model.arrays(), loss_fn, blocks, cfg, cfg.finetune_lr(), wd, on_step)
    return _from_arrays(config, arrays), history


def truncated_model(source: LmParams, u: int, seed: int = 0) -> LmParams:
    heads = truncation_resize(source.E, source.L, u, seed)
    return source.with_heads(heads.E_prime, heads.L_prime)


def transfer_translator(P: Coupling, target_model: LmParams, scaling: str = "mu") -> LmParams:
    """Apply a coupling learned on one model to another with the same source vocabulary."""
    v = P.shape[0]
    if target_model.vocab != v:
        raise ValueError(f"coupling has {v} source tokens but the target model has vocabulary "
                         f"{target_model.vocab}")
    model = build_translated_model(target_model, P, P.marginals, scaling)
    return model.with_heads(model.E.detach(), model.L.detach())


# ---------------------------------------------------------------- suite

SUITE_COLUMNS = ("mode", "perplexity", "bpb", "steps", "seed")
# compared methods plus the two untrained references
SUITE_MODES = (
    "plain_p", "plain_p+cft", "sinkhorn_p", "sinkhorn_p+cft", "s2t2", "s2t2+cft",
    "ft_orig_tok", "ft_new_tok", "orig_tok_init", "new_tok_init",
)


@dataclass
class SuiteData:
    source_model: LmParams
    source_tok: TokenizerModel
    target_tok: TokenizerModel
    target_train: Corpus
    target_eval: Corpus
    source_corpus: Corpus | None = None


def run_baseline_suite(data: SuiteData, base: RunConfig, finetune_steps: int | None = None,
                       cft_lr: float | None = None) -> tuple[list[dict], dict]:
    """Train and evaluate every compared method on shared data and seed.

    Returns the comparison rows and a dict of the trained artifacts.
    """
    src, tgt = data.source_model, data.target_tok
    ctx = src.config.context_len
    ft_steps = base.steps if finetune_steps is None else finetune_steps
    new_blocks = pack_sequences(data.target_train, tgt, ctx)
    byte_blocks = pack_sequences(data.target_train, data.source_tok, ctx)
    m = make_marginals(base.marginals, src, tgt, data.source_tok, data.target_train, data.source_corpus)
    rows: list[dict] = []
    artifacts: dict = {"marginals": m}

    def row(mode, model, tok, steps):
        rep = evaluate(model, tok, data.target_eval)
        r = {"mode": mode, "perplexity": rep.perplexity, "bpb": rep.bits_per_byte, "steps": steps,
             "seed": base.seed, "mean_nll": rep.mean_nll}
        log.info("%-16s ppl=%9.3f bpb=%6.3f", mode, rep.perplexity, rep.bits_per_byte)
        rows.append(r)
        return r

    ft_cfg = replace(base, mode="ft_new_tok", steps=ft_steps, lr=cft_lr)
    for mode, label in (("unconstrained", "plain_p"), ("dense_sinkhorn", "sinkhorn_p"), ("s2t2", "s2t2")):
        res = train_translator(src, new_blocks, m, replace(base, mode=mode))
        artifacts[label] = res
        row(label, res.model, tgt, base.steps)
        tuned, _ = finetune_whole(res.model, new_blocks, ft_cfg)
        row(label + "+cft", tuned, tgt, base.steps + ft_steps)

    row("orig_tok_init", src, data.source_tok, 0)
    tuned, _ = finetune_whole(src, byte_blocks, replace(ft_cfg, mode="ft_orig_tok"))
    row("ft_orig_tok", tuned, data.source_tok, ft_steps)

    trunc = truncated_model(src, tgt.size, base.seed)
    row("new_tok_init", trunc, tgt, 0)
    tuned, _ = finetune_whole(trunc, new_blocks, ft_cfg)
    row("ft_new_tok", tuned, tgt, ft_steps)
    return rows, artifacts


def format_table(rows: list[dict]) -> str:
    lines = [f"{'mode':<16}{'perplexity':>12}{'bpb':>9}{'steps':>7}{'seed':>6}"]
    for r in rows:
        lines.append(f"{r['mode']:<16}{r['perplexity']:>12.3f}{r['bpb']:>9.3f}{r['steps']:>7d}{r['seed']:>6d}")
    return "\n".join(lines)


def prepare_target_tokenizer(corpus: Corpus, vocab_size: int, alphabet: str = "corpus") -> TokenizerModel:
    return train_bpe(corpus, vocab_size, alphabet=alphabet)


__all__ = [
    "RunConfig", "MODES", "train_source_model", "train_translator", "finetune_whole",
    "transfer_translator", "run_baseline_suite", "truncated_model", "format_table",
    "TranslatorResult", "SuiteData", "byte_tokenizer", "EvalReport", "params_hash",
]
