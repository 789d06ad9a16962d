"""A small pre-norm causal transformer and its evaluation metrics.

Logits at position t are ``L @ h(E[x_{<=t}])`` where ``h`` is the encoder
stack; ``E`` and ``L`` are kept as separate (untied) parameters so they can
be swapped for translated matrices.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class LmConfig:
    vocab: int
    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 256

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"width {self.d} is not divisible by {self.n_heads} heads")
        if min(self.vocab, self.d, self.n_layers, self.n_heads, self.context_len) < 1:
            raise ValueError("all model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LmParams:
    config: LmConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def E(self) -> Tensor:
        return self.params["E"]

    @property
    def L(self) -> Tensor:
        return self.params["L"]

    @property
    def vocab(self) -> int:
        return self.params["E"].shape[0]

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k not in ("E", "L")]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def with_heads(self, E, L) -> "LmParams":
        """Copy sharing the encoder, with new embedding/head matrices."""
        E, L = ad.as_tensor(E), ad.as_tensor(L)
        if E.shape != L.shape or E.shape[1] != self.config.d:
            raise ValueError(f"heads of shape {E.shape}/{L.shape} do not fit width {self.config.d}")
        params = dict(self.params)
        params["E"], params["L"] = E, L
        cfg = LmConfig(E.shape[0], self.config.d, self.config.n_layers, self.config.n_heads,
                       self.config.context_len)
        return LmParams(cfg, params)

    def copy(self, requires_grad: bool = False) -> "LmParams":
        return LmParams(self.config, {k: Tensor(t.data.copy(), requires_grad=requires_grad, name=k)
                                      for k, t in self.params.items()})


def init_params(config: LmConfig, seed: int = 0, dtype=None) -> LmParams:
    rng = np.random.default_rng(seed)
    d, std = config.d, 0.02
    dtype = dtype or ad.get_default_dtype()

    def normal(*shape, s=std):
        return rng.standard_normal(shape) * s

    p: dict[str, np.ndarray] = {
        "E": normal(config.vocab, d),
        "L": normal(config.vocab, d),
        "pos": normal(config.context_len, d, s=0.01),
    }
    proj_std = std / math.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        p[f"h{i}.ln1.g"] = np.ones(d)
        p[f"h{i}.ln1.b"] = np.zeros(d)
        for w in ("q", "k", "v"):
            p[f"h{i}.attn.W{w}"] = normal(d, d)
        p[f"h{i}.attn.Wo"] = normal(d, d, s=proj_std)
        p[f"h{i}.ln2.g"] = np.ones(d)
        p[f"h{i}.ln2.b"] = np.zeros(d)
        p[f"h{i}.mlp.W1"] = normal(d, 4 * d)
        p[f"h{i}.mlp.b1"] = np.zeros(4 * d)
        p[f"h{i}.mlp.W2"] = normal(4 * d, d, s=proj_std)
        p[f"h{i}.mlp.b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    return LmParams(config, {k: Tensor(v, name=k, dtype=dtype) for k, v in p.items()})


def zero_params(config: LmConfig) -> LmParams:
    model = init_params(config)
    return LmParams(config, {k: Tensor(np.zeros_like(t.data), name=k) for k, t in model.params.items()})


_MASKS: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(s: int, dtype) -> np.ndarray:
    key = (s, np.dtype(dtype).str)
    if key not in _MASKS:
        _MASKS[key] = np.triu(np.full((s, s), MASK_VALUE, dtype=dtype), k=1)
    return _MASKS[key]


def hidden_states(model: LmParams, ids, E: Tensor | None = None) -> Tensor:
    """The encoder output h for every position, shape (batch, s, d)."""
    cfg, p = model.config, model.params
    E = E if E is not None else p["E"]
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, s = ids.shape
    if s > cfg.context_len:
        raise ValueError(f"block of length {s} exceeds context length {cfg.context_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {E.shape[0]}")
    d, H = cfg.d, cfg.n_heads
    dh = d // H
    pos = ad.take_rows(p["pos"], np.arange(s))
    x = ad.take_rows(E, ids) + pos
    mask = Tensor(_causal_mask(s, x.data.dtype), dtype=x.data.dtype)

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, s, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        h = ad.layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        q = heads(h @ p[f"h{i}.attn.Wq"])
        k = heads(h @ p[f"h{i}.attn.Wk"])
        v = heads(h @ p[f"h{i}.attn.Wv"])
        att = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)) + mask
        o = ad.softmax(att, axis=-1) @ v
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, s, d))
        x = x + o @ p[f"h{i}.attn.Wo"]
        h = ad.layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        h = ad.gelu(h @ p[f"h{i}.mlp.W1"] + p[f"h{i}.mlp.b1"])
        x = x + h @ p[f"h{i}.mlp.W2"] + p[f"h{i}.mlp.b2"]
    return ad.layer_norm(x, p["lnf.g"], p["lnf.b"])


def forward_logits(model: LmParams, ids, E: Tensor | None = None, L: Tensor | None = None) -> Tensor:
    """Next-token logits; shape (s, vocab) for a 1-D block, (B, s, vocab) for a batch."""
    L = L if L is not None else model.params["L"]
    h = hidden_states(model, ids, E)
    logits = h @ ad.transpose(L)
    if np.asarray(ids).ndim == 1:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


def nll_loss(model: LmParams, block, E: Tensor | None = None, L: Tensor | None = None) -> Tensor:
    """Mean next-token negative log-likelihood (nats/token) over positions 1..s-1."""
    block = np.asarray(block, dtype=np.int64)
    if block.ndim == 1:
        block = block[None, :]
    logits = forward_logits(model, block[:, :-1], E, L)
    return ad.softmax_cross_entropy(logits, block[:, 1:])


@dataclass(frozen=True)
class EvalReport:
    mean_nll: float
    perplexity: float
    bits_per_byte: float
    token_count: int
    byte_count: int
    predicted_positions: int

    @classmethod
    def from_nll(cls, mean_nll: float, token_count: int, byte_count: int,
                 predicted_positions: int) -> "EvalReport":
        bpb = mean_nll * (token_count / byte_count) / math.log(2)
        return cls(float(mean_nll), math.exp(mean_nll), float(bpb), int(token_count),
                   int(byte_count), int(predicted_positions))

    def to_dict(self) -> dict:
        return asdict(self)


def mean_block_nll(model: LmParams, blocks: np.ndarray, batch_size: int = 16,
                   E: Tensor | None = None, L: Tensor | None = None) -> float:
    """Mean nll over every predicted position of ``blocks``, in fixed order."""
    blocks = np.asarray(blocks, dtype=np.int64)
    if len(blocks) == 0:
        raise ValueError("no blocks to evaluate")
    total, n = 0.0, 0
    for i in range(0, len(blocks), batch_size):
        b = blocks[i:i + batch_size]
        count = b.shape[0] * (b.shape[1] - 1)
        total += float(nll_loss(model, b, E, L).data) * count
        n += count
    return total / n


def evaluate(model: LmParams, tok, corpus, batch_size: int = 16) -> EvalReport:
    """Perplexity and bits-per-byte of ``model`` on ``corpus`` under ``tok``.

    The mean nll is taken over every predicted position of the packed blocks
    (block length = context length). Bits-per-byte uses the corpus' own
    token/byte counts with special tokens excluded, so it equals
    ``mean_nll / (compression_ratio * ln 2)``.
    """
    from .tokenizer import DataError, encode_corpus, pack_sequences

    if tok.size != model.vocab:
        raise ValueError(f"tokenizer has {tok.size} ids but the model has vocabulary {model.vocab}")
    encoded = encode_corpus(tok, corpus)
    blocks = pack_sequences(encoded, tok, model.config.context_len)
    if len(blocks) == 0:
        raise DataError("corpus is too small for a single evaluation block")
    nll = mean_block_nll(model, blocks, batch_size)
    token_count = sum(len(e) for e in encoded)
    return EvalReport.from_nll(nll, token_count, corpus.byte_count, blocks.shape[0] * (blocks.shape[1] - 1))
