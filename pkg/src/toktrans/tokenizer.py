"""Byte-level and byte-pair-encoding tokenizers, corpus readers, packing."""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

SPECIAL_NAMES = ("bos", "eos", "pad")


class DataError(ValueError):
    """Malformed corpus or tokenizer file."""


@dataclass
class Corpus:
    sequences: list[bytes]
    source_format: Literal["text", "fasta"] = "text"

    @property
    def byte_count(self) -> int:
        return sum(len(s) for s in self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def split(self, holdout: float, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        """Deterministic random split into (train, held-out)."""
        idx = np.random.default_rng(seed).permutation(len(self.sequences))
        n_hold = max(1, int(round(holdout * len(idx))))
        hold = sorted(idx[:n_hold].tolist())
        train = sorted(idx[n_hold:].tolist())
        return (Corpus([self.sequences[i] for i in train], self.source_format),
                Corpus([self.sequences[i] for i in hold], self.source_format))


def ingest_fasta(path) -> Corpus:
    """Read FASTA records; headers (``>``) are excluded from sequence bytes."""
    seqs: list[bytes] = []
    current: list[bytes] | None = None
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip(b"\r\n").strip()
            if line.startswith(b">"):
                if current:
                    seqs.append(b"".join(current))
                current = []
            elif line:
                if current is None:
                    raise DataError(f"{path}:{lineno}: sequence line before any '>' header")
                current.append(line)
    if current:
        seqs.append(b"".join(current))
    return Corpus(seqs, "fasta")


def ingest_text(path) -> Corpus:
    """One sequence per non-empty line (CRLF normalised, newline not included)."""
    with open(path, "rb") as fh:
        data = fh.read().replace(b"\r\n", b"\n")
    return Corpus([line for line in data.split(b"\n") if line], "text")


def ingest(path) -> Corpus:
    p = str(path).lower()
    if p.endswith((".fa", ".fasta", ".faa", ".fas")):
        return ingest_fasta(path)
    with open(path, "rb") as fh:
        head = fh.read(1)
    return ingest_fasta(path) if head == b">" else ingest_text(path)


@dataclass
class TokenizerModel:
    kind: Literal["byte", "bpe"]
    vocab: list[bytes]
    merges: list[tuple[int, int]] = field(default_factory=list)
    specials: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._byte_to_id: dict[int, int] = {}
        self._special_ids = frozenset(self.specials.values())
        for i, tok in enumerate(self.vocab):
            if len(tok) == 1 and i not in self._special_ids and tok[0] not in self._byte_to_id:
                self._byte_to_id[tok[0]] = i
        self._ranks = {pair: (r, self._merge_base + r) for r, pair in enumerate(self.merges)}

    @property
    def _merge_base(self) -> int:
        return len(self.vocab) - len(self.merges)

    @property
    def size(self) -> int:
        return len(self.vocab)

    @property
    def bos(self) -> int:
        return self.specials["bos"]

    @property
    def eos(self) -> int:
        return self.specials["eos"]

    @property
    def pad(self) -> int:
        return self.specials["pad"]

    def is_special(self, i: int) -> bool:
        return i in self._special_ids

    def encode(self, text: bytes) -> list[int]:
        return encode(self, text)

    def decode(self, ids: Iterable[int]) -> bytes:
        return decode(self, ids)

    # serialisation
    def to_json(self) -> dict:
        return {
            "format": "toktrans-tokenizer",
            "version": 1,
            "kind": self.kind,
            "vocab": {str(i): t.hex() for i, t in enumerate(self.vocab)},
            "merges": [list(m) for m in self.merges],
            "specials": dict(self.specials),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TokenizerModel":
        try:
            vocab_map = doc["vocab"]
            vocab = [bytes.fromhex(vocab_map[str(i)]) for i in range(len(vocab_map))]
            merges = [(int(a), int(b)) for a, b in doc.get("merges", [])]
            tok = cls(doc["kind"], vocab, merges, {k: int(v) for k, v in doc["specials"].items()})
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"malformed tokenizer document: {e}") from e
        base = len(vocab) - len(merges)
        for r, (a, b) in enumerate(merges):
            if not (0 <= a < base + r and 0 <= b < base + r):
                raise DataError(f"merge {r} references undefined token")
            if vocab[base + r] != vocab[a] + vocab[b]:
                raise DataError(f"merge {r} is inconsistent with the vocabulary")
        return tok

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not a JSON tokenizer file ({e})") from e
        return cls.from_json(doc)


def byte_tokenizer() -> TokenizerModel:
    """256 byte values followed by BOS/EOS/PAD (259 ids)."""
    vocab = [bytes([i]) for i in range(256)] + [b""] * len(SPECIAL_NAMES)
    specials = {name: 256 + i for i, name in enumerate(SPECIAL_NAMES)}
    return TokenizerModel("byte", vocab, [], specials)


def _base_ids(tok: TokenizerModel, text: bytes) -> list[int]:
    table = tok._byte_to_id
    try:
        return [table[b] for b in text]
    except KeyError as e:
        raise DataError(f"byte 0x{e.args[0]:02x} is not in the tokenizer alphabet") from None


def _apply_merges(ids: list[int], ranks: dict) -> list[int]:
    """Apply merges lowest rank first, leftmost first, via a linked list + heap."""
    n = len(ids)
    if n < 2 or not ranks:
        return ids
    tok = list(ids)
    nxt = list(range(1, n + 1))
    nxt[-1] = -1
    prv = list(range(-1, n - 1))
    alive = [True] * n
    heap = []
    for i in range(n - 1):
        e = ranks.get((tok[i], tok[i + 1]))
        if e is not None:
            heap.append((e[0], i))
    heapq.heapify(heap)
    while heap:
        r, i = heapq.heappop(heap)
        if not alive[i]:
            continue
        j = nxt[i]
        if j == -1:
            continue
        e = ranks.get((tok[i], tok[j]))
        if e is None or e[0] != r:
            continue
        tok[i] = e[1]
        alive[j] = False
        k = nxt[j]
        nxt[i] = k
        if k != -1:
            prv[k] = i
            e2 = ranks.get((tok[i], tok[k]))
            if e2 is not None:
                heapq.heappush(heap, (e2[0], i))
        p = prv[i]
        if p != -1:
            e2 = ranks.get((tok[p], tok[i]))
            if e2 is not None:
                heapq.heappush(heap, (e2[0], p))
    out, i = [], 0
    while i != -1:
        out.append(tok[i])
        i = nxt[i]
    return out


def encode(tok: TokenizerModel, text: bytes) -> list[int]:
    """Token ids for ``text`` (no special tokens added)."""
    text = bytes(text)
    if tok.kind == "byte":
        return list(text)
    return _apply_merges(_base_ids(tok, text), tok._ranks)


def decode(tok: TokenizerModel, ids: Iterable[int]) -> bytes:
    """Concatenate token bytes, dropping special tokens."""
    vocab, specials = tok.vocab, tok._special_ids
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise DataError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        if i not in specials:
            out.append(vocab[i])
    return b"".join(out)


def train_bpe(corpus: Corpus | Sequence[bytes], vocab_size: int,
              alphabet: Literal["bytes", "corpus"] = "bytes") -> TokenizerModel:
    """Greedy byte-pair encoding.

    The base alphabet is all 256 bytes (``alphabet="bytes"``, every byte string
    round-trips) or only the bytes seen in the corpus. BOS/EOS/PAD follow the
    alphabet, then one id per merge. Merging stops at ``vocab_size`` or when no
    pair occurs at least twice. Equal counts go to the pair whose merged bytes
    are lexicographically smallest, then the smallest left token.
    """
    seqs = corpus.sequences if isinstance(corpus, Corpus) else [bytes(s) for s in corpus]
    if alphabet == "bytes":
        base = list(range(256))
    elif alphabet == "corpus":
        base = sorted(set().union(*[set(s) for s in seqs])) if seqs else []
    else:
        raise ValueError(f"unknown alphabet {alphabet!r}")
    n_fixed = len(base) + len(SPECIAL_NAMES)
    if vocab_size < n_fixed:
        raise ValueError(f"vocab_size {vocab_size} is smaller than alphabet+specials ({n_fixed})")
    vocab = [bytes([b]) for b in base] + [b""] * len(SPECIAL_NAMES)
    specials = {name: len(base) + i for i, name in enumerate(SPECIAL_NAMES)}
    byte_id = {b: i for i, b in enumerate(base)}

    # whole corpus as one linked list; -1 marks sequence ends
    tok: list[int] = []
    nxt: list[int] = []
    for s in seqs:
        start = len(tok)
        tok.extend(byte_id[b] for b in s)
        nxt.extend(range(start + 1, len(tok) + 1))
        if len(s):
            nxt[-1] = -1
    prv = [-1] * len(tok)
    for i, j in enumerate(nxt):
        if j != -1:
            prv[j] = i
    alive = [True] * len(tok)

    occ: dict[tuple[int, int], set[int]] = {}
    for i, j in enumerate(nxt):
        if j != -1:
            occ.setdefault((tok[i], tok[j]), set()).add(i)

    def key(pair):
        a, b = pair
        return (-len(occ[pair]), vocab[a] + vocab[b], vocab[a], pair)

    heap = [key(p) for p in occ]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []

    while len(vocab) < vocab_size and heap:
        negc, merged, _, pair = heapq.heappop(heap)
        cur = occ.get(pair)
        if cur is None or len(cur) != -negc:
            continue  # stale entry
        if -negc < 2:
            break
        a, b = pair
        new = len(vocab)
        vocab.append(merged)
        merges.append(pair)
        touched: set[tuple[int, int]] = set()

        def drop(pos):
            q = (tok[pos], tok[nxt[pos]])
            s = occ.get(q)
            if s is not None:
                s.discard(pos)
                touched.add(q)

        def put(pos):
            q = (tok[pos], tok[nxt[pos]])
            occ.setdefault(q, set()).add(pos)
            touched.add(q)

        for i in sorted(cur):
            if not alive[i] or tok[i] != a:
                continue
            j = nxt[i]
            if j == -1 or tok[j] != b:
                continue
            p, k = prv[i], nxt[j]
            if p != -1:
                drop(p)
            drop(i)
            if k != -1:
                drop(j)
            tok[i] = new
            alive[j] = False
            nxt[i] = k
            if k != -1:
                prv[k] = i
                put(i)
            if p != -1:
                put(p)
        for q in touched:
            if occ.get(q):
                heapq.heappush(heap, key(q))
            else:
                occ.pop(q, None)
    return TokenizerModel("bpe", vocab, merges, specials)


def compression_ratio(tok: TokenizerModel, corpus: Corpus) -> float:
    """Corpus bytes per (non-special) token."""
    n_tokens = sum(len(encode(tok, s)) for s in corpus.sequences)
    if n_tokens == 0:
        raise DataError("empty corpus")
    return corpus.byte_count / n_tokens


def encode_corpus(tok: TokenizerModel, corpus: Corpus) -> list[list[int]]:
    return [encode(tok, s) for s in corpus.sequences]


def pack_sequences(corpus: Corpus | list[list[int]], tok: TokenizerModel, context_len: int) -> np.ndarray:
    """Encode, append EOS, concatenate, and cut into (n_blocks, context_len).

    The trailing partial block is dropped.
    """
    if context_len < 2:
        raise ValueError("context_len must be at least 2")
    encoded = encode_corpus(tok, corpus) if isinstance(corpus, Corpus) else corpus
    stream: list[int] = []
    for ids in encoded:
        stream.extend(ids)
        stream.append(tok.eos)
    n = len(stream) // context_len
    return np.asarray(stream[: n * context_len], dtype=np.int64).reshape(n, context_len)


def token_counts(tok: TokenizerModel, corpus: Corpus) -> np.ndarray:
    counts = np.zeros(tok.size, dtype=np.int64)
    for ids in encode_corpus(tok, corpus):
        np.add.at(counts, ids, 1)
    return counts
