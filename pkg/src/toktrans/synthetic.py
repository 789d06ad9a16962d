"""Synthetic corpora standing in for English pretraining text and protein data."""

from __future__ import annotations

import numpy as np

from .tokenizer import Corpus

AMINO_ACIDS = b"ACDEFGHIKLMNPQRSTVWY"
# approximate background residue frequencies, same order as AMINO_ACIDS
_AA_FREQ = np.array([8.3, 1.4, 5.5, 6.8, 3.9, 7.1, 2.3, 5.9, 5.8, 9.7,
                     2.4, 4.1, 4.7, 3.9, 5.4, 6.6, 5.3, 6.9, 1.1, 2.9])
_CONSONANTS = b"bcdfghjklmnprstvwz"
_VOWELS = b"aeiou"


def _word(rng: np.random.Generator) -> bytes:
    n_syl = rng.integers(1, 4)
    out = bytearray()
    for _ in range(n_syl):
        out.append(_CONSONANTS[rng.integers(len(_CONSONANTS))])
        out.append(_VOWELS[rng.integers(len(_VOWELS))])
        if rng.random() < 0.3:
            out.append(_CONSONANTS[rng.integers(len(_CONSONANTS))])
    return bytes(out)


def english_like_corpus(n_sentences: int = 4000, seed: int = 0, lexicon_size: int = 400) -> Corpus:
    """Zipf-distributed pseudo-words in capitalised, punctuated sentences.

    Word order follows a sparse first-order Markov chain over the lexicon so a
    model has contextual structure to learn, not just unigram frequencies.
    """
    rng = np.random.default_rng(seed)
    lexicon = sorted({_word(rng) for _ in range(lexicon_size * 2)})[:lexicon_size]
    rng.shuffle(lexicon)
    zipf = 1.0 / np.arange(1, len(lexicon) + 1)
    zipf /= zipf.sum()
    # each word prefers a handful of successors
    succ = rng.choice(len(lexicon), size=(len(lexicon), 6), p=zipf)
    sentences = []
    for _ in range(n_sentences):
        n = rng.integers(4, 14)
        w = rng.choice(len(lexicon), p=zipf)
        words = []
        for i in range(n):
            words.append(lexicon[w])
            w = succ[w, rng.integers(6)] if rng.random() < 0.7 else rng.choice(len(lexicon), p=zipf)
        s = b" ".join(words)
        if n > 6 and rng.random() < 0.4:
            cut = s.find(b" ", len(s) // 2)
            if cut > 0:
                s = s[:cut] + b"," + s[cut:]
        sentences.append(s[:1].upper() + s[1:] + b".")
    return Corpus(sentences, "text")


def protein_like_corpus(n_sequences: int = 600, seed: int = 0, min_len: int = 60,
                        max_len: int = 240, n_motifs: int = 40) -> Corpus:
    """Amino-acid strings from a sparse Markov chain with recurring motifs.

    Sequences begin with methionine and use the 20 standard residues.
    """
    rng = np.random.default_rng(seed)
    base = _AA_FREQ / _AA_FREQ.sum()
    trans = np.stack([rng.dirichlet(base * 8) for _ in range(len(AMINO_ACIDS))])
    motifs = [rng.choice(len(AMINO_ACIDS), size=rng.integers(3, 7), p=base) for _ in range(n_motifs)]
    seqs = []
    for _ in range(n_sequences):
        n = rng.integers(min_len, max_len + 1)
        out = [AMINO_ACIDS.index(b"M")]
        while len(out) < n:
            if rng.random() < 0.08:
                out.extend(motifs[rng.integers(n_motifs)].tolist())
            else:
                out.append(rng.choice(len(AMINO_ACIDS), p=trans[out[-1]]))
        seqs.append(bytes(AMINO_ACIDS[i] for i in out[:n]))
    return Corpus(seqs, "fasta")


def write_fasta(corpus: Corpus, path, width: int = 60) -> None:
    with open(path, "wb") as fh:
        for i, s in enumerate(corpus.sequences):
            fh.write(b">seq%d synthetic\n" % i)
            for j in range(0, len(s), width):
                fh.write(s[j:j + width] + b"\n")


def write_text(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"\n".join(corpus.sequences) + b"\n")
