"""Numeric-aware tokenisation and embedding of gait-parameter sentences.

Words map to a closed word-level vocabulary. The copula "is" becomes a
dedicated [IS] item and every number becomes ``value * [NUM]``, where [NUM]
is a unit vector orthogonal to every positional-encoding row.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gaitparams as gp
from .layers import sinusoidal_pe

log = logging.getLogger(__name__)

EOS_ID = 49407
N_NUM = 200
NUM_BASE = EOS_ID + 1  # numeric ids sit one above [EOS] so bucket 0 does not collide with it
NUM_MAX_ID = NUM_BASE + N_NUM
BUCKET_WIDTH = 2 * gp.V_RANGE / N_NUM

PAD, SOS, EOS = "[PAD]", "[SOS]", "[EOS]"
IS_WORD = "is"
CONJUNCTIONS = ("is", "and", "the", "of")
PUNCT = (",", ".")

WORD, IS, NUM = 0, 1, 2


def split_words(text: str) -> list[str]:
    """Lower-cased word/number/punctuation split used everywhere in the package."""
    out = []
    for piece in text.lower().split():
        trail = []
        while piece and piece[-1] in PUNCT and not _is_number(piece):
            trail.append(piece[-1])
            piece = piece[:-1]
        if piece:
            out.append(piece)
        out.extend(reversed(trail))
    return out


def _is_number(tok: str) -> bool:
    return re.fullmatch(r"-?\d+(?:\.\d+)?", tok) is not None


class Vocabulary:
    """Closed word vocabulary with the [EOS] id and the numeric id block.

    Word ids are dense from 0; [EOS] is 49407 and the numeric block occupies
    49408..49608. ``index`` maps any id to a dense row index for embedding
    tables and output heads.
    """

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        if EOS in words:
            raise ValueError("[EOS] has a fixed id and is not a word entry")
        self.words = words
        self.word_to_id = {w: i for i, w in enumerate(words)}
        self.n_words = len(words)
        if self.n_words >= EOS_ID:
            raise ValueError("word block would collide with [EOS]")

    @classmethod
    def build(cls, extra_texts: Iterable[str] = ()) -> "Vocabulary":
        words = set(CONJUNCTIONS) | set(PUNCT)
        for d in gp.load_definitions():
            words.update(split_words(d.description))
            if d.unit:
                words.add(d.unit)
        for text in extra_texts:
            words.update(w for w in split_words(text) if not _is_number(w))
        return cls([PAD, SOS] + sorted(words))

    # ids
    @property
    def size(self) -> int:
        return self.n_words + 1 + N_NUM + 1

    @property
    def pad_id(self) -> int:
        return self.word_to_id[PAD]

    @property
    def sos_id(self) -> int:
        return self.word_to_id[SOS]

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def id_of(self, word: str) -> int:
        if word == EOS:
            return EOS_ID
        try:
            return self.word_to_id[word]
        except KeyError:
            raise KeyError(f"out-of-vocabulary word {word!r}") from None

    def token_of(self, tok_id: int) -> str:
        if tok_id == EOS_ID:
            return EOS
        if is_numeric_id(tok_id):
            return f"<num:{tok_id - NUM_BASE}>"
        return self.words[tok_id]

    def index(self, tok_id) -> np.ndarray | int:
        """Dense row index of an id (vectorised)."""
        t = np.asarray(tok_id)
        out = np.where(t < self.n_words, t, np.where(t == EOS_ID, self.n_words, t - NUM_BASE + self.n_words + 1))
        bad = (t < 0) | ((t >= self.n_words) & (t != EOS_ID) & ((t < NUM_BASE) | (t > NUM_MAX_ID)))
        if np.any(bad):
            raise KeyError(f"invalid token id(s) {np.unique(t[bad]).tolist()}")
        return int(out) if out.ndim == 0 else out

    def id_at(self, index) -> np.ndarray | int:
        """Inverse of :meth:`index`."""
        i = np.asarray(index)
        out = np.where(i < self.n_words, i, np.where(i == self.n_words, EOS_ID, i - self.n_words - 1 + NUM_BASE))
        return int(out) if out.ndim == 0 else out

    def save(self, path) -> None:
        lines = [f"{w}\t{i}" for i, w in enumerate(self.words)]
        lines.append(f"{EOS}\t{EOS_ID}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words = []
        for line in Path(path).read_text().splitlines():
            tok, tid = line.rsplit("\t", 1)
            if tok == EOS:
                if int(tid) != EOS_ID:
                    raise ValueError("[EOS] id mismatch")
                continue
            if int(tid) != len(words):
                raise ValueError(f"non-contiguous word id {tid} for {tok!r}")
            words.append(tok)
        return cls(words)


# ---------------------------------------------------------------- number ids

def number_to_token_id(v_norm: float) -> int:
    if not -gp.V_RANGE - 1e-12 <= v_norm <= gp.V_RANGE + 1e-12:
        raise ValueError(f"normalised value {v_norm} outside [-2.5, 2.5]; normalise first")
    scale = math.floor((v_norm + gp.V_RANGE) / BUCKET_WIDTH + 0.5)
    return NUM_BASE + min(N_NUM, max(0, scale))


def token_id_to_value(tok: int) -> float:
    if not is_numeric_id(tok):
        raise ValueError(f"{tok} is not a numeric token id")
    return -gp.V_RANGE + (tok - NUM_BASE) * BUCKET_WIDTH


def is_numeric_id(tok) -> bool:
    return NUM_BASE <= tok <= NUM_MAX_ID


# ---------------------------------------------------------------- basis

@dataclass(frozen=True)
class NumBasis:
    num: np.ndarray
    is_vec: np.ndarray
    pe: np.ndarray

    @property
    def dim(self) -> int:
        return self.num.shape[0]

    @property
    def max_len(self) -> int:
        return self.pe.shape[0]


def build_num_basis(d: int, max_len: int = 77, seed: int = 0, reserved: int | None = None) -> NumBasis:
    """Positional encoding plus a [NUM] direction in its null space.

    The sinusoid fills the first ``d - reserved`` columns (``reserved`` defaults
    to ``d // 8``), which leaves room for a direction orthogonal to every row.
    """
    reserved = d // 8 if reserved is None else reserved
    pe = sinusoidal_pe(max_len, d - reserved, d)
    _, s, vt = np.linalg.svd(pe, full_matrices=True)
    tol = max(pe.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    rank = int((s > tol).sum())
    null = vt[rank:]
    if null.shape[0] == 0:
        raise ValueError(f"positional encoding spans all of R^{d}; use a larger embedding dim")
    rng = np.random.default_rng(seed)
    num = null.T @ rng.normal(size=null.shape[0])
    # project out the numerical row space once more; SVD leaves ~1e-16 residue
    q, _ = np.linalg.qr(vt[:rank].T)
    num = num - q @ (q.T @ num)
    num /= np.linalg.norm(num)
    if np.abs(pe @ num).max() >= 1e-9:
        raise ValueError("could not find a [NUM] direction orthogonal to the positional encoding")
    is_vec = rng.normal(0.0, 1.0 / math.sqrt(d), d)
    is_vec -= num * (is_vec @ num)
    return NumBasis(num=num, is_vec=is_vec, pe=pe)


# ---------------------------------------------------------------- sequences

@dataclass
class NumericTokenSequence:
    kinds: np.ndarray        # WORD / IS / NUM per item
    word_ids: np.ndarray     # vocabulary id for WORD items, -1 otherwise
    values: np.ndarray       # normalised value for NUM items, 0 otherwise
    param_ids: list[int] = field(default_factory=list)  # parameter of each NUM item, in order

    def __len__(self) -> int:
        return len(self.kinds)


@dataclass
class NumericSentence:
    text: str
    combo: gp.ParameterCombination
    raw: dict[int, float]
    norm: dict[int, float]
    label: int = -1

    @classmethod
    def from_values(cls, combo, values: dict[int, float], stats: gp.NormalizationStats,
                    label: int = -1) -> "NumericSentence":
        combo = combo if isinstance(combo, gp.ParameterCombination) else gp.ParameterCombination(tuple(combo))
        text = gp.render_sentence(combo, values)
        _, raw = gp.parse_sentence(text, size=len(combo))
        norm = {k: gp.normalize_value(v, stats, k) for k, v in raw.items()}
        return cls(text, combo, raw, norm, label)


def tokenize(sentence, vocab: Vocabulary, stats: gp.NormalizationStats | None = None,
             add_eos: bool = True) -> NumericTokenSequence:
    """Split a sentence into WORD / IS / NUM items.

    With ``stats``, numbers are raw parameter values and get normalised for the
    parameter of their clause; without, numbers are taken as already normalised.
    """
    text = sentence.text if isinstance(sentence, NumericSentence) else str(sentence)
    pids: list[int] = []
    if stats is not None:
        _, raw = gp.parse_sentence(text, size=None)
        pids = list(raw)
    kinds, wids, vals = [], [], []
    num_k = 0
    for w in split_words(text):
        if w == IS_WORD:
            kinds.append(IS); wids.append(-1); vals.append(0.0)
        elif _is_number(w):
            v = float(w)
            if stats is not None:
                v = gp.normalize_value(v, stats, pids[num_k])
            elif abs(v) > gp.V_RANGE:
                raise ValueError(f"value {v} outside [-2.5, 2.5]; pass stats to normalise raw values")
            kinds.append(NUM); wids.append(-1); vals.append(v)
            num_k += 1
        else:
            if w not in vocab:
                raise KeyError(f"out-of-vocabulary word {w!r}")
            kinds.append(WORD); wids.append(vocab.id_of(w)); vals.append(0.0)
    if add_eos:
        kinds.append(WORD); wids.append(EOS_ID); vals.append(0.0)
    return NumericTokenSequence(np.array(kinds, dtype=np.int8), np.array(wids, dtype=np.int64),
                                np.array(vals, dtype=np.float64), pids)


def detokenize_words(seq: NumericTokenSequence, vocab: Vocabulary) -> list[str]:
    out = []
    for k, w in zip(seq.kinds, seq.word_ids):
        if k == WORD and w != EOS_ID:
            out.append(vocab.token_of(int(w)))
        elif k == IS:
            out.append(IS_WORD)
    return out


def item_embeddings(seq: NumericTokenSequence, token_table: np.ndarray, vocab: Vocabulary,
                    basis: NumBasis, numeric: bool = True) -> np.ndarray:
    """Pre-encoder input rows: token/[IS]/value*[NUM] plus the positional row.

    With ``numeric=False`` numbers become ordinary lookups of their bucket token
    and "is" its word row, which is the ablation without numeric embeddings.
    """
    n = len(seq)
    if n > basis.max_len:
        raise ValueError(f"sequence of {n} items exceeds max_len {basis.max_len}")
    x = np.array(basis.pe[:n])
    words = seq.kinds == WORD
    x[words] += token_table[vocab.index(seq.word_ids[words])]
    nums = seq.kinds == NUM
    if numeric:
        x[seq.kinds == IS] += basis.is_vec
        x[nums] += seq.values[nums, None] * basis.num
    else:
        x[seq.kinds == IS] += token_table[vocab.index(vocab.id_of(IS_WORD))]
        ids = [number_to_token_id(v) for v in seq.values[nums]]
        x[nums] += token_table[vocab.index(np.array(ids, dtype=np.int64))]
    return x


def embed_sequence(seq: NumericTokenSequence, encoder, numeric: bool = True) -> np.ndarray:
    """F^num for one sequence through the frozen text encoder."""
    return embed_sequences([seq], encoder, numeric=numeric)[0]


def embed_sequences(seqs: Sequence[NumericTokenSequence], encoder, batch: int = 256,
                    numeric: bool = True) -> np.ndarray:
    out = []
    for s in range(0, len(seqs), batch):
        chunk = seqs[s:s + batch]
        T = max(len(q) for q in chunk)
        x = np.zeros((len(chunk), T, encoder.dim))
        last = np.zeros(len(chunk), dtype=np.int64)
        for i, q in enumerate(chunk):
            x[i, : len(q)] = item_embeddings(q, encoder.token_table, encoder.vocab, encoder.basis, numeric)
            last[i] = len(q) - 1
        out.append(encoder.encode_array(x, last))
    return np.concatenate(out, axis=0)


def similarity_map(template: str, grid: Sequence[float], encoder) -> np.ndarray:
    """Cosine-similarity matrix of F^num over values substituted into ``template``.

    ``template`` holds one ``{value}`` slot; grid values are normalised units.
    """
    grid = list(grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    seqs = []
    for v in grid:
        q = tokenize(template.replace("{value}", "0"), encoder.vocab)
        q.values[q.kinds == NUM] = v
        seqs.append(q)
    f = embed_sequences(seqs, encoder)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    return f @ f.T
