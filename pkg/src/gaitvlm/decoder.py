"""Prefix-LM transformer decoder that turns F^num back into gait sentences."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import gaitparams as gp
from . import layers
from . import losses
from . import numtext as nt

log = logging.getLogger(__name__)


@dataclass
class DecoderConfig:
    dim: int = 64
    n_heads: int = 4
    n_layers: int = 4
    mlp_ratio: int = 2
    n_prefix: int = 8
    prefix_hidden: int = 256
    max_len: int = 90
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 40
    numeric_weight: float = 1.0
    ordinal_weight: float = 1.0
    ordinal_all_tokens: bool = False
    warmup_steps: int = 100
    num_freqs: int = 32
    seed: int = 0


FIXED_PARAMS = ("dec.in_mean", "dec.in_scale")


@dataclass
class DecoderModel:
    cfg: DecoderConfig
    vocab: nt.Vocabulary
    params: dict[str, np.ndarray]
    in_dim: int
    loss_curve: list[float] = field(default_factory=list)

    @property
    def total_len(self) -> int:
        return self.cfg.n_prefix + self.cfg.max_len + 1


def _bucket_centres() -> np.ndarray:
    """Bucket centres scaled to [-1, 1]."""
    return np.array([nt.token_id_to_value(i) for i in range(nt.NUM_BASE, nt.NUM_MAX_ID + 1)]) / gp.V_RANGE


def _frozen(fn):
    """Cache a table builder and hand out read-only arrays."""
    @functools.wraps(fn)
    @functools.lru_cache(maxsize=None)
    def wrapper(n: int) -> np.ndarray:
        out = fn(n)
        out.flags.writeable = False
        return out
    return wrapper


@_frozen
def numeric_features(n_freqs: int) -> np.ndarray:
    """Fourier features (N_NUM+1, 2*n_freqs+1) of the bucket centres.

    Numeric rows of the input table and the output head are linear in these,
    so neighbouring buckets share parameters.
    """
    u = _bucket_centres()
    k = np.arange(1, n_freqs + 1)
    ang = np.pi * np.outer(u, k) / 2
    return np.concatenate([np.ones((u.size, 1)), np.cos(ang), np.sin(ang)], axis=1)


@_frozen
def head_features(n_freqs: int) -> np.ndarray:
    """Output-head features (N_NUM+1, 3 + 2*n_freqs) of the bucket centres.

    A quadratic part ``[1, u, u^2]`` gives a parabola over values whose peak is
    a linear readout of the hidden state; the Fourier part lets the peak sharpen
    onto a single bucket.
    """
    u = _bucket_centres()
    return np.concatenate([np.stack([np.ones_like(u), u, u * u], axis=1),
                           numeric_features(n_freqs)[:, 1:]], axis=1)


def init_decoder(vocab: nt.Vocabulary, in_dim: int, cfg: DecoderConfig) -> DecoderModel:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    n_feat = 2 * cfg.num_freqs + 1
    n_plain = vocab.n_words + 1  # words and [EOS]
    p = {"dec.tok_emb": rng.normal(0.0, 0.5, (n_plain, d)),
         "dec.num_emb": rng.normal(0.0, 0.5 / math.sqrt(n_feat), (n_feat, d)),
         "dec.num_head": rng.normal(0.0, 0.02, (n_feat + 2, d)),
         "dec.num_head_b": np.zeros(n_feat + 2),
         "dec.in_mean": np.zeros(in_dim), "dec.in_scale": np.ones(in_dim)}
    p.update(layers.init_mlp2(rng, in_dim, cfg.prefix_hidden, cfg.n_prefix * d, prefix="dec.prefix."))
    for i in range(cfg.n_layers):
        p.update(layers.init_block(rng, d, f"dec.blocks.{i}.", cfg.mlp_ratio, out_scale=1.0 / math.sqrt(2 * cfg.n_layers)))
    p["dec.ln_f.g"] = np.ones(d)
    p["dec.ln_f.b"] = np.zeros(d)
    p.update(layers.init_linear(rng, d, n_plain, std=0.02, prefix="dec.head."))
    return DecoderModel(cfg, vocab, p, in_dim)


def decoder_logits(model: DecoderModel, t, prefix: np.ndarray, in_idx: np.ndarray) -> dm.Tensor:
    """Logits (B, n, V) for dense input indices ``in_idx`` (B, n) given prefixes (B, in_dim)."""
    cfg = model.cfg
    B, n = in_idx.shape
    P, d = cfg.n_prefix, cfg.dim
    z = (prefix - model.params["dec.in_mean"]) / model.params["dec.in_scale"]
    pre = layers.mlp2(t, dm.Tensor(z), "dec.prefix.")
    pre = dm.reshape(pre, (B, P, d))
    phi = dm.Tensor(numeric_features(cfg.num_freqs))
    table = dm.concat([t["dec.tok_emb"], dm.matmul(phi, t["dec.num_emb"])], axis=0)
    emb = dm.embedding(table, in_idx)
    pe = layers.sinusoidal_pe(P + n, d)
    x = dm.add(dm.concat([pre, emb], axis=1), dm.Tensor(pe))
    mask = dm.causal_mask(P + n, prefix=P)
    for i in range(cfg.n_layers):
        x = layers.block(t, x, f"dec.blocks.{i}.", cfg.n_heads, mask)
    x = dm.layer_norm(x, t["dec.ln_f.g"], t["dec.ln_f.b"])
    x = dm.getitem(x, (slice(None), slice(P, P + n)))
    plain = layers.linear(t, x, "dec.head.")
    quad = dm.Tensor(head_features(cfg.num_freqs))
    num_w = dm.matmul(quad, t["dec.num_head"])
    num_b = dm.matmul(quad, t["dec.num_head_b"])
    numeric = dm.add(dm.matmul(x, dm.transpose(num_w)), num_b)
    return dm.concat([plain, numeric], axis=-1)


# ---------------------------------------------------------------- token ids

def sentence_token_ids(seq: nt.NumericTokenSequence, vocab: nt.Vocabulary) -> list[int]:
    """Decoder target ids: words, "is", numeric bucket ids, then [EOS]."""
    out = []
    for k, w, v in zip(seq.kinds, seq.word_ids, seq.values):
        if k == nt.WORD:
            out.append(int(w))
        elif k == nt.IS:
            out.append(vocab.id_of(nt.IS_WORD))
        else:
            out.append(nt.number_to_token_id(float(v)))
    if not out or out[-1] != nt.EOS_ID:
        out.append(nt.EOS_ID)
    return out


def _batch_arrays(token_lists, vocab: nt.Vocabulary):
    n = max(len(x) for x in token_lists)
    inp = np.full((len(token_lists), n), vocab.index(vocab.pad_id), dtype=np.int64)
    tgt = np.full((len(token_lists), n), -1, dtype=np.int64)
    for i, ids in enumerate(token_lists):
        inp[i, 0] = vocab.sos_id
        inp[i, 1:len(ids)] = vocab.index(np.array(ids[:-1]))
        tgt[i, : len(ids)] = ids
    return inp, tgt


def decoder_loss(model: DecoderModel, t, prefix, inp, tgt) -> dm.Tensor:
    """CE averaged separately over word and numeric positions, plus the ordinal term.

    Separate averaging keeps the four numeric positions from being swamped by
    the ~80 description words of a sentence.
    """
    cfg, vocab = model.cfg, model.vocab
    logits = decoder_logits(model, t, prefix, inp)
    V = logits.shape[-1]
    flat = dm.reshape(logits, (-1, V))
    tflat = tgt.reshape(-1)
    valid = np.nonzero(tflat >= 0)[0]
    sel = dm.getitem(flat, valid)
    toks = tflat[valid]
    numeric = (toks >= nt.NUM_BASE) & (toks <= nt.NUM_MAX_ID)
    words, nums = np.nonzero(~numeric)[0], np.nonzero(numeric)[0]
    terms = []
    if words.size:
        terms.append(losses.plain_ce(dm.getitem(sel, words), toks[words], vocab))
    if nums.size:
        terms.append(dm.scale(losses.plain_ce(dm.getitem(sel, nums), toks[nums], vocab), cfg.numeric_weight))
    ord_rows = np.arange(len(toks)) if cfg.ordinal_all_tokens else nums
    if ord_rows.size and cfg.ordinal_weight:
        o = losses.ordinal_ce(dm.getitem(sel, ord_rows), toks[ord_rows], vocab, reduction="mean")
        terms.append(dm.scale(o, cfg.ordinal_weight))
    loss = terms[0]
    for term in terms[1:]:
        loss = dm.add(loss, term)
    return loss


def train_decoder(corpus_feats: np.ndarray, corpus_ids: list[list[int]], vocab: nt.Vocabulary,
                  cfg: DecoderConfig | None = None, progress=None) -> DecoderModel:
    """Teacher-forced prefix-LM training on (F^num, token ids) pairs."""
    cfg = cfg or DecoderConfig()
    if len(corpus_ids) == 0:
        raise ValueError("empty decoder corpus")
    if len(corpus_feats) != len(corpus_ids):
        raise ValueError("features and token lists differ in length")
    longest = max(len(x) for x in corpus_ids)
    if longest > cfg.max_len:
        raise ValueError(f"sentence of {longest} tokens exceeds decoder max_len {cfg.max_len}")
    model = init_decoder(vocab, corpus_feats.shape[1], cfg)
    # input standardisation is fitted once and stays fixed
    model.params["dec.in_mean"] = corpus_feats.mean(axis=0)
    model.params["dec.in_scale"] = np.maximum(corpus_feats.std(axis=0), 1e-6)
    trainable = [k for k in model.params if k not in FIXED_PARAMS]
    rng = np.random.default_rng(cfg.seed + 1)
    state = dm.OptimizerState(lr=cfg.lr)
    params = dict(model.params)
    n = len(corpus_ids)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            inp, tgt = _batch_arrays([corpus_ids[i] for i in idx], vocab)
            g = dm.Graph(lambda tt: decoder_loss(model, tt, corpus_feats[idx], inp, tgt))
            out = g.forward(params)
            grads = g.backward()
            state.lr = _schedule(cfg, step, total_steps)
            params = dm.optimizer_step(params, grads, state, trainable)
            epoch_loss += float(out.data) * len(idx)
            step += 1
        model.loss_curve.append(epoch_loss / n)
        if progress:
            progress(epoch, model.loss_curve[-1])
    model.params = params
    return model


def _schedule(cfg: DecoderConfig, step: int, total: int) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


# ---------------------------------------------------------------- decoding

@dataclass
class Decoded:
    ids: list[int]
    truncated: bool


def decode(model: DecoderModel, prefix: np.ndarray, max_len: int | None = None) -> list[Decoded]:
    """Greedy decoding for a batch of prefixes (B, in_dim) or a single (in_dim,)."""
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.float64))
    max_len = max_len or model.cfg.max_len
    vocab = model.vocab
    t = layers.as_tensors(model.params)
    B = prefix.shape[0]
    seqs = np.full((B, 1), vocab.index(vocab.sos_id), dtype=np.int64)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        live = np.nonzero(~done)[0]
        if live.size == 0:
            break
        logits = decoder_logits(model, t, prefix[live], seqs[live]).data[:, -1]
        nxt = logits.argmax(axis=-1)
        col = np.full(B, vocab.index(vocab.pad_id), dtype=np.int64)
        col[live] = nxt
        seqs = np.concatenate([seqs, col[:, None]], axis=1)
        for j, i in enumerate(live):
            tok = int(vocab.id_at(nxt[j]))
            out[i].append(tok)
            if tok == nt.EOS_ID:
                done[i] = True
    return [Decoded(ids, truncated=not (ids and ids[-1] == nt.EOS_ID)) for ids in out]


def detokenize(ids, vocab: nt.Vocabulary, stats: gp.NormalizationStats | None = None) -> str:
    """Render decoded ids as text; numbers become bucket centres (raw units with ``stats``)."""
    words: list[str] = []
    pids = _clause_params(ids, vocab)
    clause = 0
    for tok in ids:
        if tok == nt.EOS_ID:
            break
        if nt.is_numeric_id(tok):
            v = nt.token_id_to_value(tok)
            pid = pids[clause] if clause < len(pids) else None
            if stats is not None and pid is not None and pid in stats.mean:
                v = gp.denormalize_value(v, stats, pid)
            words.append(gp.format_number(v))
            continue
        w = vocab.token_of(tok)
        if w in (nt.PAD, nt.SOS):
            continue
        if w == ",":
            clause += 1
        words.append(w)
    text = ""
    for w in words:
        text += w if w in nt.PUNCT or not text else " " + w
    return text[:1].upper() + text[1:]


def _clause_params(ids, vocab: nt.Vocabulary) -> list[int | None]:
    out = []
    for desc_words, _ in _clauses(ids, vocab):
        out.append(_match_description(desc_words))
    return out


def _clauses(ids, vocab: nt.Vocabulary):
    """Yield (description words, numeric id or None) per comma-separated clause."""
    cur: list[str] = []
    num = None
    seen_is = False
    for tok in ids:
        if tok == nt.EOS_ID:
            break
        if nt.is_numeric_id(tok):
            num = tok if num is None else num
            continue
        w = vocab.token_of(tok)
        if w in (",", "."):
            yield cur, num
            cur, num, seen_is = [], None, False
            continue
        if w == nt.IS_WORD and not seen_is:
            seen_is = True
            continue
        if not seen_is:
            cur.append(w)
    if cur or num is not None:
        yield cur, num


_DESC_INDEX = None


def _match_description(words: list[str]) -> int | None:
    global _DESC_INDEX
    if _DESC_INDEX is None:
        _DESC_INDEX = {tuple(nt.split_words(d.description)): d.id for d in gp.load_definitions()}
    return _DESC_INDEX.get(tuple(words))


def parse_token_ids(ids, vocab: nt.Vocabulary) -> dict[int, int]:
    """Map parameter id -> numeric bucket (0..200) for every well-formed clause."""
    out = {}
    for desc_words, num in _clauses(ids, vocab):
        pid = _match_description(desc_words)
        if pid is not None and num is not None and pid not in out:
            out[pid] = num - nt.NUM_BASE
    return out


# ---------------------------------------------------------------- interpretation

@dataclass
class EmbeddingBank:
    f_num: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    p_num: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    sentences: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sentences)

    def append(self, f_num: np.ndarray, p_num: np.ndarray, sentences) -> None:
        f_num = np.atleast_2d(f_num)
        p_num = np.atleast_2d(p_num)
        p_num = p_num / np.linalg.norm(p_num, axis=1, keepdims=True)
        if len(self):
            self.f_num = np.concatenate([self.f_num, f_num])
            self.p_num = np.concatenate([self.p_num, p_num])
        else:
            self.f_num, self.p_num = np.array(f_num), np.array(p_num)
        self.sentences.extend(sentences)


def interpretation_weights(p_class: np.ndarray, bank: EmbeddingBank, tau: float = 0.1) -> np.ndarray:
    if len(bank) == 0:
        raise ValueError("embedding bank is empty")
    p = np.asarray(p_class, dtype=np.float64)
    p = p / np.linalg.norm(p)
    cos = bank.p_num @ p
    z = cos / tau
    w = np.exp(z - z.max())
    return w / w.sum()


def interpret_class(p_class: np.ndarray, bank: EmbeddingBank, model: DecoderModel, tau: float = 0.1,
                    stats: gp.NormalizationStats | None = None) -> tuple[str, np.ndarray, np.ndarray]:
    """Decode the similarity-weighted combination of bank F^num rows.

    ``p_class`` is the projected class text feature P_i. Returns the sentence,
    the weights and the combined embedding.
    """
    w = interpretation_weights(p_class, bank, tau)
    f_hat = w @ bank.f_num
    dec = decode(model, f_hat[None])[0]
    return detokenize(dec.ids, model.vocab, stats), w, f_hat
