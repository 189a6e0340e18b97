"""Frozen text/vision transformers with knowledge-aware and video prompts.

Parameter naming, all flat in one dict:

* ``text.*``  frozen text transformer (token table, blocks, final norm)
* ``vis.*``   frozen vision transformer (blocks, final norm)
* ``prompt.*`` learnable class context ``X`` and the per-slot projections
* ``vpl.{l}.*`` video prompt learner for layer ``l``
* ``tok.*``   frame tokenizer
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from . import layers
from . import numtext as nt

log = logging.getLogger(__name__)

STOPWORDS = frozenset(
    "a an and are as at be by for from has in is it its of on or the to with while "
    "without but stays needs one very".split()
)


@dataclass
class EncoderConfig:
    dim: int = 64
    n_heads: int = 4
    n_layers: int = 4
    max_len: int = 96
    mlp_ratio: int = 4
    seed: int = 0


@dataclass
class ClassKnowledge:
    name: str
    description: str
    keywords: list[str] | None = None

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"class {self.name!r} has an empty description")


def load_knowledge(path_or_task) -> list[ClassKnowledge]:
    """Read a class-knowledge JSON file, or a shipped fixture by task name."""
    fixtures = {"gait-scoring": "gait_score.json", "dementia-group": "dementia.json"}
    if str(path_or_task) in fixtures:
        text = resources.files("gaitvlm.data").joinpath("knowledge", fixtures[str(path_or_task)]).read_text()
    else:
        text = Path(path_or_task).read_text()
    raw = json.loads(text)
    return [ClassKnowledge(c["name"], c["description"], c.get("keywords")) for c in raw["classes"]]


# ---------------------------------------------------------------- frozen stacks

class FrozenEncoder:
    """A pre-LN transformer whose weights never receive updates."""

    frozen = True

    def __init__(self, prefix: str, cfg: EncoderConfig, params: dict[str, np.ndarray] | None = None,
                 causal: bool = False):
        self.prefix = prefix
        self.cfg = cfg
        self.causal = causal
        self.params = params if params is not None else self.init_params(prefix, cfg)
        for v in self.params.values():
            v.setflags(write=False)

    @staticmethod
    def init_params(prefix, cfg, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        p = {}
        for i in range(cfg.n_layers):
            p.update(layers.init_block(rng, cfg.dim, f"{prefix}blocks.{i}.", cfg.mlp_ratio))
        p[f"{prefix}ln_f.g"] = np.ones(cfg.dim)
        p[f"{prefix}ln_f.b"] = np.zeros(cfg.dim)
        return p

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def mask(self, n: int):
        return dm.causal_mask(n) if self.causal else None

    def layer(self, t, x, i, mask=None):
        return layers.block(t, x, f"{self.prefix}blocks.{i}.", self.cfg.n_heads, mask)

    def final_norm(self, t, x):
        return dm.layer_norm(x, t[f"{self.prefix}ln_f.g"], t[f"{self.prefix}ln_f.b"])

    def run(self, t, x):
        m = self.mask(x.shape[-2])
        for i in range(self.cfg.n_layers):
            x = self.layer(t, x, i, m)
        return self.final_norm(t, x)


class TextEncoder(FrozenEncoder):
    """Causal frozen text transformer pooled at the last item (the [EOS] slot)."""

    def __init__(self, vocab: nt.Vocabulary, cfg: EncoderConfig | None = None,
                 params: dict[str, np.ndarray] | None = None, basis: nt.NumBasis | None = None):
        cfg = cfg or EncoderConfig()
        self.vocab = vocab
        self.basis = basis or nt.build_num_basis(cfg.dim, cfg.max_len, seed=cfg.seed)
        if params is None:
            rng = np.random.default_rng(cfg.seed + 1)
            params = self.init_params("text.", cfg, rng)
            params["text.tok_emb"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.dim), (vocab.size, cfg.dim))
        super().__init__("text.", cfg, params, causal=True)

    @property
    def token_table(self) -> np.ndarray:
        return self.params["text.tok_emb"]

    def tensors(self):
        return layers.as_tensors(self.params)

    def encode(self, t, x, last: np.ndarray):
        """Differentiable: ``x`` is (B, T, d) inputs with positions already added."""
        h = self.run(t, x)
        return dm.getitem(h, (np.arange(x.shape[0]), np.asarray(last)))

    def encode_array(self, x: np.ndarray, last: np.ndarray) -> np.ndarray:
        return self.encode(self.tensors(), dm.Tensor(x), last).data

    def token_rows(self, ids) -> np.ndarray:
        return self.token_table[self.vocab.index(np.asarray(ids))]


class VisionEncoder(FrozenEncoder):
    def __init__(self, cfg: EncoderConfig | None = None, params=None):
        cfg = cfg or EncoderConfig()
        if params is None:
            params = self.init_params("vis.", cfg, np.random.default_rng(cfg.seed + 2))
        super().__init__("vis.", cfg, params, causal=False)


# ---------------------------------------------------------------- knowledge

def _sentences(desc: str) -> list[str]:
    parts = [p.strip() for p in re.split(r"(?<=\.)\s+", desc.strip()) if p.strip()]
    return parts


def embed_description(desc: str, encoder: TextEncoder) -> np.ndarray:
    """Mean over all token outputs, each sentence encoded on its own."""
    if not desc.strip():
        raise ValueError("empty description")
    seqs = []
    for sent in _sentences(desc):
        words = nt.split_words(sent)
        kept = [w for w in words if w in encoder.vocab]
        dropped = sorted(set(words) - set(kept))
        if dropped:
            log.warning("dropping out-of-vocabulary words %s", dropped)
        if kept:
            seqs.append(kept)
    if not seqs:
        raise ValueError("description has no in-vocabulary words")
    rows = []
    t = encoder.tensors()
    for words in seqs:
        ids = [encoder.vocab.id_of(w) for w in words]
        x = encoder.token_rows(ids) + encoder.basis.pe[: len(ids)]
        h = encoder.run(t, dm.Tensor(x[None])).data[0]
        rows.append(h)
    return np.concatenate(rows, axis=0).mean(axis=0)


def extract_keywords(desc: str, k: int = 5, corpus: Sequence[str] | None = None) -> list[str]:
    """Top-k words of ``desc`` by smoothed TF-IDF over ``corpus`` (ties: lexicographic)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    corpus = list(corpus) if corpus else [desc]
    if desc not in corpus:
        corpus.append(desc)

    def terms(text):
        return [w for w in nt.split_words(text) if w not in nt.PUNCT and w not in STOPWORDS]

    n = len(corpus)
    df = Counter()
    for doc in corpus:
        df.update(set(terms(doc)))
    tf = Counter(terms(desc))
    total = sum(tf.values()) or 1
    score = {w: (c / total) * (math.log((1 + n) / (1 + df[w])) + 1.0) for w, c in tf.items()}
    return sorted(score, key=lambda w: (-score[w], w))[:k]


# ---------------------------------------------------------------- text prompts

@dataclass
class PromptConfig:
    n_ctx: int = 8
    n_keywords: int = 5
    proj_hidden: int = 64
    per_class_proj: bool = False
    use_knowledge: bool = True
    init_std: float = 0.02


@dataclass
class PromptBundle:
    """Everything fixed about the class prompts; the learnables live in the param dict."""

    cfg: PromptConfig
    n_classes: int
    desc_emb: np.ndarray               # (N, d) frozen description embeddings
    keyword_ids: list[list[int]]
    class_ids: list[list[int]]
    keywords: list[list[str]] = field(default_factory=list)


def init_prompt_params(cfg: PromptConfig, n_classes: int, dim: int, rng) -> dict[str, np.ndarray]:
    p = {"prompt.X": rng.normal(0.0, cfg.init_std, (n_classes, cfg.n_ctx, dim))}
    if cfg.use_knowledge:
        lead = (n_classes, cfg.n_ctx) if cfg.per_class_proj else (cfg.n_ctx,)
        h = cfg.proj_hidden
        p["prompt.proj.w1"] = rng.normal(0.0, 1.0 / math.sqrt(dim), lead + (dim, h))
        p["prompt.proj.b1"] = np.zeros(lead + (h,))
        p["prompt.proj.w2"] = rng.normal(0.0, 0.1 / math.sqrt(h), lead + (h, dim))
        p["prompt.proj.b2"] = np.zeros(lead + (dim,))
    return p


def make_prompt_bundle(knowledge: Sequence[ClassKnowledge], encoder: TextEncoder,
                       cfg: PromptConfig | None = None) -> PromptBundle:
    cfg = cfg or PromptConfig()
    corpus = [c.description for c in knowledge]
    desc_emb = np.stack([embed_description(c.description, encoder) for c in knowledge])
    kw = []
    for c in knowledge:
        words = c.keywords if c.keywords else extract_keywords(c.description, cfg.n_keywords, corpus)
        kw.append([w for w in words if w in encoder.vocab])
    kw_ids = [[encoder.vocab.id_of(w) for w in words] for words in kw] if cfg.use_knowledge \
        else [[] for _ in knowledge]
    cls_ids = [[encoder.vocab.id_of(w) for w in nt.split_words(c.name)] for c in knowledge]
    return PromptBundle(cfg, len(knowledge), desc_emb, kw_ids, cls_ids, kw)


def build_class_prompts(bundle: PromptBundle, t) -> dm.Tensor:
    """C[i, k] = Proj_k(desc_i) + X[i, k]; returns (N, K, d)."""
    X = t["prompt.X"]
    if X.shape[0] != bundle.n_classes or bundle.desc_emb.shape[0] != bundle.n_classes:
        raise ValueError(f"class count mismatch: X has {X.shape[0]}, bundle has {bundle.n_classes}")
    if not bundle.cfg.use_knowledge:
        return X
    desc = bundle.desc_emb  # (N, d)
    K = bundle.cfg.n_ctx
    # (N, K, 1, d) against per-slot (K, d, h) or per-class (N, K, d, h) weights
    inp = dm.Tensor(np.broadcast_to(desc[:, None, None, :], (desc.shape[0], K, 1, desc.shape[1])).copy())
    h = dm.gelu(dm.add(dm.matmul(inp, t["prompt.proj.w1"]), _unsq(t["prompt.proj.b1"])))
    out = dm.add(dm.matmul(h, t["prompt.proj.w2"]), _unsq(t["prompt.proj.b2"]))
    out = dm.reshape(out, (desc.shape[0], K, desc.shape[1]))
    return dm.add(out, X)


def _unsq(b: dm.Tensor) -> dm.Tensor:
    return dm.reshape(b, b.shape[:-1] + (1, b.shape[-1]))


def encode_text(bundle: PromptBundle, encoder: TextEncoder, t) -> dm.Tensor:
    """Unit-norm text features (N, d) from [C_i, D_i, class tokens, EOS]."""
    C = build_class_prompts(bundle, t)
    N, K, d = C.shape
    tail_len = [len(bundle.keyword_ids[i]) + len(bundle.class_ids[i]) + 1 for i in range(N)]
    T = K + max(tail_len)
    if T > encoder.cfg.max_len:
        raise ValueError(f"prompt sequence length {T} exceeds max_len {encoder.cfg.max_len}")
    tail = np.zeros((N, T - K, d))
    last = np.zeros(N, dtype=np.int64)
    for i in range(N):
        ids = bundle.keyword_ids[i] + bundle.class_ids[i] + [nt.EOS_ID]
        tail[i, : len(ids)] = encoder.token_rows(ids)
        last[i] = K + len(ids) - 1
    x = dm.add(dm.concat([C, dm.Tensor(tail)], axis=1), dm.Tensor(encoder.basis.pe[:T]))
    feats = encoder.encode(t, x, last)
    return dm.l2_normalize(feats)


# ---------------------------------------------------------------- video prompts

@dataclass
class VideoConfig:
    window: int = 70
    frame_dim: int = 16
    n_global: int = 2


def init_video_params(vcfg: VideoConfig, ecfg: EncoderConfig, rng) -> dict[str, np.ndarray]:
    d = ecfg.dim
    p = layers.init_linear(rng, vcfg.frame_dim, d, prefix="tok.")
    for l in range(ecfg.n_layers):
        p[f"vpl.{l}.query"] = rng.normal(0.0, 1.0 / math.sqrt(d), d)
        p[f"vpl.{l}.wk"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[f"vpl.{l}.wv"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[f"vpl.{l}.global"] = rng.normal(0.0, 0.02, (vcfg.n_global, d))
        p[f"vpl.{l}.wloc"] = rng.normal(0.0, 0.1 / math.sqrt(d), (d, d))
    return p


def video_prompt_step(z_prev, t, layer: int, n_layers: int):
    """Summary, global and local prompt tokens for 1-based ``layer``."""
    if not 1 <= layer <= n_layers:
        raise IndexError(f"layer {layer} outside 1..{n_layers}")
    l = layer - 1
    z_prev = dm.as_tensor(z_prev)
    d = z_prev.shape[-1]
    keys = dm.matmul(z_prev, t[f"vpl.{l}.wk"])                       # (B, T, d)
    scores = dm.scale(dm.matmul(keys, t[f"vpl.{l}.query"]), 1.0 / math.sqrt(d))  # (B, T)
    w = dm.softmax(scores, axis=-1)
    vals = dm.matmul(z_prev, t[f"vpl.{l}.wv"])
    S = dm.matmul(dm.reshape(w, w.shape[:-1] + (1, w.shape[-1])), vals)  # (B, 1, d)
    G = t[f"vpl.{l}.global"]
    L = dm.matmul(z_prev, t[f"vpl.{l}.wloc"])
    return S, G, L


def tokenize_frames(frames, t, window_pe: np.ndarray):
    return dm.add(layers.linear(t, dm.as_tensor(frames), "tok."), dm.Tensor(window_pe))


def encode_video(frames: np.ndarray, t, encoder: VisionEncoder, vcfg: VideoConfig,
                 time_pe: np.ndarray | None = None) -> dm.Tensor:
    """Unit-norm video features (B, d) from frame features (B, T, F_in) or (T, F_in)."""
    frames = np.asarray(frames, dtype=np.float64)
    single = frames.ndim == 2
    if single:
        frames = frames[None]
    B, T, F = frames.shape
    if T != vcfg.window or F != vcfg.frame_dim:
        raise ValueError(f"expected clips of shape ({vcfg.window}, {vcfg.frame_dim}), got ({T}, {F})")
    if time_pe is None:
        time_pe = layers.sinusoidal_pe(T, encoder.dim)
    z = tokenize_frames(frames, t, time_pe)
    n_layers = encoder.cfg.n_layers
    summary = None
    for layer in range(1, n_layers + 1):
        S, G, L = video_prompt_step(z, t, layer, n_layers)
        Gb = dm.broadcast_to(dm.reshape(G, (1,) + G.shape), (B,) + G.shape)
        h = dm.concat([z, S, Gb, L], axis=1)
        h = encoder.layer(t, h, layer - 1)
        z = dm.getitem(h, (slice(None), slice(0, T)))
        summary = dm.getitem(h, (slice(None), T))
    feats = dm.l2_normalize(encoder.final_norm(t, summary))
    return dm.getitem(feats, 0) if single else feats
