"""Contrastive, numeric-alignment and decoder losses (batch mean reduction)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import layers
from . import numtext as nt


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    tau: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass(frozen=True)
class CombinedLossConfig:
    omega: float = 0.05

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")


def _check_one_hot(y: np.ndarray, n_cls: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape[-1] != n_cls or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(-1) == 1):
        raise ValueError("labels must be one-hot over the classes")
    return y


def one_hot(labels, n_cls: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label outside 0..{n_cls - 1}")
    return np.eye(n_cls)[labels]


def focal_contrastive(f_video, f_text, y, cfg: FocalConfig = FocalConfig()) -> dm.Tensor:
    """Multi-class focal loss over softmax(<F_i^T|F^V> / tau).

    ``f_video`` is (B, d) or (d,), ``f_text`` (N, d), both unit-norm.
    """
    f_video = dm.as_tensor(f_video)
    f_text = dm.as_tensor(f_text)
    if f_video.ndim == 1:
        f_video = dm.reshape(f_video, (1, -1))
    y = _check_one_hot(y, f_text.shape[0])
    if y.shape[0] != f_video.shape[0]:
        raise ValueError("label batch does not match video batch")
    sims = dm.matmul(f_video, dm.transpose(f_text))
    logp = dm.log_softmax(dm.scale(sims, 1.0 / cfg.tau), axis=-1)
    p = dm.exp(logp)
    mod = dm.power_const(dm.sub(1.0, p), cfg.gamma) if cfg.gamma else dm.Tensor(np.ones(p.shape))
    per = dm.sum_(dm.mul(dm.mul(mod, logp), dm.Tensor(y)), axis=-1)
    return dm.scale(dm.mean(per), -cfg.alpha)


def init_heads(rng, dim: int, out_dim: int | None = None, hidden: int | None = None) -> dict[str, np.ndarray]:
    out_dim = out_dim or dim
    hidden = hidden or dim
    p = layers.init_mlp2(rng, dim, hidden, out_dim, prefix="head.text.")
    p.update(layers.init_mlp2(rng, dim, hidden, out_dim, prefix="head.num."))
    return p


def project_text(t, f_text):
    return dm.l2_normalize(layers.mlp2(t, dm.as_tensor(f_text), "head.text."))


def project_num(t, f_num):
    return dm.l2_normalize(layers.mlp2(t, dm.as_tensor(f_num), "head.num."))


def numeric_alignment_loss(f_num, f_text, labels, t, tau: float = 0.01) -> dm.Tensor:
    """Cross-entropy of softmax(<P_i^T|P^num> / tau) against each sample's class."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_cls = dm.as_tensor(f_text).shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label outside 0..{n_cls - 1}")
    p_text = project_text(t, f_text)
    f_num = dm.as_tensor(f_num)
    if f_num.ndim == 1:
        f_num = dm.reshape(f_num, (1, -1))
    p_num = project_num(t, f_num)
    logits = dm.scale(dm.matmul(p_num, dm.transpose(p_text)), 1.0 / tau)
    return dm.cross_entropy(logits, labels)


def total_loss(l_k, l_gp=None, cfg: CombinedLossConfig = CombinedLossConfig()) -> dm.Tensor:
    """L = L_k + omega * L_gp; an unpaired batch (``l_gp is None``) gives L_k itself."""
    l_k = dm.as_tensor(l_k)
    if not np.all(np.isfinite(l_k.data)):
        raise ValueError("non-finite L_k")
    if l_gp is None:
        return l_k
    l_gp = dm.as_tensor(l_gp)
    if not np.all(np.isfinite(l_gp.data)):
        raise ValueError("non-finite L_gp")
    return dm.add(l_k, dm.scale(l_gp, cfg.omega))


D_MAX = nt.NUM_MAX_ID  # largest id distance in the shifted vocabulary (ids start at 0)


def ordinal_weight(logits: np.ndarray, tok, vocab: nt.Vocabulary) -> np.ndarray:
    """|argmax id - tok| / D_MAX, computed outside the graph."""
    pred = vocab.id_at(np.asarray(logits).argmax(axis=-1))
    return np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(tok, dtype=np.float64)) / D_MAX


def ordinal_ce(logits, tok, vocab: nt.Vocabulary, reduction: str = "mean") -> dm.Tensor:
    """Distance-weighted cross-entropy over output rows indexed like ``vocab.index``.

    The distance weight is a constant per step; only the CE term carries gradient.
    """
    logits = dm.as_tensor(logits)
    tok = np.asarray(tok, dtype=np.int64)
    idx = vocab.index(tok)
    if logits.ndim == 1:
        logits = dm.reshape(logits, (1, -1))
        idx, tok = np.atleast_1d(idx), np.atleast_1d(tok)
    w = ordinal_weight(logits.data, tok, vocab)
    ce = dm.cross_entropy(logits, idx, reduction="none")
    weighted = dm.mul(ce, dm.Tensor(w))
    if reduction == "none":
        return weighted
    if reduction == "sum":
        return dm.sum_(weighted)
    return dm.mean(weighted)


def plain_ce(logits, tok, vocab: nt.Vocabulary) -> dm.Tensor:
    return dm.cross_entropy(logits, vocab.index(np.asarray(tok)))

