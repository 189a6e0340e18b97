"""Parameter initialisers and transformer blocks shared by the encoders and decoder.

Parameters live in flat ``name -> ndarray`` dicts so they can be bound into a
:class:`~gaitvlm.diffmath.Graph` and written to checkpoints unchanged.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm


def init_linear(rng, d_in, d_out, std=None, bias=True, prefix="") -> dict[str, np.ndarray]:
    std = 1.0 / np.sqrt(d_in) if std is None else std
    p = {f"{prefix}w": rng.normal(0.0, std, (d_in, d_out))}
    if bias:
        p[f"{prefix}b"] = np.zeros(d_out)
    return p


def init_mlp2(rng, d_in, d_hidden, d_out, prefix="", bias=True, out_std=None):
    p = init_linear(rng, d_in, d_hidden, bias=bias, prefix=f"{prefix}fc1.")
    p.update(init_linear(rng, d_hidden, d_out, std=out_std, bias=bias, prefix=f"{prefix}fc2."))
    return p


def init_block(rng, d, prefix, mlp_ratio=4, attn_std=None, out_scale=1.0):
    """Pre-LN transformer block parameters."""
    s = 1.0 / np.sqrt(d) if attn_std is None else attn_std
    p = {
        f"{prefix}ln1.g": np.ones(d), f"{prefix}ln1.b": np.zeros(d),
        f"{prefix}ln2.g": np.ones(d), f"{prefix}ln2.b": np.zeros(d),
        f"{prefix}attn.wq": rng.normal(0, s, (d, d)),
        f"{prefix}attn.wk": rng.normal(0, s, (d, d)),
        f"{prefix}attn.wv": rng.normal(0, 1.0 / np.sqrt(d), (d, d)),
        f"{prefix}attn.wo": rng.normal(0, out_scale / np.sqrt(d), (d, d)),
        f"{prefix}attn.bo": np.zeros(d),
    }
    p.update(init_mlp2(rng, d, mlp_ratio * d, d, prefix=f"{prefix}mlp.",
                       out_std=out_scale / np.sqrt(mlp_ratio * d)))
    return p


def linear(t, x, prefix=""):
    y = dm.matmul(x, t[f"{prefix}w"])
    b = t.get(f"{prefix}b")
    return y if b is None else dm.add(y, b)


def mlp2(t, x, prefix="", act="gelu"):
    return linear(t, dm.pointwise(linear(t, x, f"{prefix}fc1."), act), f"{prefix}fc2.")


def block(t, x, prefix, n_heads, mask=None):
    h = dm.layer_norm(x, t[f"{prefix}ln1.g"], t[f"{prefix}ln1.b"])
    q = dm.matmul(h, t[f"{prefix}attn.wq"])
    k = dm.matmul(h, t[f"{prefix}attn.wk"])
    v = dm.matmul(h, t[f"{prefix}attn.wv"])
    a = dm.attention(q, k, v, n_heads, mask)
    x = dm.add(x, dm.add(dm.matmul(a, t[f"{prefix}attn.wo"]), t[f"{prefix}attn.bo"]))
    h = dm.layer_norm(x, t[f"{prefix}ln2.g"], t[f"{prefix}ln2.b"])
    return dm.add(x, mlp2(t, h, f"{prefix}mlp."))


def sinusoidal_pe(max_len: int, dim: int, total_dim: int | None = None) -> np.ndarray:
    """Fixed sinusoidal encoding in the first ``dim`` columns, zeros after."""
    total_dim = dim if total_dim is None else total_dim
    pe = np.zeros((max_len, total_dim))
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, dim, 2)
    freq = 1.0 / (10000.0 ** (i / dim))
    pe[:, 0:dim:2] = np.sin(pos * freq)
    pe[:, 1:dim:2] = np.cos(pos * freq)[:, : len(range(1, dim, 2))]
    return pe


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, dm.Tensor]:
    return {k: dm.Tensor(v, name=k) for k, v in params.items()}
