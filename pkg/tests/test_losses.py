import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitvlm import diffmath as dm
from gaitvlm import layers
from gaitvlm import losses as L
from gaitvlm import numtext as nt


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def features_for_probabilities(p, tau, d=6):
    """Unit video feature e0 and text rows whose e0-components are tau*log(p) + 0.5."""
    s = tau * np.log(np.asarray(p)) + 0.5
    text = np.zeros((len(p), d))
    text[:, 0] = s
    for i in range(len(p)):
        text[i, i + 1] = math.sqrt(1 - s[i] ** 2)
    video = np.zeros(d)
    video[0] = 1.0
    return video, text


def ce_oracle(logits, labels):
    out = []
    for z, y in zip(logits, labels):
        m = max(z)
        out.append(-(z[y] - m - math.log(sum(math.exp(v - m) for v in z))))
    return sum(out) / len(out)


# ---------------------------------------------------------------- focal

def test_focal_hand_example():
    video, text = features_for_probabilities([0.2, 0.5, 0.3], 0.01)
    loss = float(L.focal_contrastive(video, text, [0, 1, 0]).data)
    assert abs(loss - (-0.25 * 0.5 ** 2 * math.log(0.5))) < 1e-6
    assert abs(loss - 0.04332) < 1e-5


def test_focal_reduces_to_cross_entropy():
    cfg = L.FocalConfig(alpha=1.0, gamma=0.0, tau=0.07)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        v, t = unit_rows(rng, 5, 8), unit_rows(rng, 4, 8)
        y = rng.integers(0, 4, 5)
        got = float(L.focal_contrastive(v, t, L.one_hot(y, 4), cfg).data)
        assert abs(got - ce_oracle((v @ t.T / 0.07).tolist(), y)) < 1e-12


def test_focal_vanishes_when_confident():
    video, text = features_for_probabilities([1e-12, 1 - 2e-12, 1e-12], 0.01)
    assert float(L.focal_contrastive(video, text, [0, 1, 0]).data) < 1e-20


def test_focal_non_negative_and_decreasing_in_true_similarity():
    rng = np.random.default_rng(1)
    text = unit_rows(rng, 3, 5)
    prev = None
    for a in np.linspace(-0.9, 0.9, 10):
        # move the video feature toward class 1
        v = (1 - abs(a)) * text[0] + a * text[1]
        v /= np.linalg.norm(v)
        loss = float(L.focal_contrastive(v, text, [0, 1, 0]).data)
        assert loss >= 0
        if prev is not None:
            assert loss <= prev
        prev = loss


def test_focal_rejects_non_one_hot():
    with pytest.raises(ValueError):
        L.focal_contrastive(np.ones(3) / math.sqrt(3), np.eye(3), [0.5, 0.5, 0])
    with pytest.raises(ValueError):
        L.focal_contrastive(np.ones(3) / math.sqrt(3), np.eye(3), [1, 0])


@pytest.mark.parametrize("kw", [{"tau": 0}, {"gamma": -1}, {"alpha": 0}, {"alpha": 1.5}])
def test_focal_config_validation(kw):
    with pytest.raises(ValueError):
        L.FocalConfig(**kw)


# ---------------------------------------------------------------- numeric alignment

def heads(dim=6, seed=0):
    return L.init_heads(np.random.default_rng(seed), dim)


def identity_heads(dim):
    p = {}
    for k in ("head.text.", "head.num."):
        p[k + "fc1.w"] = np.eye(dim)
        p[k + "fc1.b"] = np.full(dim, 10.0)  # gelu(x + 10) ~ x + 10 on unit inputs
        p[k + "fc2.w"] = np.eye(dim)
        p[k + "fc2.b"] = np.full(dim, -10.0)
    return layers.as_tensors(p)


def test_alignment_matching_feature_gives_near_zero_loss():
    t = identity_heads(4)
    text = np.eye(3, 4)
    loss = float(L.numeric_alignment_loss(text[[2]], text, [2], t).data)
    assert loss < 1e-10


def test_alignment_uniform_similarity_is_log_n():
    t = identity_heads(4)
    text = np.eye(3, 4)
    f_num = np.zeros((1, 4))
    f_num[0, 3] = 1.0  # orthogonal to every class row
    loss = float(L.numeric_alignment_loss(f_num, text, [0], t).data)
    assert abs(loss - math.log(3)) < 1e-10


def test_alignment_matches_oracle():
    rng = np.random.default_rng(2)
    p = heads(6, 3)
    t = layers.as_tensors(p)
    f_text, f_num = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    y = rng.integers(0, 4, 5)

    def head(x, k):
        h = x @ p[k + "fc1.w"] + p[k + "fc1.b"]
        h = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
        o = h @ p[k + "fc2.w"] + p[k + "fc2.b"]
        return o / np.linalg.norm(o, axis=1, keepdims=True)

    logits = head(f_num, "head.num.") @ head(f_text, "head.text.").T / 0.01
    got = float(L.numeric_alignment_loss(f_num, f_text, y, t).data)
    assert abs(got - ce_oracle(logits.tolist(), y)) < 1e-10


def test_alignment_label_out_of_range():
    with pytest.raises(ValueError):
        L.numeric_alignment_loss(np.ones((1, 6)), np.ones((3, 6)), [3], layers.as_tensors(heads()))


def test_losses_invariant_to_feature_scale():
    rng = np.random.default_rng(4)
    t = layers.as_tensors(heads(6, 5))
    v, tx = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    y = L.one_hot([0, 3, 1], 4)

    def focal(scale):
        return float(L.focal_contrastive(dm.l2_normalize(dm.Tensor(scale * v)),
                                         dm.l2_normalize(dm.Tensor(scale * tx)), y).data)
    assert abs(focal(1.0) - focal(7.5)) < 1e-12


# ---------------------------------------------------------------- total

def test_total_loss_arithmetic():
    assert abs(float(L.total_loss(1.0, 2.0).data) - 1.1) < 1e-15
    assert float(L.total_loss(1.0, 2.0, L.CombinedLossConfig(omega=0.0)).data) == 1.0


def test_unpaired_batch_is_l_k_bitwise():
    lk = dm.Tensor(np.array(0.123456789))
    assert L.total_loss(lk).data.tobytes() == lk.data.tobytes()


def test_total_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        L.total_loss(float("nan"), 1.0)
    with pytest.raises(ValueError):
        L.total_loss(1.0, float("inf"))
    with pytest.raises(ValueError):
        L.CombinedLossConfig(omega=-0.1)


# ---------------------------------------------------------------- ordinal

@pytest.fixture(scope="module")
def vocab():
    return nt.Vocabulary.build()


def test_ordinal_zero_when_argmax_correct(vocab):
    rng = np.random.default_rng(5)
    for _ in range(50):
        logits = rng.normal(size=(3, vocab.size))
        tok = vocab.id_at(logits.argmax(-1))
        assert float(L.ordinal_ce(logits, tok, vocab).data) == 0.0


def test_ordinal_full_distance_is_plain_ce(vocab):
    logits = np.zeros(vocab.size)
    logits[0] = 5.0  # argmax is word id 0
    loss = float(L.ordinal_ce(logits, nt.NUM_MAX_ID, vocab).data)
    ce = float(L.plain_ce(logits[None], [nt.NUM_MAX_ID], vocab).data)
    assert L.D_MAX == nt.NUM_MAX_ID
    assert loss == ce


def test_ordinal_matches_hand_formula(vocab):
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(4, vocab.size))
    tok = np.array([49408, 49500, 49608, 3])
    expected = []
    for z, k in zip(logits, tok):
        pred = vocab.id_at(int(np.argmax(z)))
        ce = ce_oracle([z.tolist()], [vocab.index(int(k))])
        expected.append(abs(pred - k) / 49608 * ce)
    assert abs(float(L.ordinal_ce(logits, tok, vocab).data) - np.mean(expected)) < 1e-10


def test_ordinal_weight_monotone(vocab):
    logits = np.zeros((101, vocab.size))
    logits[:, vocab.index(49508)] = 1.0  # every row predicts the middle bucket
    w = L.ordinal_weight(logits, np.arange(49508, 49609), vocab)
    assert w[0] == 0 and np.all(np.diff(w) > 0)


def test_ordinal_weight_is_detached(vocab):
    rng = np.random.default_rng(7)
    z = rng.normal(size=(2, vocab.size))
    tok = np.array([49410, 49600])
    w = L.ordinal_weight(z, tok, vocab)
    g = dm.Graph(lambda t: L.ordinal_ce(t["z"], tok, vocab))
    g.forward({"z": z})
    grad = g.backward()["z"]
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    onehot = np.zeros_like(z)
    onehot[[0, 1], vocab.index(tok)] = 1
    assert np.allclose(grad, (w[:, None] * (p - onehot)) / 2, atol=1e-15, rtol=0)


def test_ordinal_invalid_token(vocab):
    with pytest.raises(KeyError):
        L.ordinal_ce(np.zeros(vocab.size), 49407 - 3, vocab)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.integers(0, 200))
def test_ordinal_weight_is_bucket_distance(a, b):
    vocab = nt.Vocabulary.build()
    z = np.zeros(vocab.size)
    z[vocab.index(49408 + a)] = 1.0
    w = L.ordinal_weight(z[None], [49408 + b], vocab)[0]
    assert w == abs(a - b) / 49608
