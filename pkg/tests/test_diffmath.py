import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitvlm import diffmath as dm


def finite(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False))


def check(fn, bindings, tol=1e-4, **kw):
    err = dm.grad_check(fn, bindings, **kw)
    assert err < tol, err


# ---------------------------------------------------------------- forward values

def test_softmax_of_zeros_is_uniform():
    out = dm.softmax(dm.Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_layer_norm_constant_row_is_zero():
    out = dm.layer_norm(dm.Tensor(np.full((2, 5), 3.7)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_attention_single_token_returns_value():
    v = np.array([[[0.3, -1.2, 2.0, 0.5]]])
    out = dm.attention(dm.Tensor(v), dm.Tensor(v), dm.Tensor(v), n_heads=1)
    assert np.allclose(out.data, v, atol=0, rtol=1e-15)


@given(finite((4, 7)))
def test_softmax_rows_sum_to_one(x):
    p = dm.softmax(dm.Tensor(x)).data
    assert np.all(p > 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-12)


@given(finite((3, 9)))
def test_layer_norm_moments(x):
    x = x + np.linspace(0, 1, 9)  # keep rows non-degenerate
    y = dm.layer_norm(dm.Tensor(x)).data
    var = x.var(-1, keepdims=True)
    assert np.all(np.abs(y.mean(-1)) < 1e-10)
    # eps shifts the variance slightly below one
    assert np.allclose(y.var(-1, keepdims=True), var / (var + dm.LN_EPS), atol=1e-12)


def test_layer_norm_unit_variance_for_spread_input():
    x = np.random.default_rng(0).normal(size=(5, 64)) * 3
    y = dm.layer_norm(dm.Tensor(x)).data
    assert np.all(np.abs(y.var(-1) - 1) < 1e-5)


def test_forward_is_bitwise_repeatable():
    rng = np.random.default_rng(1)
    b = {"a": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2))}
    g = dm.Graph(lambda t: dm.sum_(dm.gelu(dm.matmul(t["a"], t["w"]))))
    assert g.forward(b).data.tobytes() == g.forward(b).data.tobytes()


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, 6)
    ref = -np.mean([z[i, y[i]] - math.log(np.exp(z[i]).sum()) for i in range(6)])
    assert abs(float(dm.cross_entropy(dm.Tensor(z), y).data) - ref) < 1e-12


def test_causal_mask_prefix_block():
    seen = dm.causal_mask(5, prefix=2) == 0.0
    assert seen[0, 1] and seen[1, 0]          # prefix sees itself both ways
    assert not seen[1, 2] and seen[2, 1]      # tokens see the prefix, not the reverse
    assert not seen[2, 3] and seen[3, 2]


# ---------------------------------------------------------------- errors

def test_shape_error_names_node():
    g = dm.Graph(lambda t: dm.matmul(t["a"], t["b"]))
    with pytest.raises(dm.ShapeError) as ei:
        g.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    assert ei.value.op == "matmul" and ei.value.node in ("a", "b")


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        dm.Graph(lambda t: t["x"]).backward()


def test_grad_check_rejects_nonfinite_point():
    with pytest.raises(dm.GradCheckError):
        dm.grad_check(lambda t: dm.sum_(t["x"]), {"x": np.array([1.0, np.nan])})


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        dm.grad_check(lambda t: dm.sum_(t["x"]), {"x": np.ones(2)}, h=0)


# ---------------------------------------------------------------- gradients

def test_product_rule():
    g = dm.Graph(lambda t: dm.mul(t["x"], t["y"]))
    g.forward({"x": 2.0, "y": 3.0})
    assert float(g.backward()["x"]) == 3.0


def test_sum_of_softmax_has_zero_gradient():
    g = dm.Graph(lambda t: dm.sum_(dm.softmax(t["x"])))
    g.forward({"x": np.array([0.3, -1.0, 2.0])})
    assert np.allclose(g.backward()["x"], 0.0, atol=1e-15)


def test_unused_binding_gets_zero_gradient():
    g = dm.Graph(lambda t: dm.sum_(t["x"]))
    g.forward({"x": np.ones(3), "y": np.ones((2, 2))})
    assert np.array_equal(g.backward()["y"], np.zeros((2, 2)))


def test_grad_check_catches_a_wrong_backward_rule():
    def off_by_one_percent(t):
        x = t["x"]
        return dm.sum_(dm._node(x.data ** 2, "sq", (x,), lambda g: (2.02 * g * x.data,)))
    assert dm.grad_check(off_by_one_percent, {"x": np.array([0.5, -1.5, 2.0])}) > 9e-3


def test_grad_check_catches_one_bad_entry_in_a_large_tensor():
    def one_wrong(t):
        x = t["x"]

        def bw(g):
            out = 2.0 * g * x.data
            out[0] *= 1.5
            return (out,)
        return dm.sum_(dm._node(x.data ** 2, "sq", (x,), bw))
    x = np.full(50, 1.0)
    assert dm.grad_check(one_wrong, {"x": x}) > 1e-4


def test_linear_map_is_exact():
    rng = np.random.default_rng(3)
    b = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 2))}
    assert dm.grad_check(lambda t: dm.sum_(dm.matmul(t["x"], t["w"])), b) < 1e-9


OPS = {
    "add": lambda t: dm.add(t["a"], t["b"]),
    "sub": lambda t: dm.sub(t["a"], t["b"]),
    "mul": lambda t: dm.mul(t["a"], t["b"]),
    "div": lambda t: dm.div(t["a"], dm.add(dm.square(t["b"]), 1.0)),
    "scale": lambda t: dm.scale(t["a"], -1.7),
    "exp": lambda t: dm.exp(t["a"]),
    "log": lambda t: dm.log(dm.add(dm.square(t["a"]), 0.5)),
    "sqrt": lambda t: dm.sqrt(dm.add(dm.square(t["a"]), 0.5)),
    "tanh": lambda t: dm.tanh(t["a"]),
    "gelu": lambda t: dm.gelu(t["a"]),
    "power": lambda t: dm.power_const(dm.add(dm.square(t["a"]), 0.1), 1.5),
    "matmul": lambda t: dm.matmul(t["a"], dm.transpose(t["b"])),
    "matvec": lambda t: dm.matmul(t["a"], dm.getitem(t["b"], 0)),
    "batched_matmul": lambda t: dm.matmul(dm.reshape(t["a"], (2, 2, 3)), dm.transpose(t["b"])),
    "concat": lambda t: dm.concat([t["a"], dm.scale(t["b"], 2.0)], axis=1),
    "stack": lambda t: dm.stack([t["a"], t["b"]], axis=0),
    "getitem": lambda t: dm.getitem(t["a"], (np.array([0, 2, 2]), slice(1, 3))),
    "broadcast": lambda t: dm.mul(dm.broadcast_to(dm.getitem(t["b"], 0), (4, 3)), t["a"]),
    "embedding": lambda t: dm.embedding(t["a"], np.array([[0, 3], [3, 1]])),
    "sum": lambda t: dm.sum_(t["a"], axis=0),
    "mean": lambda t: dm.mean(t["a"], axis=1, keepdims=True),
    "softmax": lambda t: dm.softmax(t["a"]),
    "log_softmax": lambda t: dm.log_softmax(t["a"]),
    "layer_norm": lambda t: dm.layer_norm(t["a"], dm.getitem(t["b"], 0), dm.getitem(t["b"], 1)),
    "l2_normalize": lambda t: dm.l2_normalize(t["a"]),
    "cosine": lambda t: dm.cosine_similarity(t["a"], t["b"]),
    "attention": lambda t: dm.attention(dm.reshape(t["a"], (1, 4, 3)), dm.reshape(t["b"], (1, 4, 3)),
                                        dm.reshape(t["a"], (1, 4, 3)), 1, dm.causal_mask(4)),
    "cross_entropy": lambda t: dm.cross_entropy(t["a"], np.array([0, 2, 1, 1])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check_at_ten_points(name):
    fn = OPS[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        b = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(4, 3))}
        out = dm.Graph(fn).forward(b)
        w = rng.normal(size=out.shape)
        check(fn, b, seed_vec=w)


def test_multihead_attention_gradients():
    rng = np.random.default_rng(4)
    b = {k: rng.normal(size=(2, 5, 4)) for k in "qkv"}
    fn = lambda t: dm.attention(t["q"], t["k"], t["v"], 2, dm.causal_mask(5, prefix=2))  # noqa: E731
    w = rng.normal(size=(2, 5, 4))
    check(fn, b, seed_vec=w)


def test_layer_norm_near_constant_input():
    x = np.full((1, 6), 0.4) + 1e-4 * np.random.default_rng(5).normal(size=(1, 6))
    w = np.random.default_rng(6).normal(size=(1, 6))
    check(lambda t: dm.layer_norm(t["x"]), {"x": x}, tol=1e-3, seed_vec=w)


def test_detach_blocks_gradient():
    g = dm.Graph(lambda t: dm.mul(dm.detach(t["x"]), t["x"]))
    g.forward({"x": 3.0})
    assert float(g.backward()["x"]) == 3.0


# ---------------------------------------------------------------- optimiser

def test_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0])}
    new = dm.optimizer_step(p, {"w": np.zeros(2)}, dm.OptimizerState())
    assert np.array_equal(new["w"], p["w"])


def test_frozen_parameters_are_not_updated():
    p = {"w": np.ones(2), "frozen": np.ones(2)}
    g = {"w": np.ones(2), "frozen": np.ones(2)}
    state = dm.OptimizerState()
    new = dm.optimizer_step(p, g, state, trainable=["w"])
    assert new["frozen"] is p["frozen"]
    assert not np.array_equal(new["w"], p["w"])
    assert state.step == 1 and "frozen" not in state.m


def test_missing_gradient_is_an_error():
    with pytest.raises(KeyError):
        dm.optimizer_step({"w": np.ones(2)}, {}, dm.OptimizerState(), trainable=["w"])


def test_adam_decreases_quadratic():
    state = dm.OptimizerState(lr=0.01)
    p = {"x": np.array([3.0])}
    losses = []
    for _ in range(200):
        loss, g = dm.value_and_grad(lambda t: dm.sum_(dm.square(t["x"])), p)
        losses.append(loss)
        p = dm.optimizer_step(p, g, state)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_first_step_matches_closed_form():
    # after bias correction the first step is lr * sign(g) (up to eps)
    state = dm.OptimizerState(lr=0.1)
    new = dm.optimizer_step({"x": np.array([1.0, 1.0])}, {"x": np.array([0.5, -2.0])}, state)
    assert np.allclose(new["x"], [0.9, 1.1], atol=1e-7)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    params = {"b.scalar": np.array(2.5), "a.mat": rng.normal(size=(3, 4)), "c.vec": rng.normal(size=5)}
    path = tmp_path / "p.ckpt"
    dm.save_checkpoint(path, params)
    back = dm.load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "p.ckpt"
    dm.save_checkpoint(path, {"w": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:8] == b"GVLMCKPT"
    assert raw[8:12] == (1).to_bytes(4, "little") and raw[12:16] == (1).to_bytes(4, "little")
    assert raw[16:20] == (1).to_bytes(4, "little") and raw[20:21] == b"w"
    assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.0, 2.0]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        dm.load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(finite((2, 3)), finite((3,)))
def test_broadcast_add_gradient_matches_closed_form(a, b):
    g = dm.Graph(lambda t: dm.sum_(dm.square(dm.add(t["a"], t["b"]))))
    g.forward({"a": a, "b": b})
    grads = g.backward()
    assert np.allclose(grads["a"], 2 * (a + b), rtol=1e-12, atol=1e-12)
    assert np.allclose(grads["b"], 2 * (a + b).sum(0), rtol=1e-12, atol=1e-12)
