import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from diffairec import nn

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_linear_identity(rng):
    x = rng.standard_normal(4)
    y, _ = nn.linear_forward(np.eye(4), np.zeros(4), x)
    assert np.array_equal(y, x)


def test_linear_hand():
    y, _ = nn.linear_forward(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones(2), np.ones(2))
    assert y.tolist() == [4.0, 8.0]


def test_linear_loop_oracle(rng):
    W, b, x = rng.standard_normal((5, 7)), rng.standard_normal(5), rng.standard_normal(7)
    y, _ = nn.linear_forward(W, b, x)
    loop = [sum(W[i, j] * x[j] for j in range(7)) + b[i] for i in range(5)]
    assert np.max(np.abs(y - loop)) < 1e-12


def test_linear_dim_mismatch():
    with pytest.raises(ValueError, match="expected last dimension 3"):
        nn.linear_forward(np.ones((2, 3)), np.zeros(2), np.ones(4))
    with pytest.raises(ValueError):
        nn.linear_backward(np.ones((2, 3)), np.ones(3), np.ones(5))


def test_linear_backward_zero_and_scalar():
    W = np.array([[2.5]])
    dW, db, dx = nn.linear_backward(W, np.array([3.0]), np.zeros(1))
    assert not dW.any() and not db.any() and not dx.any()
    dW, db, dx = nn.linear_backward(W, np.array([3.0]), np.array([0.5]))
    assert dW.tolist() == [[1.5]] and db.tolist() == [0.5] and dx.tolist() == [1.25]


def test_linear_grad_check(rng):
    p = {"W": rng.standard_normal((4, 6)), "b": rng.standard_normal(4), "x": rng.standard_normal(6)}
    w = rng.standard_normal(4)

    def fn(p):
        y, c = nn.linear_forward(p["W"], p["b"], p["x"])
        dW, db, dx = nn.linear_backward(p["W"], c, w)
        return float(w @ y), {"W": dW, "b": db, "x": dx}

    assert max(nn.grad_check(fn, p, rng=rng).values()) < 1e-6


def test_mlp_single_identity_layer(rng):
    p = {"m.0.W": np.eye(3), "m.0.b": np.zeros(3)}
    x = rng.standard_normal(3)
    assert np.array_equal(nn.mlp_forward(p, "m", x)[0], x)


def test_mlp_zero_weights_gives_final_bias(rng):
    p = {"m.0.W": np.zeros((4, 3)), "m.0.b": rng.standard_normal(4),
         "m.1.W": np.zeros((2, 4)), "m.1.b": np.array([0.3, -0.7])}
    assert nn.mlp_forward(p, "m", rng.standard_normal(3))[0].tolist() == [0.3, -0.7]


def test_mlp_three_layer_grad_check(rng):
    p = {}
    nn.init_mlp(p, rng, "m", [6, 9, 7, 4])
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((3, 4))

    def fn(p):
        y, caches = nn.mlp_forward(p, "m", x)
        grads = {}
        nn.mlp_backward(p, "m", caches, w, grads)
        return float(np.sum(w * y)), grads

    assert max(nn.grad_check(fn, p, probes=20, rng=rng).values()) < 1e-5


def test_mlp_missing():
    with pytest.raises(KeyError):
        nn.mlp_forward({}, "nope", np.ones(2))


def test_init_he_uniform(rng):
    W, b = nn.init_linear(rng, 50, 400)
    bound = np.sqrt(6 / 50)
    assert np.abs(W).max() <= bound and np.abs(W).max() > 0.95 * bound
    assert not b.any()
    # uniform(-a, a) has variance a^2 / 3 = 2 / fan_in
    assert W.var() == pytest.approx(2 / 50, rel=0.05)


def test_softmax_cases():
    assert nn.softmax(np.zeros(2)).tolist() == [0.5, 0.5]
    s = nn.softmax(np.array([1000.0, 0.0]))
    assert s[0] == pytest.approx(1.0) and s[1] < 1e-12 and np.all(np.isfinite(s))
    with pytest.raises(nn.NonFiniteError, match="NaN"):
        nn.softmax(np.array([0.0, np.nan]))


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_properties(x, c):
    s = nn.softmax(x)
    assert abs(s.sum() - 1) < 1e-12
    assert np.all(s >= 0)
    assert np.allclose(nn.softmax(x + c), s, atol=1e-12)


def _attn(rng, L, d, dq=5, dk=6):
    shape = nn.AttentionShape(L, d)
    p = {}
    nn.init_attention(p, rng, "a", shape, dq, dk, dk)
    return shape, p


def test_attention_single_token_is_value_projection(rng):
    shape, p = _attn(rng, 1, 7)
    q, k, v = rng.standard_normal(5), rng.standard_normal(6), rng.standard_normal(6)
    out, _ = nn.attention_forward(p, "a", shape, q, k, v)
    assert np.allclose(out, p["a.Wv"] @ v, atol=1e-14, rtol=0)


def test_attention_identical_keys_average_values(rng):
    shape, p = _attn(rng, 3, 2)
    # Wk rows repeat per token, so all key tokens coincide
    p["a.Wk"] = np.tile(rng.standard_normal((2, 6)), (3, 1))
    q, k, v = rng.standard_normal(5), rng.standard_normal(6), rng.standard_normal(6)
    out, cache = nn.attention_forward(p, "a", shape, q, k, v)
    vt = (p["a.Wv"] @ v).reshape(3, 2)
    assert np.allclose(cache[6], 1 / 3)
    assert np.allclose(out.reshape(3, 2), vt.mean(axis=0), atol=1e-12)


def test_attention_batch_matches_rows(rng):
    shape, p = _attn(rng, 4, 3)
    Q, K, V = rng.standard_normal((5, 5)), rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    out, _ = nn.attention_forward(p, "a", shape, Q, K, V)
    for r in range(5):
        assert np.allclose(out[r], nn.attention_forward(p, "a", shape, Q[r], K[r], V[r])[0], atol=1e-13)


def test_attention_grad_check(rng):
    shape, p = _attn(rng, 4, 3)
    p.update(q=rng.standard_normal(5), k=rng.standard_normal(6), v=rng.standard_normal(6))
    w = rng.standard_normal(shape.size)

    def fn(p):
        out, cache = nn.attention_forward(p, "a", shape, p["q"], p["k"], p["v"])
        g = {}
        g["q"], g["k"], g["v"] = nn.attention_backward(p, "a", shape, cache, w, g)
        return float(w @ out), g

    assert max(nn.grad_check(fn, p, rng=rng).values()) < 1e-5


def test_attention_dim_mismatch(rng):
    shape, p = _attn(rng, 2, 2)
    with pytest.raises(ValueError, match="query"):
        nn.attention_forward(p, "a", shape, np.ones(4), np.ones(6), np.ones(6))


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_attention_finite_on_extreme_inputs(x):
    rng = np.random.default_rng(0)
    shape, p = _attn(rng, 2, 3)
    out, _ = nn.attention_forward(p, "a", shape, x, np.hstack([x, x[:, :1]]), np.hstack([x, x[:, :1]]))
    assert np.all(np.isfinite(out))


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_mlp_finite_on_extreme_inputs(x):
    p = {}
    nn.init_mlp(p, np.random.default_rng(0), "m", [6, 8, 3])
    y, caches = nn.mlp_forward(p, "m", x)
    g = {}
    dx = nn.mlp_backward(p, "m", caches, np.ones_like(y), g)
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(dx))
    assert all(np.all(np.isfinite(v)) for v in g.values())


# ----------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_identity(rng):
    p = {"w": rng.standard_normal(3)}
    before = p["w"].copy()
    opt = nn.Adam()
    opt.step(p, {"w": np.zeros(3)})
    assert np.array_equal(p["w"], before)
    assert opt.step_count == 1


def test_adam_constant_gradient_step_size():
    p = {"w": np.zeros(1)}
    opt = nn.Adam()
    prev = 0.0
    for _ in range(10_000):
        opt.step(p, {"w": np.array([3.7])})
        step = prev - p["w"][0]
        prev = p["w"][0]
    assert step == pytest.approx(1e-3, rel=0.01)


def test_adam_quadratic_reference_sequence():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = {"w": np.array([1.0])}
    opt = nn.Adam()
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 501):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        opt.step(p, {"w": 2 * p["w"]})
        assert abs(p["w"][0] - w) < 1e-12


def test_adam_nan_names_block():
    p = {"enc.0.W": np.zeros(2)}
    with pytest.raises(nn.NonFiniteError, match="enc.0.W"):
        nn.Adam().step(p, {"enc.0.W": np.array([0.0, np.nan])})


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        nn.Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_grad_check_detects_corruption(rng):
    p = {"W": rng.standard_normal((3, 4))}
    x = rng.standard_normal(4)

    def fn(p):
        y = p["W"] @ x
        return float(y @ y), {"W": 2 * np.outer(y, x) * 1.05}

    assert max(nn.grad_check(fn, p, rng=rng).values()) > 1e-2
