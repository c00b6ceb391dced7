import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmil import autodiff as ad
from promptmil.autodiff import (INFERENCE, Graph, GraphError, MemMeter, ShapeError, Tensor,
                                backward, backward_with_seed, grad_check)

from conftest import numeric_grad


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def test_matmul_hand_example():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0,
                               atol=1e-15)


def test_layernorm_constant_vector_gives_bias():
    x = Tensor(np.full(5, 3.7))
    beta = np.arange(5.0)
    out = ad.layernorm(x, np.full(5, 2.0), beta)
    np.testing.assert_allclose(out.data, beta, atol=1e-12)
    np.testing.assert_allclose(ad.layernorm(x).data, 0.0, atol=1e-12)


def test_square_gradient():
    x = leaf(3.0)
    with Graph():
        y = x * x
    assert backward(y)[x] == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient(rng):
    x = leaf(rng.normal(size=7))
    with Graph():
        y = ad.sum_(ad.softmax(x))
    np.testing.assert_allclose(backward(y)[x], 0.0, atol=1e-15)


def _mlp_loss(x, w1, b1, w2, b2):
    hid = ad.gelu(ad.matmul(x, w1) + b1)
    return ad.mean(ad.tanh(ad.matmul(hid, w2) + b2))


def test_two_layer_mlp_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    params = [leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=6)),
              leaf(rng.normal(size=(6, 3))), leaf(rng.normal(size=3))]
    f = lambda: _mlp_loss(x, *params)  # noqa: E731
    assert grad_check(f, params, eps=1e-4) < 1e-3


def test_grad_check_linear_is_exact(rng):
    w = leaf(rng.normal(size=6))
    x = Tensor(rng.normal(size=6))
    assert grad_check(lambda: ad.sum_(w * x), [w], eps=1e-4) < 1e-9


def test_grad_check_rejects_zero_eps():
    w = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: ad.sum_(w), [w], eps=0.0)


def test_seed_ones_on_doubling(rng):
    x = leaf(rng.normal(size=(3, 2)))
    with Graph():
        y = x * 2.0
    np.testing.assert_array_equal(backward_with_seed(y, np.ones((3, 2)))[x], 2.0)


def test_zero_seed_gives_exact_zeros(rng):
    x = leaf(rng.normal(size=(3, 4)))
    w = leaf(rng.normal(size=(4, 2)))
    with Graph():
        y = ad.gelu(ad.matmul(x, w))
    grads = backward_with_seed(y, np.zeros((3, 2)))
    assert np.all(grads[x] == 0.0) and np.all(grads[w] == 0.0)


def test_seed_through_linear_map_is_transpose_product(rng):
    W = rng.normal(size=(5, 3))
    x = leaf(rng.normal(size=(3, 1)))
    g = rng.normal(size=(5, 1))
    with Graph():
        y = ad.matmul(Tensor(W), x)
    np.testing.assert_allclose(backward_with_seed(y, g)[x], W.T @ g, rtol=1e-14)


def test_seed_shape_mismatch():
    x = leaf(np.ones(3))
    with Graph():
        y = x * 1.0
    with pytest.raises(ShapeError):
        backward_with_seed(y, np.ones(4))


def test_seeded_equals_weighted_sum(rng):
    x = leaf(rng.normal(size=(4, 3)))
    w = leaf(rng.normal(size=(3, 5)))
    g = rng.normal(size=(4, 5))
    with Graph():
        y = ad.softmax(ad.matmul(x, w), axis=-1)
    seeded = backward_with_seed(y, g)
    with Graph():
        y2 = ad.softmax(ad.matmul(x, w), axis=-1)
        total = ad.sum_(y2 * Tensor(g))
    plain = backward(total)
    for t in (x, w):
        np.testing.assert_allclose(seeded[t], plain[t], rtol=1e-12, atol=1e-15)


def test_backward_needs_scalar():
    x = leaf(np.ones(3))
    with Graph():
        y = x * 2.0
    with pytest.raises(ShapeError):
        backward(y)


def test_backward_through_inference_graph_fails():
    x = leaf(np.ones(3))
    with Graph(mode=INFERENCE):
        y = ad.sum_(x * 2.0)
    assert y.node_id is None
    with pytest.raises(GraphError):
        backward(y)


def test_backward_twice_fails():
    x = leaf(2.0)
    with Graph():
        y = x * x
    backward(y)
    with pytest.raises(GraphError):
        backward(y)


def test_unreachable_leaf_gets_zeros():
    x, z = leaf(2.0), leaf(np.ones((2, 2)))
    with Graph():
        y = x * 3.0
    grads = backward(y, wrt=[x, z])
    np.testing.assert_array_equal(grads[z], np.zeros((2, 2)))


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_debug_mode_catches_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(AssertionError):
            ad.exp(Tensor([np.nan]))
    finally:
        ad.set_debug(False)
    ad.exp(Tensor([np.nan]))


def test_inference_mode_saves_nothing(rng):
    meter = MemMeter()
    x = leaf(rng.normal(size=(4, 8)))
    w = leaf(rng.normal(size=(8, 8)))
    with Graph(mode=INFERENCE, meter=meter) as g:
        y = ad.softmax(ad.layernorm(ad.gelu(ad.matmul(x, w))))
    assert g.nodes == [] and y.node_id is None
    assert meter.live_activation_elems == 0 and meter.peak_activation_elems == 0


def test_meter_tracks_saves_and_release(rng):
    meter = MemMeter()
    x = leaf(rng.normal(size=(4, 8)))
    with Graph(meter=meter):
        y = ad.sum_(ad.softmax(x))
    # softmax keeps its (4, 8) output
    assert meter.live_activation_elems == 32
    backward(y)
    assert meter.live_activation_elems == 0
    assert meter.peak_activation_elems == 32
    meter.reset()
    assert meter.peak_activation_elems == 0


def test_frozen_weights_are_not_counted(rng):
    meter = MemMeter()
    w = Tensor(rng.normal(size=(8, 8)))  # frozen parameter
    x = leaf(rng.normal(size=(4, 8)))
    with Graph(meter=meter):
        ad.matmul(x, w)
    assert meter.peak_activation_elems == 0


def test_recording_is_deterministic(rng):
    data = rng.normal(size=(6, 5))
    wdata = rng.normal(size=(5, 5))

    def run():
        x, w = leaf(data), leaf(wdata)
        with Graph():
            y = ad.mean(ad.gelu(ad.layernorm(ad.matmul(x, w))))
        g = backward(y)
        return y.data.copy(), g[x], g[w]

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# ---- randomized VJP checks, one per primitive

UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(t * t + 1.0),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "gelu": ad.gelu,
    "softplus": ad.softplus,
    "softmax": lambda t: ad.softmax(t, axis=-1),
    "softmax0": lambda t: ad.softmax(t, axis=0),
    "layernorm": ad.layernorm,
    "mean": lambda t: ad.mean(t, axis=-1),
    "max": lambda t: ad.max_(t, axis=0),
    "logsumexp": lambda t: ad.logsumexp(t, axis=-1),
    "transpose": lambda t: t.T,
    "permute": lambda t: t.permute(1, 0),
    "reshape": lambda t: t.reshape(-1),
    "slice": lambda t: t[1:, ::2],
    "gather": lambda t: t[np.array([0, 0, 1])],
    "broadcast": lambda t: ad.broadcast_to(t, (2,) + t.shape),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=8, deadline=None)
@given(rows=st.integers(2, 4), cols=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_unary_vjp_matches_finite_differences(name, rows, cols, seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(rows, cols)))
    weights = None
    op = UNARY[name]

    def f():
        nonlocal weights
        y = op(x)
        if weights is None:
            weights = r.normal(size=y.shape)
        return ad.sum_(y * Tensor(weights))

    with Graph():
        out = f()
    analytic = backward(out)[x]
    (numeric,) = numeric_grad(f, [x.data], eps=1e-5)
    err = np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-12)
    assert err < 1e-3


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "matmul": lambda a, b: ad.matmul(a, b.T),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "broadcast_add": lambda a, b: ad.add(a, b[0]),
    "layernorm_affine": lambda a, b: ad.layernorm(a, b[0], b[1]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=8, deadline=None)
@given(rows=st.integers(2, 4), cols=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_binary_vjp_matches_finite_differences(name, rows, cols, seed):
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(rows, cols)))
    b = leaf(r.normal(size=(rows, cols)))
    op = BINARY[name]
    weights = None

    def f():
        nonlocal weights
        y = op(a, b)
        if weights is None:
            weights = r.normal(size=y.shape)
        return ad.sum_(y * Tensor(weights))

    with Graph():
        out = f()
    grads = backward(out)
    numeric = numeric_grad(f, [a.data, b.data], eps=1e-5)
    for t, num in zip((a, b), numeric):
        err = np.max(np.abs(grads[t] - num)) / (np.max(np.abs(num)) + 1e-12)
        assert err < 1e-3


def test_batched_matmul_vjp(rng):
    a = leaf(rng.normal(size=(2, 3, 4, 5)))
    b = leaf(rng.normal(size=(5, 2)))
    w = rng.normal(size=(2, 3, 4, 2))
    f = lambda: ad.sum_(ad.matmul(a, b) * Tensor(w))  # noqa: E731
    with Graph():
        out = f()
    grads = backward(out)
    na, nb = numeric_grad(f, [a.data, b.data])
    np.testing.assert_allclose(grads[a], na, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grads[b], nb, rtol=1e-6, atol=1e-8)
