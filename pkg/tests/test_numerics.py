import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relevprune import numerics as nx
from relevprune.numerics import Graph, Tensor, backward

from conftest import numeric_grad, rel_err


def _check_primitive(build, arrays, rng, tol=1e-3):
    """build(*tensors) -> Tensor; compare analytic vs central-difference grads
    of a random projection of the output w.r.t. every float input."""
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float((build(*[Tensor(a, np.float64) for a in arrs]).data * proj).sum())

    ts = [Tensor(a) for a in arrays]
    with Graph() as g:
        out = build(*ts)
        s = nx.total(nx.mul(out, Tensor(proj)))
    grads = backward(g, s)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            arrs = list(arrays)
            arrs[i] = x
            return scalar(*arrs)
        fd = numeric_grad(f, a)
        err = rel_err(grads[ts[i].id], fd)
        assert err < tol, (i, err)


def _interior(rng, shape):
    p = 0.05 + rng.random(shape)
    return p / p.sum(axis=-1, keepdims=True)


PRIMITIVES = {
    "matmul": (lambda a, b: nx.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "batched_matmul": (lambda a, b: nx.matmul(a, b),
                       lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))]),
    "add": (lambda a, b: nx.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": (lambda a, b: nx.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "add_bias": (lambda a, b: nx.add_bias(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=4)]),
    "softmax": (lambda a: nx.softmax(a), lambda r: [r.normal(size=(3, 5))]),
    "masked_softmax": (lambda a: nx.softmax(a, np.tril(np.ones((4, 4), bool))),
                       lambda r: [r.normal(size=(2, 4, 4))]),
    "log_softmax": (lambda a: nx.log_softmax(a), lambda r: [r.normal(size=(3, 5))]),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b),
                   lambda r: [r.normal(size=(3, 6)), 1 + 0.1 * r.normal(size=6), r.normal(size=6)]),
    "gelu": (lambda a: nx.gelu(a), lambda r: [r.normal(size=(4, 3))]),
    # keep entries away from the kink
    "relu": (lambda a: nx.relu(a),
             lambda r: [np.sign(r.normal(size=(4, 3))) * (0.05 + r.random((4, 3)))]),
    "embedding": (lambda t: nx.embedding(t, np.array([[0, 2], [2, 1]])), lambda r: [r.normal(size=(3, 4))]),
    "depthwise_conv1d": (lambda x, w, b: nx.depthwise_conv1d(x, w, b),
                         lambda r: [r.normal(size=(2, 3, 5)), r.normal(size=(3, 3)), r.normal(size=3)]),
    "pointwise_conv1d": (lambda x, w, b: nx.pointwise_conv1d(x, w, b),
                         lambda r: [r.normal(size=(2, 3, 5)), r.normal(size=(3, 4)), r.normal(size=4)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.array([1, 0, 3])), lambda r: [r.normal(size=(3, 5))]),
    "kl_div": (lambda p, q: nx.kl_div(p, q),
               # interior of the simplex: FD steps must not cross p = 0
               lambda r: [_interior(r, (2, 5)), _interior(r, (2, 5))]),
    "kl_div_log": (lambda lq: nx.kl_div_log(np.array([[0.0, 0.5, 0.5], [0.2, 0.3, 0.5]]), lq),
                   lambda r: [np.log(r.dirichlet(np.ones(3), size=2))]),
    "reshape_transpose_index": (
        lambda a: nx.index(nx.transpose(nx.reshape(a, (2, 3, 2)), (2, 0, 1)), (slice(None), 1)),
        lambda r: [r.normal(size=(3, 4))]),
    "scale_sub_mean": (lambda a, b: nx.mean(nx.scale(nx.sub(a, b), 3.0)),
                       lambda r: [r.normal(size=(2, 2)), r.normal(size=(2, 2))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, make = PRIMITIVES[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        _check_primitive(build, make(rng), rng)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    ws = [rng.normal(size=(4, 6)) * 0.5, rng.normal(size=(6, 6)) * 0.5, rng.normal(size=(6, 3)) * 0.5]
    bs = [rng.normal(size=6), rng.normal(size=6), rng.normal(size=3)]
    y = np.array([0, 2, 1, 1, 0])

    def loss(params):
        h = Tensor(x, params[0].data.dtype)
        for i in range(3):
            h = nx.add_bias(nx.matmul(h, params[2 * i]), params[2 * i + 1])
            if i < 2:
                h = nx.gelu(h)
        return nx.cross_entropy(h, y)

    arrays = [a for pair in zip(ws, bs) for a in pair]
    ts = [Tensor(a) for a in arrays]
    with Graph() as g:
        out = loss(ts)
    grads = backward(g, out)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            ps = [Tensor(b, np.float64) for b in arrays]
            ps[i] = Tensor(v, np.float64)
            return loss(ps).item()
        assert rel_err(grads[ts[i].id], numeric_grad(f, a)) < 1e-3


def test_trivial_values():
    x = np.random.default_rng(1).normal(size=(3, 3))
    assert np.allclose(nx.matmul(Tensor(np.eye(3)), Tensor(x)).data, x.astype(np.float32))
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    p = Tensor([[0.2, 0.3, 0.5]])
    assert nx.kl_div(p, p).item() == 0.0


def test_square_derivative():
    x = Tensor([3.0])
    with Graph() as g:
        y = nx.mul(x, x)
    assert backward(g, y)[x.id][0] == 6.0


def test_sum_of_softmax_has_zero_gradient():
    v = Tensor(np.random.default_rng(2).normal(size=(1, 6)))
    with Graph() as g:
        s = nx.total(nx.softmax(v))
    assert np.allclose(backward(g, s)[v.id], 0.0, atol=1e-7)


def test_backward_errors_and_unreached_zero():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0])
    with Graph() as g:
        vec = nx.scale(a, 2.0)
        s = nx.total(vec)
        other = nx.scale(b, 2.0)
    with pytest.raises(nx.ShapeError):
        backward(g, vec)
    grads = backward(g, s)
    assert np.array_equal(grads[other.id], [0.0]) and np.array_equal(grads[b.id], [0.0])
    with pytest.raises(nx.GraphError):
        backward(g, s)


def test_shape_and_finiteness_errors():
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nx.NonFiniteError):
        nx.kl_div(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0]]))
    with pytest.raises(nx.NonFiniteError), np.errstate(over="ignore"):
        nx.mul(Tensor([3e38]), Tensor([10.0]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    p = nx.softmax(Tensor(x)).data
    assert (p >= 0).all()
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_only_on_equality(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(n))
    assert nx.kl_div(Tensor([p]), Tensor([q])).item() >= 0
    assert nx.kl_div(Tensor([p]), Tensor([p])).item() == 0
    if np.abs(p.astype(np.float32) - q.astype(np.float32)).max() > 1e-3:
        assert nx.kl_div(Tensor([p]), Tensor([q])).item() > 0


def test_backward_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(4, 4)))
        with Graph() as g:
            s = nx.total(nx.gelu(nx.matmul(nx.softmax(a), a)))
        return backward(g, s)[a.id]
    assert np.array_equal(run(), run())


def test_adam_zero_gradient_and_first_step():
    params = {"w": np.array([1.5], dtype=np.float32)}
    state = nx.AdamState.for_params(params)
    new, state = nx.adam_step(params, {"w": np.zeros(1, np.float32)}, state, lr=0.1)
    assert new["w"][0] == 1.5 and state.step == 1

    params = {"w": np.array([0.0], dtype=np.float32)}
    state = nx.AdamState.for_params(params)
    new, _ = nx.adam_step(params, {"w": np.ones(1, np.float32)}, state, lr=0.001)
    assert new["w"][0] == pytest.approx(-0.001, rel=1e-5)


def test_adam_converges_on_quadratic():
    params = {"w": np.array([0.0], dtype=np.float32)}
    state = nx.AdamState.for_params(params)
    for _ in range(500):
        w = Tensor(params["w"])
        with Graph() as g:
            d = nx.sub(w, Tensor([5.0]))
            f = nx.total(nx.mul(d, d))
        params, state = nx.adam_step(params, {"w": backward(g, f)[w.id]}, state, lr=0.1)
    assert abs(params["w"][0] - 5.0) < 0.01
    assert state.step == 500


def test_adam_shape_mismatch():
    params = {"w": np.zeros(2, np.float32)}
    with pytest.raises(nx.ShapeError):
        nx.adam_step(params, {"w": np.zeros(3, np.float32)}, nx.AdamState.for_params(params), 0.1)


def test_tensor_serialization_roundtrip():
    arr = np.random.default_rng(3).normal(size=(2, 3, 4)).astype(np.float32)
    buf = io.BytesIO()
    nx.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"TNSR" and len(raw) == 4 + 8 + 12 + arr.size * 4
    buf.seek(0)
    assert np.array_equal(nx.read_tensor(buf), arr)
    with pytest.raises(ValueError):
        nx.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))
