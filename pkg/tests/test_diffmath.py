import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detailsdf import diffmath as dm


def fd_grad(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_product_rule():
    x, y = dm.param(2.0), dm.param(3.0)
    g = dm.backward(x * y, [x, y])
    assert g[x] == pytest.approx(3.0)
    assert g[y] == pytest.approx(2.0)


def test_nested_gradient_of_squared_derivative():
    x = dm.param(1.0)
    f = x * x
    dfdx = dm.input_gradient(f, x)
    loss = (dfdx * dfdx).sum()
    assert dfdx.item() == pytest.approx(2.0)
    assert loss.item() == pytest.approx(4.0)
    (g,) = dm.grad(loss, [x])
    assert g.item() == pytest.approx(8.0)


def test_normal_of_norm_and_constant():
    x = dm.param(np.array([[0.0, 0.0, 2.0]]))
    n = dm.input_gradient(dm.norm_rows(x).sum(), x)
    np.testing.assert_allclose(n.data, [[0, 0, 1]], atol=1e-15)
    c = (x * 0.0).sum() + 5.0
    np.testing.assert_array_equal(dm.input_gradient(c, x).data, np.zeros((1, 3)))


def _mlp(rng, sizes):
    return [(dm.param(rng.normal(size=(a, b)) / np.sqrt(a)), dm.param(rng.normal(size=(1, b)))) for a, b in zip(sizes, sizes[1:])]


def _forward(layers, x):
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = dm.softplus(h, 3.0)
    return h


def test_mlp_parameter_gradients_match_fd():
    rng = np.random.default_rng(0)
    layers = _mlp(rng, [3, 8, 8, 1])
    x = rng.normal(size=(5, 3))
    params = [p for l in layers for p in l]
    g = dm.backward(_forward(layers, dm.const(x)).sum(), params)
    for p in params:
        def fn(v, p=p):
            old = p.data
            p.data = v
            out = _forward(layers, dm.const(x)).sum().item()
            p.data = old
            return out
        assert rel_err(g[p], fd_grad(fn, p.data.copy())) < 1e-4


def test_mlp_input_gradient_and_second_order_match_fd():
    rng = np.random.default_rng(1)
    layers = _mlp(rng, [3, 8, 8, 1])
    x0 = rng.normal(size=(4, 3))
    x = dm.param(x0)
    n = dm.input_gradient(_forward(layers, x).sum(), x)
    fd = fd_grad(lambda v: _forward(layers, dm.const(v)).sum().item(), x0.copy())
    assert rel_err(n.data, fd) < 1e-4

    W = layers[0][0]

    def eik(v):
        old = W.data
        W.data = v
        xi = dm.param(x0)
        nn = dm.input_gradient(_forward(layers, xi).sum(), xi, create_graph=False)
        W.data = old
        return float(np.sum((np.linalg.norm(nn.data, axis=1) - 1) ** 2))

    loss = ((dm.norm_rows(n) - 1.0) ** 2).sum()
    (g,) = dm.grad(loss, [W])
    assert rel_err(g.data, fd_grad(eik, W.data.copy())) < 1e-4


@pytest.mark.parametrize(
    "op",
    [dm.exp, dm.sin, dm.cos, dm.sigmoid, lambda v: dm.softplus(v, 100.0), dm.absolute, lambda v: dm.sqrt(v * v + 1.0)],
)
def test_unary_ops_first_and_second_derivatives(op):
    x0 = np.array([[-0.7, 0.2, 1.3]])
    x = dm.param(x0)
    d1 = dm.input_gradient(op(x).sum(), x)
    fd1 = fd_grad(lambda v: op(dm.const(v)).sum().item(), x0.copy())
    assert rel_err(d1.data, fd1) < 1e-5
    d2 = dm.input_gradient(d1.sum(), x)
    fd2 = fd_grad(lambda v: _d1(op, v), x0.copy())
    assert rel_err(d2.data, fd2) < 1e-4


def _d1(op, v):
    x = dm.param(v)
    return dm.input_gradient(op(x).sum(), x, create_graph=False).data.sum()


def test_broadcast_and_reductions():
    a = dm.param(np.ones((3, 1)))
    b = dm.param(np.arange(4.0).reshape(1, 4))
    g = dm.backward((a * b).mean(), [a, b])
    np.testing.assert_allclose(g[a], np.full((3, 1), 6.0 / 12))
    np.testing.assert_allclose(g[b], np.full((1, 4), 3.0 / 12))


def test_concat_and_slices_route_gradients():
    a, b = dm.param(np.ones((2, 2))), dm.param(np.ones((2, 3)))
    c = dm.concat([a, b], axis=1)
    w = np.arange(10.0).reshape(2, 5)
    g = dm.backward((c * w).sum(), [a, b])
    np.testing.assert_array_equal(g[a], w[:, :2])
    np.testing.assert_array_equal(g[b], w[:, 2:])
    g2 = dm.backward((dm.take_cols(c, 1, 3) * 2.0).sum(), [a, b])
    np.testing.assert_array_equal(g2[a], [[0, 2], [0, 2]])
    np.testing.assert_array_equal(g2[b], [[2, 0, 0], [2, 0, 0]])


def test_unreachable_input_gets_zero_and_nonscalar_raises():
    x, y = dm.param(np.ones(3)), dm.param(np.ones(2))
    g = dm.backward((x * 2.0).sum(), [x, y])
    np.testing.assert_array_equal(g[y], np.zeros(2))
    with pytest.raises(dm.GraphError):
        dm.grad(x * 2.0, [x])


def test_no_grad_records_nothing():
    x = dm.param(2.0)
    with dm.no_grad():
        y = x * x
    assert not y.requires_grad and not y.parents


# -- optimizer ------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = dm.param(np.array([1.0]))
    opt = dm.Adam([p], lr=1e-4)
    opt.step({p: np.array([4.0])})
    assert p.data[0] - 1.0 == pytest.approx(-1e-4, rel=1e-6)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(1, 20))
@settings(max_examples=30, deadline=None)
def test_adam_zero_gradient_leaves_params_unchanged(vals, steps):
    p = dm.param(np.array(vals))
    before = p.data.copy()
    opt = dm.Adam([p], lr=0.1)
    for _ in range(steps):
        opt.step([np.zeros_like(before)])
    np.testing.assert_array_equal(p.data, before)


def test_adam_converges_on_quadratic():
    p = dm.param(np.array([0.0]))
    opt = dm.Adam([p], lr=0.1)
    gaps = []
    for _ in range(100):
        opt.step([p.data - 5.0])
        gaps.append(abs(p.data[0] - 5.0))
    tail = gaps[40:]
    assert gaps[-1] < gaps[0]
    assert gaps[-1] < 0.5
    # after burn-in the gap envelope keeps shrinking
    assert max(tail[len(tail) // 2 :]) <= max(tail[: len(tail) // 2])


def test_adam_rejects_shape_mismatch():
    p = dm.param(np.zeros(3))
    with pytest.raises(ValueError):
        dm.Adam([p]).step([np.zeros(2)])


def test_functional_adam_matches_class():
    p = dm.param(np.array([1.0, -2.0]))
    opt = dm.Adam([p], lr=0.01)
    state = dm.AdamState(lr=0.01)
    q = [np.array([1.0, -2.0])]
    for k in range(5):
        g = np.array([0.3 * k - 1.0, 2.0])
        opt.step([g])
        q = dm.adam_step(state, [g], q)
    np.testing.assert_allclose(p.data, q[0], rtol=0, atol=1e-15)


# -- checkpoints and rng ----------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    dm.save_checkpoint(tmp_path / "c.ckpt", arrays, {"k": 1})
    back, meta = dm.load_checkpoint(tmp_path / "c.ckpt")
    assert meta["k"] == 1
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_bytes_deterministic(tmp_path):
    arrays = {"w": np.linspace(0, 1, 7)}
    dm.save_checkpoint(tmp_path / "1", arrays, {"x": [1, 2]})
    dm.save_checkpoint(tmp_path / "2", arrays, {"x": [1, 2]})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint at all")
    with pytest.raises(dm.CheckpointError):
        dm.load_checkpoint(tmp_path / "bad")


def test_rng_streams_reproducible():
    a = dm.make_rng(7).normal(size=5)
    b = dm.make_rng(7).normal(size=5)
    np.testing.assert_array_equal(a, b)
    s1, s2 = dm.split(7, 2)
    assert not np.array_equal(s1.normal(size=5), s2.normal(size=5))
