import numpy as np
import pytest

import sdfrecon.autodiff as ad


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_unary(op, x, **kw):
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = op(t, **kw)
    seed = np.cos(np.arange(out.data.size)).reshape(out.data.shape)
    out.backward(seed)

    def f():
        return float(np.sum(op(ad.Tensor(x), **kw).data * seed))

    fd = fd_grad(f, x)
    np.testing.assert_allclose(t.grad, fd, rtol=2e-5, atol=1e-7)


@pytest.mark.parametrize(
    "op,kw,domain",
    [
        (ad.exp, {}, (-2, 2)),
        (ad.expm1, {}, (-2, 2)),
        (ad.log, {}, (0.5, 3)),
        (ad.sqrt, {}, (0.5, 3)),
        (ad.absolute, {}, (0.2, 2)),
        (ad.relu, {}, (0.2, 2)),
        (ad.sigmoid, {}, (-3, 3)),
        (ad.softplus, {"sharpness": 7.0}, (-2, 2)),
        (ad.clip_max, {"cap": 0.7}, (-1, 0.5)),
        (ad.exclusive_cumsum, {"axis": -1}, (-1, 1)),
    ],
)
def test_unary_ops_match_fd(op, kw, domain, rng):
    x = rng.uniform(*domain, size=(3, 5))
    check_unary(op, x, **kw)


def test_softplus_and_gate_match_separate(rng):
    x = rng.normal(size=(4, 6))
    t = ad.Tensor(x, requires_grad=True)
    y, gate = ad.softplus_and_gate(t, 11.0)
    np.testing.assert_allclose(y.data, ad.softplus(ad.Tensor(x), 11.0).data, rtol=1e-12)
    np.testing.assert_allclose(gate.data, ad.sigmoid(ad.Tensor(11.0 * x)).data, rtol=1e-12)
    loss = ad.sum_(ad.mul(y, gate))
    loss.backward()

    def f():
        yy, gg = ad.softplus_and_gate(ad.Tensor(x), 11.0)
        return float(ad.sum_(ad.mul(yy, gg)).data)

    np.testing.assert_allclose(t.grad, fd_grad(f, x), rtol=1e-5, atol=1e-8)


def test_binary_broadcasting_grads(rng):
    a = rng.normal(size=(4, 1, 3))
    b = rng.normal(size=(5, 3)) + 3.0
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    out = ad.div(ad.mul(ad.add(ta, tb), ad.sub(ta, 0.5)), tb)
    seed = np.sin(np.arange(out.data.size)).reshape(out.data.shape)
    out.backward(seed)

    def f():
        o = ad.div(ad.mul(ad.add(ad.Tensor(a), ad.Tensor(b)), ad.sub(ad.Tensor(a), 0.5)), ad.Tensor(b))
        return float(np.sum(o.data * seed))

    np.testing.assert_allclose(ta.grad, fd_grad(f, a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(tb.grad, fd_grad(f, b), rtol=1e-6, atol=1e-9)


def test_matmul_reshape_transpose_concat(rng):
    a = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 3))
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tw = ad.Tensor(w.copy(), requires_grad=True)
    h = ad.matmul(ta, tw)
    h2 = ad.transpose(ad.reshape(h, (2, 3, 3)), (1, 0, 2))
    out = ad.concat([h2, ad.mul(h2, 2.0)], axis=-1)
    seed = np.cos(np.arange(out.data.size)).reshape(out.data.shape)
    out.backward(seed)

    def f():
        hh = ad.matmul(ad.Tensor(a), ad.Tensor(w))
        hh2 = ad.transpose(ad.reshape(hh, (2, 3, 3)), (1, 0, 2))
        oo = ad.concat([hh2, ad.mul(hh2, 2.0)], axis=-1)
        return float(np.sum(oo.data * seed))

    np.testing.assert_allclose(ta.grad, fd_grad(f, a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(tw.grad, fd_grad(f, w), rtol=1e-6, atol=1e-9)


def test_take_repeated_indices_accumulate():
    x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    idx = np.array([0, 0, 2])
    out = ad.take(x, idx)
    out.backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_take_unique_flag_matches_slow_path(rng):
    x = rng.normal(size=(5, 4))
    rows = np.arange(5)
    cols = rng.integers(0, 4, size=5)
    for unique in (True, False):
        t = ad.Tensor(x.copy(), requires_grad=True)
        out = ad.take(t, (rows, cols), unique=unique)
        out.backward(np.ones(5))
        expect = np.zeros_like(x)
        expect[rows, cols] = 1.0
        np.testing.assert_array_equal(t.grad, expect)


def test_amin_routes_gradient_to_first_argmin():
    x = ad.Tensor(np.array([[1.0, 1.0, 2.0], [3.0, 0.5, 0.5]]), requires_grad=True)
    out = ad.amin(x, axis=1)
    out.backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [[1, 0, 0], [0, 1, 0]])


def test_multiple_consumers_accumulate(rng):
    x = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = ad.add(x, 1.0)
    z = ad.add(ad.mul(y, 2.0), ad.mul(y, 3.0))
    ad.sum_(z).backward()
    np.testing.assert_allclose(x.grad, np.full(3, 5.0))


def test_shared_buffer_not_corrupted_by_second_consumer(rng):
    # add passes its upstream gradient through to both parents; a later
    # accumulation into one parent must not leak into the other
    x = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
    y = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
    s = ad.add(x, y)
    extra = ad.mul(x, 10.0)
    total = ad.sum_(ad.add(s, extra))
    total.backward()
    np.testing.assert_allclose(x.grad, np.full(4, 11.0))
    np.testing.assert_allclose(y.grad, np.full(4, 1.0))


def test_no_grad_context(rng):
    with ad.no_grad():
        t = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
        out = ad.mul(t, 2.0)
    assert not out.requires_grad and out._backward is None


def test_gather_blend_matches_dense_formula(rng):
    table = rng.normal(size=(32, 2))
    idx = rng.integers(0, 32, size=(10, 8))
    w = rng.normal(size=(10, 8, 4))
    t = ad.Tensor(table.copy(), requires_grad=True)
    out = ad.gather_blend(t, idx, w)
    expect = np.einsum("ncj,ncf->njf", w, table[idx])
    np.testing.assert_allclose(out.data, expect, rtol=1e-12)
    seed = rng.normal(size=out.data.shape)
    out.backward(seed)

    def f():
        return float(np.sum(ad.gather_blend(ad.Tensor(table), idx, w).data * seed))

    np.testing.assert_allclose(t.grad, fd_grad(f, table), rtol=1e-5, atol=1e-8)
