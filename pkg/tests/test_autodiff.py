"""Reverse-mode engine: every primitive against central finite differences,
plus the optimizer and schedule contracts."""

import numpy as np
import pytest

from rnrf import autodiff as ad
from rnrf.autodiff import GraphError, Tensor
from rnrf.errors import ParameterError
from rnrf.optim import Adam, ConstantLr, ExponentialDecay


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_square_scalar():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ad.square(x)
    ad.backward(y)
    assert x.grad == pytest.approx(6.0)


def test_sin_cos_at_origin():
    x = Tensor(np.array(0.0), requires_grad=True)
    y = Tensor(np.array(0.0), requires_grad=True)
    loss = ad.add(ad.sin(x), ad.cos(y))
    ad.backward(loss)
    assert x.grad == pytest.approx(1.0)
    assert y.grad == pytest.approx(0.0)


@pytest.mark.parametrize("op,dom", [
    (ad.relu, (-2, 2)),
    (ad.sigmoid, (-3, 3)),
    (ad.softplus, (-3, 3)),
    (ad.exp, (-1, 1)),
    (ad.sin, (-3, 3)),
    (ad.cos, (-3, 3)),
    (ad.square, (-2, 2)),
    (ad.neg, (-2, 2)),
])
def test_unary_ops_match_fd(op, dom):
    rng = np.random.default_rng(0)
    x0 = rng.uniform(*dom, size=(4, 3))
    # keep relu away from the kink
    if op is ad.relu:
        x0 = x0 + np.sign(x0) * 0.05

    def f(v):
        t = Tensor(v, requires_grad=True)
        out = ad.sum_(ad.mul(op(t), np.arange(1.0, 13.0).reshape(4, 3)))
        return t, out

    t, out = f(x0)
    ad.backward(out)
    g = fd_grad(lambda v: float(f(v)[1].data), x0)
    assert rel_err(t.grad, g) < 1e-6


def test_binary_and_broadcast_match_fd():
    rng = np.random.default_rng(1)
    a0 = rng.standard_normal((4, 3))
    b0 = rng.standard_normal((1, 3)) + 2.0  # broadcast + away from zero

    def f(av, bv):
        a = Tensor(av, requires_grad=True)
        b = Tensor(bv, requires_grad=True)
        out = ad.sum_(ad.div(ad.mul(a, b), ad.add(ad.square(b), 1.0)))
        return a, b, out

    a, b, out = f(a0, b0)
    ad.backward(out)
    ga = fd_grad(lambda v: float(f(v, b0)[2].data), a0)
    gb = fd_grad(lambda v: float(f(a0, v)[2].data), b0)
    assert rel_err(a.grad, ga) < 1e-6
    assert rel_err(b.grad, gb) < 1e-6


def test_affine_variants_match_fd():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((5, 4))
    w0 = rng.standard_normal((4, 3))
    b0 = rng.standard_normal(3)
    x1 = rng.standard_normal((5, 2))
    w1 = rng.standard_normal((2, 3))
    proj = rng.standard_normal((5, 3))

    def f(xv, wv, bv, x1v, w1v, fused):
        x = Tensor(xv, requires_grad=True)
        w = Tensor(wv, requires_grad=True)
        b = Tensor(bv, requires_grad=True)
        xx = Tensor(x1v, requires_grad=True)
        ww = Tensor(w1v, requires_grad=True)
        if fused:
            h = ad.affine_multi_relu([x, xx], [w, ww], b)
        else:
            h = ad.relu(ad.affine_multi([x, xx], [w, ww], b))
        out = ad.sum_(ad.mul(h, proj))
        return (x, w, b, xx, ww), out

    for fused in (False, True):
        tensors, out = f(x0, w0, b0, x1, w1, fused)
        ad.backward(out)
        for i, (val, name) in enumerate(zip((x0, w0, b0, x1, w1), "xwbXW")):
            args = [x0, w0, b0, x1, w1]

            def scalar(v, i=i):
                a = list(args)
                a[i] = v
                return float(f(*a, fused)[1].data)

            g = fd_grad(scalar, val.copy())
            assert rel_err(tensors[i].grad, g) < 1e-6, f"{name} fused={fused}"


def test_affine_relu_matches_plain():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    fused = ad.affine_relu(Tensor(x), w, b)
    plain = ad.relu(ad.affine(Tensor(x), w, b))
    assert np.array_equal(fused.data, plain.data)


def test_broadcast_row_through_affine_multi():
    # a single code row shared across the batch gets a summed gradient
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((7, 3)))
    code = Tensor(rng.standard_normal((1, 2)), requires_grad=True)
    w0 = Tensor(rng.standard_normal((3, 4)))
    w1 = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    b = Tensor(np.zeros(4))
    out = ad.sum_(ad.affine_multi([x, code], [w0, w1], b))
    ad.backward(out)
    assert code.grad.shape == (1, 2)
    gc = fd_grad(
        lambda v: float(ad.sum_(ad.affine_multi([x, Tensor(v)], [w0, w1], b)).data),
        code.data.copy(),
    )
    assert rel_err(code.grad, gc) < 1e-6


def test_reductions_and_cumsum_match_fd():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((3, 6))

    def f(v):
        t = Tensor(v, requires_grad=True)
        cs = ad.cumsum_exclusive(ad.square(t), axis=1)
        out = ad.sum_(ad.mul(ad.exp(ad.neg(cs)), ad.sigmoid(t)))
        return t, out

    t, out = f(x0)
    ad.backward(out)
    g = fd_grad(lambda v: float(f(v)[1].data), x0)
    assert rel_err(t.grad, g) < 1e-6


def test_cumsum_exclusive_values():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = ad.cumsum_exclusive(x, axis=1)
    assert np.array_equal(out.data, [[0.0, 1.0, 3.0]])


def test_concat_gather_reshape_match_fd():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((4, 2))
    t0 = rng.standard_normal((5, 3))
    idx = np.array([0, 4, 4, 2])

    def f(xv, tv):
        x = Tensor(xv, requires_grad=True)
        tab = Tensor(tv, requires_grad=True)
        cat = ad.concat([x, ad.gather_rows(tab, idx)], axis=1)
        out = ad.sum_(ad.square(ad.reshape(cat, (2, 10))))
        return x, tab, out

    x, tab, out = f(x0, t0)
    ad.backward(out)
    gx = fd_grad(lambda v: float(f(v, t0)[2].data), x0)
    gt = fd_grad(lambda v: float(f(x0, v)[2].data), t0)
    assert rel_err(x.grad, gx) < 1e-6
    assert rel_err(tab.grad, gt) < 1e-6


def test_two_layer_mlp_grads_vs_central_differences():
    # the spec-level oracle: h = 1e-4, relative error <= 1e-4
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((8, 5))
    w1 = rng.standard_normal((5, 7))
    b1 = rng.standard_normal(7)
    w2 = rng.standard_normal((7, 2))
    b2 = rng.standard_normal(2)
    params = [w1, b1, w2, b2]

    def run(ps, xv):
        t = [Tensor(p, requires_grad=True) for p in ps]
        x = Tensor(xv, requires_grad=True)
        h = ad.relu(ad.affine(x, t[0], t[1]))
        y = ad.affine(h, t[2], t[3])
        return t, x, ad.mean(ad.square(y))

    tensors, x, loss = run(params, x0)
    ad.backward(loss)
    for i, p in enumerate(params):
        def scalar(v, i=i):
            ps = [q.copy() for q in params]
            ps[i] = v
            return float(run(ps, x0)[2].data)

        g = fd_grad(scalar, p.copy(), h=1e-4)
        assert rel_err(tensors[i].grad, g) <= 1e-4
    gx = fd_grad(lambda v: float(run(params, v)[2].data), x0.copy(), h=1e-4)
    assert rel_err(x.grad, gx) <= 1e-4


def test_gradient_linearity_on_random_graphs():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((3, 3))

    def build(v):
        t = Tensor(v, requires_grad=True)
        f = ad.sum_(ad.sin(t))
        g = ad.sum_(ad.mul(t, t))
        return t, f, g

    t1, f, _ = build(x0)
    ad.backward(f)
    gf = t1.grad.copy()
    t2, _, g = build(x0)
    ad.backward(g)
    gg = t2.grad.copy()
    t3, f3, g3 = build(x0)
    ad.backward(ad.add(f3, g3))
    assert np.allclose(t3.grad, gf + gg, atol=1e-12)


def test_grad_accumulation_doubles():
    x = Tensor(np.arange(4.0), requires_grad=True)
    loss = ad.sum_(ad.square(x))
    ad.backward(loss)
    g1 = x.grad.copy()
    ad.backward(loss)
    assert np.array_equal(x.grad, 2 * g1)


def test_forward_determinism():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((64, 8)).astype(np.float32)
    w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
    outs = [ad.softplus(ad.sin(ad.matmul(Tensor(x), w))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


def test_backward_errors():
    with pytest.raises(GraphError):
        ad.backward(Tensor(np.zeros(3), requires_grad=True))  # detached
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.square(x)
    with pytest.raises(GraphError):
        ad.backward(y)  # non-scalar


def test_no_grad_suppresses_taping():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(ad.square(x))
    assert y.node is None and not y.requires_grad


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], ConstantLr(0.1))
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_first_step_hand_computed():
    # bias-corrected first step: update == lr * g / (|g| + eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = Adam([p], ConstantLr(0.1))
    opt.step()
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_zero_lr_leaves_params():
    rng = np.random.default_rng(9)
    p = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], ConstantLr(0.0))
    p.grad = rng.standard_normal(5).astype(np.float32)
    opt.step()
    assert np.abs(p.data - before).max() <= 1e-12


def test_lr_schedule_endpoints():
    sched = ExponentialDecay(5e-4, 5e-5, 20000)
    assert abs(sched(0) - 5e-4) < 1e-12
    assert abs(sched(20000) - 5e-5) < 1e-12
    assert sched(10000) == pytest.approx(np.sqrt(5e-4 * 5e-5), rel=1e-9)


def test_schedule_validation():
    with pytest.raises(ParameterError):
        ExponentialDecay(0.0, 1e-5, 10)
