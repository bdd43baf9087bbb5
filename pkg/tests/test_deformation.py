"""Encoding window, prior deformation field, residual network, and the
combined map to canonical space."""

import numpy as np
import pytest

from conftest import single_triangle_model
from rnrf import autodiff as ad
from rnrf.autodiff import Tensor
from rnrf.deformation import (
    DeformContext,
    EncoderConfig,
    ResidualConfig,
    ResidualMLP,
    deform_points,
    deform_to_canonical,
    encode,
    mmdef_field,
    mmdef_vertex,
)
from rnrf.errors import ParameterError
from rnrf.headmodel import HeadParams, build_accel, closest_point, pose_mesh
from rnrf.synth import make_head_model


# ---------------------------------------------------------------------------
# positional encoding


def test_encode_no_bands_is_identity():
    x = np.array([0.3, -0.2, 0.7])
    out = encode(x, EncoderConfig(num_bands=0))
    assert np.array_equal(out, x)


def test_encode_at_zero():
    out = encode(np.zeros(3), EncoderConfig(num_bands=2))
    expected = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1], dtype=np.float64)
    assert np.array_equal(out, expected)


def test_encode_closed_window_zeroes_bands():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(3)
    out = encode(x, EncoderConfig(num_bands=4, window_alpha=0.0))
    assert np.array_equal(out[3:], np.zeros(24))
    assert np.allclose(out[:3], x)


def test_encode_output_dim():
    cfg = EncoderConfig(num_bands=10)
    assert cfg.output_dim(3) == 63
    x = np.random.default_rng(1).standard_normal((5, 3))
    assert encode(x, cfg).shape == (5, 63)


def test_encode_matches_direct_evaluation():
    rng = np.random.default_rng(2)
    x = rng.uniform(-3, 3, (4, 3))
    out = encode(x, EncoderConfig(num_bands=10))
    parts = [x]
    for j in range(10):
        parts += [np.sin(2.0 ** j * x), np.cos(2.0 ** j * x)]
    ref = np.concatenate(parts, axis=1)
    assert np.abs(out - ref).max() < 1e-12


def test_encode_window_weights():
    cfg = EncoderConfig(num_bands=3, window_alpha=1.5)
    w = cfg.band_weights()
    assert w[0] == pytest.approx(1.0)
    assert w[1] == pytest.approx((1 - np.cos(np.pi * 0.5)) / 2)
    assert w[2] == pytest.approx(0.0)
    x = np.array([[0.4, -0.1, 0.9]])
    out = encode(x, cfg)
    full = encode(x, EncoderConfig(num_bands=3))
    assert np.allclose(out[0, 3:9], full[0, 3:9] * w[0], atol=1e-12)
    assert np.allclose(out[0, 9:15], full[0, 9:15] * w[1], atol=1e-12)
    assert np.array_equal(out[0, 15:21], np.zeros(6))


def test_encode_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-2, 2, (3, 3))
    proj = rng.standard_normal((3, 27))
    cfg = EncoderConfig(num_bands=4, window_alpha=2.3)

    def f(v):
        t = Tensor(v, requires_grad=True)
        return t, ad.sum_(ad.mul(encode(t, cfg), proj))

    t, out = f(x0)
    ad.backward(out)
    g = np.zeros_like(x0)
    h = 1e-6
    for i in np.ndindex(*x0.shape):
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        g[i] = (float(f(xp)[1].data) - float(f(xm)[1].data)) / (2 * h)
    assert np.abs(t.grad - g).max() / np.abs(g).max() < 1e-6


# ---------------------------------------------------------------------------
# prior field


@pytest.fixture(scope="module")
def head():
    return make_head_model(num_exp=4, subdivisions=1, seed=5)


def test_surface_deformation_zero_at_identity(head):
    params = HeadParams.zeros(head.num_exp)
    posed = pose_mesh(head, params)
    accel = build_accel(posed)
    rng = np.random.default_rng(0)
    for q in rng.uniform(-1.5, 1.5, (20, 3)):
        cp = closest_point(accel, q)
        assert np.array_equal(mmdef_vertex(head, posed, cp, params), np.zeros(3))


def test_surface_deformation_pure_translation(head):
    t = np.array([0.2, -0.1, 0.35])
    params = HeadParams(beta_exp=np.zeros(head.num_exp), translation=t)
    posed = pose_mesh(head, params)
    accel = build_accel(posed)
    rng = np.random.default_rng(1)
    for q in rng.uniform(-1.5, 1.5, (20, 3)):
        cp = closest_point(accel, q)
        assert np.allclose(mmdef_vertex(head, posed, cp, params), -t, atol=1e-12)


def test_surface_deformation_rotation_vertex_oracle(head):
    params = HeadParams(beta_exp=np.zeros(head.num_exp), rotation=np.array([0.2, 0.7, -0.1]))
    posed = pose_mesh(head, params)
    accel = build_accel(posed)
    rng = np.random.default_rng(2)
    for vid in rng.integers(0, posed.num_vertices, 12):
        cp = closest_point(accel, posed.vertices[vid])
        got = mmdef_vertex(head, posed, cp, params)
        want = head.template.vertices[vid] - posed.vertices[vid]
        assert np.allclose(got, want, atol=1e-9)


def test_field_zero_when_params_zero(head):
    params = HeadParams.zeros(head.num_exp)
    accel = build_accel(pose_mesh(head, params))
    rng = np.random.default_rng(3)
    for q in rng.uniform(-2, 2, (10, 3)):
        assert np.array_equal(mmdef_field(accel, head, params, q), np.zeros(3))


def test_field_on_surface_equals_vertex_value(head):
    params = HeadParams(beta_exp=np.array([0.5, -0.3, 0.2, 0.1]))
    posed = pose_mesh(head, params)
    accel = build_accel(posed)
    v = posed.vertices[37]
    cp = closest_point(accel, v)
    assert cp.distance == 0.0
    assert np.array_equal(mmdef_field(accel, head, params, v),
                          mmdef_vertex(head, posed, cp, params))


def test_field_decay_at_one_scale_length():
    # single triangle translated by t: any point straight above the face sits
    # at an exactly known distance, and the surface deformation is -t
    t = np.array([0.1, 0.2, -0.05])
    model = single_triangle_model(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    params = HeadParams(beta_exp=np.zeros(1), translation=t)
    posed = pose_mesh(model, params)
    accel = build_accel(posed)
    s = 0.7
    q = np.array([0.25, 0.25, 0.0]) + t + np.array([0.0, 0.0, s])
    got = mmdef_field(accel, model, params, q, scale=s)
    assert np.abs(got - (-t / np.e)).max() < 1e-9


def test_field_scale_must_be_positive(head):
    params = HeadParams.zeros(head.num_exp)
    accel = build_accel(pose_mesh(head, params))
    with pytest.raises(ParameterError):
        mmdef_field(accel, head, params, np.zeros(3), scale=0.0)


def test_field_continuity_near_surface(head):
    params = HeadParams(beta_exp=np.array([0.4, -0.6, 0.3, 0.0]), jaw=0.3)
    ctx = DeformContext.create(head, params)
    rng = np.random.default_rng(4)
    base = rng.uniform(-1.5, 1.5, (300, 3))
    base = base[np.linalg.norm(base, axis=1) > 1.1]  # avoid interior medial axis
    eps = 1e-4
    step = rng.standard_normal(base.shape)
    step /= np.linalg.norm(step, axis=1, keepdims=True)
    f0 = deform_points(ctx, base, np.zeros(8))["mmdef"]
    f1 = deform_points(ctx, base + eps * step, np.zeros(8))["mmdef"]
    lipschitz = np.linalg.norm(f1 - f0, axis=1) / eps
    assert lipschitz.max() < 50.0


# ---------------------------------------------------------------------------
# residual MLP


def test_zero_initialized_head_gives_zero_offset():
    rng = np.random.default_rng(0)
    cfg = ResidualConfig(depth=3, width=16, pos_bands=4, def_bands=2, code_dim=4)
    mlp = ResidualMLP(cfg, rng)
    x = rng.standard_normal((10, 3)).astype(np.float32)
    delta, feats = mlp.forward(
        encode(x, EncoderConfig(4)),
        encode(rng.standard_normal((10, 3)).astype(np.float32), EncoderConfig(2)),
        rng.standard_normal((10, 4)).astype(np.float32),
    )
    assert np.array_equal(delta.data, np.zeros((10, 3), dtype=np.float32))
    assert feats.data.shape == (10, 16)


def test_residual_determinism():
    rng = np.random.default_rng(1)
    cfg = ResidualConfig(depth=3, width=16, pos_bands=4, def_bands=2, code_dim=4)
    mlp = ResidualMLP(cfg, rng)
    mlp.w_delta.data = rng.standard_normal((16, 3)).astype(np.float32)
    args = (
        encode(rng.standard_normal((5, 3)).astype(np.float32), EncoderConfig(4)),
        encode(rng.standard_normal((5, 3)).astype(np.float32), EncoderConfig(2)),
        rng.standard_normal((5, 4)).astype(np.float32),
    )
    out1 = mlp.forward(*args)[0].data
    out2 = mlp.forward(*args)[0].data
    assert np.array_equal(out1, out2)


def test_residual_golden_forward():
    # frozen reference forward pass (float64, seed 2024)
    rng = np.random.default_rng(2024)
    cfg = ResidualConfig(depth=3, width=16, pos_bands=4, def_bands=2, code_dim=4)
    mlp = ResidualMLP(cfg, rng, dtype=np.float64)
    mlp.w_delta.data = rng.standard_normal((16, 3)) * 0.1
    delta, feats = mlp.forward(
        encode(np.array([[0.3, -0.2, 0.5]]), EncoderConfig(4)),
        encode(np.array([[0.05, -0.02, 0.01]]), EncoderConfig(2)),
        np.array([[0.1, -0.3, 0.2, 0.05]]),
    )
    assert np.allclose(
        delta.data[0],
        [-0.01050967940209292, -0.19855635912336117, 0.2659813394744707],
        atol=1e-12,
    )
    assert np.allclose(
        feats.data[0, ::5],
        [0.0, 0.0, 0.30167668444455603, 1.464779984542035],
        atol=1e-12,
    )


def test_residual_rejects_wrong_widths():
    rng = np.random.default_rng(2)
    cfg = ResidualConfig(depth=2, width=8, pos_bands=2, def_bands=1, code_dim=4)
    mlp = ResidualMLP(cfg, rng)
    with pytest.raises(ParameterError):
        mlp.forward(np.zeros((3, 15), np.float32), np.zeros((3, 4), np.float32),
                    np.zeros((3, 4), np.float32))


def test_residual_gradients_vs_central_differences():
    # reduced two-layer network, float64, h = 1e-4, relative error <= 1e-4
    rng = np.random.default_rng(7)
    cfg = ResidualConfig(depth=2, width=32, pos_bands=4, def_bands=2, code_dim=8)
    mlp = ResidualMLP(cfg, rng, dtype=np.float64)
    mlp.w_delta.data = rng.standard_normal((32, 3)) * 0.2
    n = 6
    x0 = rng.uniform(-1, 1, (n, 3))
    m0 = rng.uniform(-0.3, 0.3, (n, 3))
    om0 = rng.uniform(-0.5, 0.5, (n, 8))
    proj = rng.standard_normal((n, 3))

    def run(x, m, om):
        xt = Tensor(x, requires_grad=True)
        ot = Tensor(om, requires_grad=True)
        delta, _ = mlp.forward(
            encode(xt, EncoderConfig(4)), encode(m, EncoderConfig(2)), ot
        )
        return xt, ot, ad.sum_(ad.mul(delta, proj))

    xt, ot, loss = run(x0, m0, om0)
    ad.backward(loss)
    h = 1e-4

    def fd(getter, setter, ref):
        g = np.zeros_like(ref)
        for i in np.ndindex(*ref.shape):
            orig = ref[i]
            setter(i, orig + h)
            fp = float(run(x0, m0, om0)[2].data)
            setter(i, orig - h)
            fm = float(run(x0, m0, om0)[2].data)
            setter(i, orig)
            g[i] = (fp - fm) / (2 * h)
        return g

    checked = 0
    for name, tensor in mlp.parameters():
        ref = tensor.data

        def setter(i, v, ref=ref):
            ref[i] = v

        g = fd(None, setter, ref)
        if np.abs(g).max() == 0:
            continue
        err = np.abs(tensor.grad - g).max() / np.abs(g).max()
        assert err <= 1e-4, f"{name}: rel err {err}"
        checked += 1
    assert checked >= 4

    gx = np.zeros_like(x0)
    for i in np.ndindex(*x0.shape):
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        gx[i] = (float(run(xp, m0, om0)[2].data) - float(run(xm, m0, om0)[2].data)) / (2 * h)
    assert np.abs(xt.grad - gx).max() / np.abs(gx).max() <= 1e-4

    go = np.zeros_like(om0)
    for i in np.ndindex(*om0.shape):
        op = om0.copy(); op[i] += h
        om = om0.copy(); om[i] -= h
        go[i] = (float(run(x0, m0, op)[2].data) - float(run(x0, m0, om)[2].data)) / (2 * h)
    assert np.abs(ot.grad - go).max() / np.abs(go).max() <= 1e-4


# ---------------------------------------------------------------------------
# combined deformation


def make_ctx(head, params, residual=None, alpha=None):
    return DeformContext.create(head, params, residual=residual, alpha=alpha)


def test_identity_params_zero_residual_is_identity(head):
    ctx = make_ctx(head, HeadParams.zeros(head.num_exp))
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (50, 3))
    out = deform_points(ctx, x, np.zeros(8))
    assert np.array_equal(out["x_can"], x)


def test_translation_maps_surface_back(head):
    t = np.array([0.3, 0.1, -0.2])
    params = HeadParams(beta_exp=np.zeros(head.num_exp), translation=t)
    ctx = make_ctx(head, params)
    surface = ctx.posed.vertices[::7]
    out = deform_points(ctx, surface, np.zeros(8))
    assert np.allclose(out["x_can"], surface - t, atol=1e-12)


def test_rotation_surface_points_land_on_canonical(head):
    params = HeadParams(beta_exp=np.zeros(head.num_exp), rotation=np.array([0.3, 0.5, 0.2]))
    ctx = make_ctx(head, params)
    rng = np.random.default_rng(1)
    # random on-surface points via barycentric sampling
    tri = ctx.posed.corners()[rng.integers(0, ctx.posed.num_triangles, 40)]
    w = rng.dirichlet((1, 1, 1), 40)
    pts = np.einsum("nc,ncr->nr", w, tri)
    out = deform_points(ctx, pts, np.zeros(8))
    canon_accel = build_accel(head.template)
    _, dists, _, _ = canon_accel.query_batch(out["x_can"])
    assert dists.max() < 1e-6


def test_surface_consistency_vertices(head):
    rng = np.random.default_rng(2)
    params = HeadParams(
        beta_exp=rng.uniform(-0.6, 0.6, head.num_exp),
        rotation=rng.uniform(-0.4, 0.4, 3),
        translation=rng.uniform(-0.2, 0.2, 3),
        jaw=0.35,
    )
    ctx = make_ctx(head, params)
    out = deform_points(ctx, ctx.posed.vertices, np.zeros(8))
    assert np.abs(out["x_can"] - head.template.vertices).max() < 1e-9


def test_single_point_wrapper(head):
    rng = np.random.default_rng(3)
    params = HeadParams(beta_exp=rng.uniform(-0.5, 0.5, head.num_exp), jaw=0.2)
    cfg = ResidualConfig(depth=2, width=16, pos_bands=10, def_bands=2, code_dim=8)
    residual = ResidualMLP(cfg, rng)
    residual.w_delta.data = (rng.standard_normal((16, 3)) * 0.01).astype(np.float32)
    ctx = make_ctx(head, params, residual=residual)
    x = np.array([0.4, 0.2, -0.9])
    omega = rng.standard_normal(8).astype(np.float32)
    x_can, feats, delta, mmdef = deform_to_canonical(x, params, omega, ctx)
    assert np.allclose(x_can, x + mmdef + delta, atol=1e-6)
    assert feats.shape == (16,)
    with pytest.raises(ParameterError):
        deform_to_canonical(x, HeadParams.zeros(head.num_exp), omega, ctx)


def test_closed_window_depends_only_on_identity_part(head):
    # with the window closed, the encoded bands vanish for every input, so
    # the residual sees x only through the raw coordinates
    rng = np.random.default_rng(4)
    for x in rng.uniform(-2, 2, (5, 3)):
        enc = encode(x.reshape(1, 3), EncoderConfig(num_bands=10, window_alpha=0.0))
        assert np.array_equal(enc[0, 3:], np.zeros(60))
        assert np.allclose(enc[0, :3], x)

    cfg = ResidualConfig(depth=2, width=16, pos_bands=10, def_bands=2, code_dim=8)
    residual = ResidualMLP(cfg, rng)
    residual.w_delta.data = (rng.standard_normal((16, 3)) * 0.1).astype(np.float32)
    params = HeadParams.zeros(head.num_exp)
    ctx = make_ctx(head, params, residual=residual, alpha=0.0)
    x = rng.uniform(-1, 1, (8, 3))
    out = deform_points(ctx, x, np.zeros(8, dtype=np.float32))
    # manually zeroed bands give the identical offsets
    enc_manual = np.zeros((8, 63), dtype=np.float32)
    enc_manual[:, :3] = x.astype(np.float32)
    cond = encode(out["mmdef"].astype(np.float32), EncoderConfig(2))
    delta_manual, _ = ctx.residual.forward(enc_manual, cond, np.zeros((8, 8), np.float32))
    assert np.array_equal(out["delta"], delta_manual.data)
