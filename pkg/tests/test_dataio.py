"""Manifests, codecs, the synthetic generator, and the analytic oracle."""

import json

import numpy as np
import pytest

from rnrf.camera import gen_rays, orbit_camera, pixel_grid
from rnrf.dataio import (
    holdout_indices,
    load_dataset,
    load_png,
    load_raw,
    save_dataset,
    save_png,
    save_raw,
    synth_scene,
)
from rnrf.errors import LoadError, ParameterError
from rnrf.headmodel import HeadParams, pose_mesh, save_model
from rnrf.synth import (
    LambertSphere,
    OracleScene,
    SynthSpec,
    make_head_model,
    render_frame,
    render_oracle,
)


def small_spec(**kw):
    base = dict(n_frames=4, width=20, height=20, num_exp=3, seed=21, supersample=1)
    base.update(kw)
    return SynthSpec(**base)


# ---------------------------------------------------------------------------
# codecs


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.integers(0, 256, (12, 17, 3)) / 255.0).astype(np.float32)
    path = tmp_path / "x.png"
    save_png(img, path)
    back = load_png(path)
    assert back.shape == (12, 17, 3)
    assert np.abs(back - img).max() < 1e-6  # values were grid-aligned


def test_bool_png_round_trip(tmp_path):
    mask = np.zeros((8, 9), dtype=bool)
    mask[2:5, 3:7] = True
    path = tmp_path / "m.png"
    save_png(mask, path)
    assert np.array_equal(load_png(path) > 0.5, mask)


def test_raw_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.standard_normal((7, 5, 3)).astype(np.float32)
    path = tmp_path / "x.raw"
    save_raw(img, path)
    assert np.array_equal(load_raw(path), img)
    gray = rng.standard_normal((4, 6)).astype(np.float32)
    save_raw(gray, path)
    assert np.array_equal(load_raw(path)[:, :, 0], gray)


# ---------------------------------------------------------------------------
# dataset load/save


def test_synth_and_load(tmp_path):
    ds = synth_scene(small_spec(), tmp_path / "d")
    assert ds.num_frames == 4
    assert ds.frames[0].image.shape == (20, 20, 3)
    assert ds.model.num_exp == 3
    for i, fr in enumerate(ds.frames):
        assert fr.index == i
        assert fr.params.beta_exp.shape == (3,)


def test_missing_image_names_frame(tmp_path):
    out = tmp_path / "d"
    synth_scene(small_spec(), out)
    (out / "frames" / "frame_0002.png").unlink()
    with pytest.raises(LoadError, match="frame 2"):
        load_dataset(out)


def test_schema_violation_reported(tmp_path):
    out = tmp_path / "d"
    synth_scene(small_spec(), out)
    manifest = json.loads((out / "manifest.json").read_text())
    del manifest["frames"][1]["camera"]
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match="frame 1"):
        load_dataset(out)


def test_non_dense_indices_rejected(tmp_path):
    out = tmp_path / "d"
    synth_scene(small_spec(), out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["frames"][0]["index"] = 9
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match="dense"):
        load_dataset(out)


def test_save_load_round_trip(tmp_path):
    ds = synth_scene(small_spec(), tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    ds2 = load_dataset(tmp_path / "b")
    assert ds2.num_frames == ds.num_frames
    for f1, f2 in zip(ds.frames, ds2.frames):
        assert np.array_equal(f1.image, f2.image)
        assert np.array_equal(f1.params.beta_exp, f2.params.beta_exp)
        assert np.allclose(f1.camera.rotation, f2.camera.rotation)
    assert np.allclose(ds2.model.template.vertices, ds.model.template.vertices)


def test_generation_deterministic(tmp_path):
    spec = small_spec()
    synth_scene(spec, tmp_path / "a")
    synth_scene(spec, tmp_path / "b")
    for rel in ["manifest.json", "model.rnrf", "frames/frame_0001.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_zero_param_frame_equals_canonical_render(tmp_path):
    spec = small_spec()
    ds = synth_scene(spec, tmp_path / "d")
    fr = ds.frames[0]  # orbit half: identity head parameters
    assert fr.params.is_identity()
    again = render_frame(ds.model, HeadParams.zeros(3), fr.camera, spec)
    quantized = np.round(np.clip(again, 0, 1) * 255) / 255
    assert np.abs(quantized - fr.image).max() < 1e-6


def test_normalization_applied_on_load(tmp_path):
    out = tmp_path / "d"
    ds = synth_scene(small_spec(), out)
    # blow the scene up by 2.5x and recenter off-origin: load must normalize
    from rnrf.headmodel import BlendshapeModel, TriMesh

    s, c = 2.5, np.array([0.3, -0.2, 0.1])
    model = ds.model
    scaled = BlendshapeModel(
        template=TriMesh(vertices=model.template.vertices * s + c,
                         triangles=model.template.triangles),
        exp_basis=model.exp_basis * s,
        jaw_pivot=model.jaw_pivot * s + c,
        jaw_axis=model.jaw_axis,
        jaw_weights=model.jaw_weights,
    )
    save_model(scaled, out / "model.rnrf")
    manifest = json.loads((out / "manifest.json").read_text())
    for fr in manifest["frames"]:
        cam = fr["camera"]
        cam["origin"] = (np.asarray(cam["origin"]) * s + c).tolist()
        cam["near"] *= s
        cam["far"] *= s
        fr["params"]["translation"] = (np.asarray(fr["params"]["translation"]) * s).tolist()
    (out / "manifest.json").write_text(json.dumps(manifest))

    ds2 = load_dataset(out)
    t = ds2.model.template.vertices
    center = t.mean(axis=0)
    radius = np.linalg.norm(t - center, axis=1).max()
    assert abs(radius - 1.0) <= 1e-6
    assert ds2.normalization["scale"] == pytest.approx(1 / s, rel=1e-5)
    # geometry is consistent after normalization: posed head projects to the
    # same pixels as in the originally normalized dataset
    from rnrf.headmodel import face_mask

    m1 = face_mask(pose_mesh(ds.model, ds.frames[3].params), ds.frames[3].camera, 20, 20)
    m2 = face_mask(pose_mesh(ds2.model, ds2.frames[3].params), ds2.frames[3].camera, 20, 20)
    assert (m1 == m2).mean() > 0.97


def test_holdout_indices():
    ids = holdout_indices(150, 10)
    assert len(ids) == 10
    assert ids[0] == 0 and ids[-1] == 149
    assert np.array_equal(ids, np.unique(ids))
    assert holdout_indices(10, 0).size == 0
    with pytest.raises(ParameterError):
        holdout_indices(5, 5)


# ---------------------------------------------------------------------------
# analytic oracle


def test_sphere_render_matches_closed_form():
    cam = orbit_camera(25.0, 15.0, 3.0, fx=60, fy=60, cx=15.5, cy=15.5, near=0.2, far=10)
    albedo = np.array([0.6, 0.4, 0.3])
    center = np.array([0.1, -0.2, 0.3])
    radius = 0.8
    light = np.array([-0.38, 0.88, -0.28])
    light = light / np.linalg.norm(light)
    scene = OracleScene(meshes=[], spheres=[LambertSphere(center=center, radius=radius,
                                                          albedo=albedo)],
                        light_dir=light, ambient=0.35)
    got = render_oracle(scene, cam, 32, 32)

    # closed form: quadratic intersection + Lambert, fully re-derived here
    origins, dirs = gen_rays(cam, pixel_grid(32, 32))
    oc = origins - center
    b = (oc * dirs).sum(1)
    c = (oc * oc).sum(1) - radius ** 2
    disc = b * b - c
    want = np.zeros((32 * 32, 3))
    hit = disc >= 0
    t = -b[hit] - np.sqrt(disc[hit])
    pts = origins[hit] + t[:, None] * dirs[hit]
    n = (pts - center) / radius
    lam = np.abs(n @ light)
    want[hit] = np.clip(albedo * (0.35 + 0.65 * lam)[:, None], 0, 1)
    want = want.reshape(32, 32, 3)

    assert np.array_equal(got > 0, want > 0)  # identical silhouette
    assert np.abs(got - want).max() < 1e-12


def test_dome_encloses_scene():
    spec = small_spec()
    model = make_head_model(num_exp=3, subdivisions=1, seed=21)
    img = render_frame(model, HeadParams.zeros(3), orbit_camera(0, 10, 3.2,
                       cx=9.5, cy=9.5, near=0.5, far=12.0), spec)
    assert img.min() >= 0 and img.max() <= 1
    assert img.mean() > 0.05  # no black void: dome covers every miss


def test_supersampling_averages(tmp_path):
    spec1 = small_spec(supersample=1)
    spec2 = small_spec(supersample=2)
    model = make_head_model(num_exp=3, subdivisions=1, seed=21)
    cam = orbit_camera(0, 8, 3.2, cx=9.5, cy=9.5, near=0.5, far=12.0)
    img1 = render_frame(model, HeadParams.zeros(3), cam, spec1)
    img2 = render_frame(model, HeadParams.zeros(3), cam, spec2)
    assert img1.shape == img2.shape
    assert 0 < np.abs(img1 - img2).max() < 0.5  # antialiasing changes edges only
