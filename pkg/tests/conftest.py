"""Shared fixtures: small meshes, a tiny synthetic dataset, and a quickly
trained pipeline reused by CLI/service/eval tests."""

import numpy as np
import pytest

from rnrf.dataio import load_dataset, synth_scene
from rnrf.headmodel import BlendshapeModel, TriMesh
from rnrf.radiance import ConditioningMode
from rnrf.synth import SynthSpec, icosphere, make_head_model
from rnrf.training import TrainConfig, train


def brute_force_closest(mesh: TriMesh, queries: np.ndarray) -> np.ndarray:
    """Independent closest-point oracle: plane projection with barycentric
    clamping plus explicit edge segments; O(Q*T), distances only."""
    tri = mesh.vertices[mesh.triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    d00 = (ab * ab).sum(1)
    d01 = (ab * ac).sum(1)
    d11 = (ac * ac).sum(1)
    denom = d00 * d11 - d01 * d01
    out = np.empty(len(queries))
    for i, p in enumerate(queries):
        ap = p - a
        d1 = (ab * ap).sum(1)
        d2 = (ac * ap).sum(1)
        v = (d11 * d1 - d01 * d2) / denom
        w = (d00 * d2 - d01 * d1) / denom
        inside = (v >= 0) & (w >= 0) & (v + w <= 1)
        pf = a + v[:, None] * ab + w[:, None] * ac
        cands = [np.where(inside, ((p - pf) ** 2).sum(1), np.inf)]
        for s, e in ((a, b), (b, c), (a, c)):
            d = e - s
            t = np.clip(((p - s) * d).sum(1) / (d * d).sum(1), 0.0, 1.0)
            pe = s + t[:, None] * d
            cands.append(((p - pe) ** 2).sum(1))
        out[i] = np.sqrt(np.minimum.reduce(cands).min())
    return out


def single_triangle_model(vertices=None) -> BlendshapeModel:
    """One-triangle rig with a zero expression basis, for geometry tests."""
    verts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) \
        if vertices is None else np.asarray(vertices, dtype=np.float64)
    mesh = TriMesh(vertices=verts, triangles=np.array([[0, 1, 2]], dtype=np.int32))
    return BlendshapeModel(
        template=mesh,
        exp_basis=np.zeros((1, 3, 3)),
        jaw_pivot=np.zeros(3),
        jaw_axis=np.array([1.0, 0.0, 0.0]),
        jaw_weights=np.zeros(3),
    )


TINY_TRAIN = TrainConfig(
    rays_per_batch=220,
    samples_per_ray=32,
    total_steps=400,
    holdout=1,
    eval_every=200,
    chunk_rays=128,
    seed=11,
    residual_depth=2,
    residual_width=16,
    radiance_depth=3,
    radiance_width=40,
    color_width=20,
    deform_reg_samples=32,
    mode=ConditioningMode.C,
)


@pytest.fixture(scope="session")
def ico320():
    return icosphere(2)


@pytest.fixture(scope="session")
def head4():
    return make_head_model(num_exp=4, subdivisions=1, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyds")
    spec = SynthSpec(n_frames=6, width=20, height=20, num_exp=3, seed=13, supersample=1)
    synth_scene(spec, out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_dataset):
    pipeline, logs = train(tiny_dataset, TINY_TRAIN)
    return pipeline
