"""Deformation to canonical space: morphable-model prior field plus a
learned residual.

The prior field at x equals the deformation of the closest posed-surface
point (canonical position minus posed position at the same barycentric
coordinates), scaled by exp(-distance/s). The residual MLP sees the point
after inverse head-pose alignment, an encoding of the prior deformation (or,
in ablation mode A, the raw head parameters), and a per-frame latent code;
it outputs a corrective offset plus its penultimate features for appearance
conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import _kernels
from .autodiff import Tensor
from .errors import ParameterError
from .headmodel import (
    BlendshapeModel,
    ClosestPointResult,
    HeadParams,
    MeshAccel,
    TriMesh,
    axis_angle_matrix,
)

DEFORM_CODE_DIM = 8


# ---------------------------------------------------------------------------
# positional encoding with coarse-to-fine window


@dataclass(frozen=True)
class EncoderConfig:
    """num_bands sinusoidal octaves; window_alpha anneals them in, in units of
    bands (None = fully open). The identity passthrough is never windowed."""

    num_bands: int
    window_alpha: Optional[float] = None

    def __post_init__(self):
        if self.num_bands < 0:
            raise ParameterError("num_bands must be >= 0")
        if self.window_alpha is not None and self.window_alpha < 0:
            raise ParameterError("window_alpha must be >= 0")

    def output_dim(self, k: int) -> int:
        return k + 2 * k * self.num_bands

    def band_weights(self) -> np.ndarray:
        j = np.arange(self.num_bands, dtype=np.float64)
        if self.window_alpha is None:
            return np.ones(self.num_bands)
        x = np.clip(self.window_alpha - j, 0.0, 1.0)
        return (1.0 - np.cos(np.pi * x)) / 2.0

    def at_alpha(self, alpha: Optional[float]) -> "EncoderConfig":
        return replace(self, window_alpha=alpha)


def encode(x, cfg: EncoderConfig):
    """gamma_m(x) = (x, w0 sin(x), w0 cos(x), w1 sin(2x), w1 cos(2x), ...).

    Accepts a 1-D vector or an (N, k) batch, ndarray or Tensor; returns the
    matching kind. Band j is scaled by the window weight from cfg.
    """
    if isinstance(x, Tensor):
        if x.data.ndim != 2:
            raise ParameterError("tensor inputs to encode must be (N, k)")
        if cfg.num_bands == 0:
            return x
        return ad.fourier_features(x, cfg.num_bands, cfg.band_weights())
    x = np.asarray(x)
    single = x.ndim == 1
    x2 = np.ascontiguousarray(x.reshape(1, -1) if single else x, dtype=np.float64 if x.dtype != np.float32 else np.float32)
    if cfg.num_bands == 0:
        out = x2.copy()
    else:
        out = _kernels.fourier_forward(x2, cfg.num_bands, cfg.band_weights())
    return out[0] if single else out


# ---------------------------------------------------------------------------
# morphable-model deformation field


def mmdef_vertex(
    model: BlendshapeModel, posed: TriMesh, cp: ClosestPointResult, params: HeadParams
) -> np.ndarray:
    """Deformation carried by the surface point cp: canonical minus posed."""
    if posed.triangles.shape != model.template.triangles.shape or \
            not np.array_equal(posed.triangles, model.template.triangles):
        raise RuntimeError("posed mesh topology does not match the model template")
    if params.beta_exp.shape[0] != model.num_exp:
        raise ParameterError("params dimension does not match model")
    tri = model.template.triangles[cp.triangle_id]
    canonical = cp.barycentrics @ model.template.vertices[tri]
    current = cp.barycentrics @ posed.vertices[tri]
    return canonical - current


def mmdef_field(
    accel: MeshAccel,
    model: BlendshapeModel,
    params: HeadParams,
    x: np.ndarray,
    scale: float = 1.0,
) -> np.ndarray:
    """Prior deformation at an arbitrary point: closest-surface deformation
    scaled by exp(-DistToMesh/scale)."""
    if scale <= 0:
        raise ParameterError("distance scale must be positive")
    from .headmodel import closest_point

    cp = closest_point(accel, x)
    return mmdef_vertex(model, accel.mesh, cp, params) / np.exp(cp.distance / scale)


def mmdef_batch(
    canonical_vertices: np.ndarray,
    posed_vertices: np.ndarray,
    triangles: np.ndarray,
    tri_ids: np.ndarray,
    bary: np.ndarray,
    dists: np.ndarray,
    scale: float,
):
    """Vectorized field evaluation from precomputed closest-point results.

    Returns (field (N,3), surface_deformation (N,3))."""
    corner_ids = triangles[tri_ids]  # (N, 3)
    canon = np.einsum("nc,ncr->nr", bary, canonical_vertices[corner_ids])
    posed = np.einsum("nc,ncr->nr", bary, posed_vertices[corner_ids])
    surf = canon - posed
    field = surf / np.exp(dists / scale)[:, None]
    return field, surf


# ---------------------------------------------------------------------------
# residual MLP


@dataclass(frozen=True)
class ResidualConfig:
    depth: int = 8
    width: int = 128
    pos_bands: int = 10
    def_bands: int = 2
    code_dim: int = DEFORM_CODE_DIM
    beta_dim: int = 0  # used only when conditioned directly on parameters (mode A)
    condition_on_params: bool = False

    @property
    def cond_dim(self) -> int:
        if self.condition_on_params:
            return self.beta_dim
        return 3 + 6 * self.def_bands


class ResidualMLP:
    """Deformation-correction network D.

    Input: gamma_a(aligned position) ++ conditioning ++ per-frame code.
    Output: a 3-vector offset and the penultimate-layer features. The offset
    head is zero-initialized so training starts from the pure prior field.
    """

    def __init__(self, cfg: ResidualConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        pos_dim = 3 + 6 * cfg.pos_bands
        in_dims = [pos_dim, cfg.cond_dim, cfg.code_dim]
        self.w_in = [_he(rng, (d, cfg.width), dtype) for d in in_dims]
        self.b_in = Tensor(np.zeros(cfg.width, dtype=dtype), requires_grad=True)
        self.hidden = [
            (_he(rng, (cfg.width, cfg.width), dtype), Tensor(np.zeros(cfg.width, dtype=dtype), requires_grad=True))
            for _ in range(cfg.depth - 1)
        ]
        self.w_delta = Tensor(np.zeros((cfg.width, 3), dtype=dtype), requires_grad=True)
        self.b_delta = Tensor(np.zeros(3, dtype=dtype), requires_grad=True)

    @property
    def feature_dim(self) -> int:
        return self.cfg.width

    def parameters(self):
        out = []
        for i, w in enumerate(self.w_in):
            out.append((f"deform.in{i}.weight", w))
        out.append(("deform.in.bias", self.b_in))
        for i, (w, b) in enumerate(self.hidden):
            out.append((f"deform.h{i}.weight", w))
            out.append((f"deform.h{i}.bias", b))
        out.append(("deform.delta.weight", self.w_delta))
        out.append(("deform.delta.bias", self.b_delta))
        return out

    def forward(self, enc_pos, cond, omega):
        """enc_pos: (N, 3+6a); cond: (N, cond_dim); omega: (N, code_dim).

        Returns (delta (N,3), features (N,width)). Any input may be a Tensor;
        the output is a Tensor whenever gradients are being recorded.
        """
        exp_dims = (self.w_in[0].shape[0], self.w_in[1].shape[0], self.w_in[2].shape[0])
        got = tuple(int(np.shape(t.data if isinstance(t, Tensor) else t)[1]) for t in (enc_pos, cond, omega))
        if got != exp_dims:
            raise ParameterError(f"residual MLP input widths {got} do not match configured {exp_dims}")
        h = ad.affine_multi_relu([enc_pos, cond, omega], self.w_in, self.b_in)
        for w, b in self.hidden:
            h = ad.affine_relu(h, w, b)
        delta = ad.affine(h, self.w_delta, self.b_delta)
        return delta, h


def _he(rng: np.random.Generator, shape, dtype) -> Tensor:
    fan_in = shape[0]
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# combined deformation


@dataclass
class DeformContext:
    """Everything needed to take world points to canonical space for one
    posed-head configuration."""

    model: BlendshapeModel
    params: HeadParams
    posed: TriMesh
    accel: MeshAccel
    residual: Optional[ResidualMLP]
    scale: float = 1.0
    pos_encoder: EncoderConfig = EncoderConfig(num_bands=10)
    def_encoder: EncoderConfig = EncoderConfig(num_bands=2)

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError("distance scale must be positive")
        self.rot_inv = axis_angle_matrix(self.params.rotation).T
        self.beta_cond = np.concatenate([self.params.beta_exp, self.params.pose7])

    @classmethod
    def create(cls, model, params, residual=None, scale=1.0, alpha=None,
               pos_bands=10, def_bands=2, posed=None, leaf_size=4):
        from .headmodel import pose_mesh

        posed = posed if posed is not None else pose_mesh(model, params)
        accel = MeshAccel(posed, leaf_size=leaf_size)
        return cls(
            model=model, params=params, posed=posed, accel=accel, residual=residual,
            scale=scale,
            pos_encoder=EncoderConfig(num_bands=pos_bands, window_alpha=alpha),
            def_encoder=EncoderConfig(num_bands=def_bands),
        )


def deform_points(ctx: DeformContext, x: np.ndarray, omega, record_graph: bool = False):
    """Map world points to canonical space.

    x: (N, 3) float array. omega: per-point codes (N, code_dim) as Tensor or
    ndarray, or a single (code_dim,) vector. Returns a dict with x_can,
    mmdef (prior field values), delta, features, dist. x_can/delta/features
    are Tensors when record_graph is set (or when omega carries a graph),
    plain arrays otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ParameterError(f"points must be (N, 3), got {x.shape}")
    n = x.shape[0]

    _, dists, tri_ids, bary = ctx.accel.query_batch(x)
    mmdef, _ = mmdef_batch(
        ctx.model.template.vertices, ctx.posed.vertices, ctx.model.template.triangles,
        tri_ids, bary, dists, ctx.scale,
    )

    aligned = (x - ctx.params.translation) @ ctx.rot_inv.T

    if ctx.residual is None:
        x_can = x + mmdef
        return {
            "x_can": x_can, "mmdef": mmdef, "dist": dists,
            "delta": np.zeros_like(mmdef), "features": None,
        }

    dtype = ctx.residual.dtype
    enc_pos = encode(aligned.astype(dtype), ctx.pos_encoder)
    if ctx.residual.cfg.condition_on_params:
        cond = np.broadcast_to(ctx.beta_cond.astype(dtype), (n, ctx.beta_cond.shape[0]))
    else:
        cond = encode(mmdef.astype(dtype), ctx.def_encoder)
    if isinstance(omega, Tensor):
        # a (code,) or (1, code) tensor broadcasts across all points
        om = omega if omega.data.ndim == 2 else ad.reshape(omega, (1, -1))
    else:
        om = np.asarray(omega, dtype=dtype)
        if om.ndim == 1:
            om = np.broadcast_to(om, (n, om.shape[0]))

    if not record_graph and not isinstance(omega, Tensor):
        with ad.no_grad():
            delta_t, feats_t = ctx.residual.forward(enc_pos, cond, om)
        delta = delta_t.data.astype(np.float64)
        return {
            "x_can": x + mmdef + delta, "mmdef": mmdef, "dist": dists,
            "delta": delta_t.data, "features": feats_t.data,
        }

    delta_t, feats_t = ctx.residual.forward(enc_pos, cond, om)
    base = (x + mmdef).astype(dtype)
    x_can = ad.add(Tensor(base), delta_t)
    return {
        "x_can": x_can, "mmdef": mmdef, "dist": dists,
        "delta": delta_t, "features": feats_t,
    }


def deform_to_canonical(x, params: HeadParams, omega, ctx: DeformContext):
    """Single-point combined deformation.

    Returns (x_can, features, delta, mmdef) per the field definition
    x_can = x + prior(x) + residual(aligned x, prior(x), omega)."""
    if not np.array_equal(np.asarray(ctx.params.pose7), np.asarray(params.pose7)) or \
            not np.array_equal(ctx.params.beta_exp, params.beta_exp):
        raise ParameterError("context was built for different head parameters")
    out = deform_points(ctx, np.asarray(x, dtype=np.float64).reshape(1, 3), omega)
    x_can = out["x_can"]
    x_can = x_can.data if isinstance(x_can, Tensor) else x_can
    delta = out["delta"].data if isinstance(out["delta"], Tensor) else out["delta"]
    feats = out["features"]
    if isinstance(feats, Tensor):
        feats = feats.data
    return (
        np.asarray(x_can[0], dtype=np.float64),
        None if feats is None else feats[0],
        np.asarray(delta[0], dtype=np.float64),
        out["mmdef"][0],
    )
