"""Losses, the training loop, held-out deformation-code fitting, metrics,
and checkpoint serialization.

Each step samples rays uniformly over every pixel of every frame, runs the
coarse/fine hierarchy, and minimizes photometric error plus a ramped-down
penalty on the residual deformation at posed-mesh vertices. All randomness
derives from one seed and the update order is fixed, so identical seeds give
bit-identical checkpoints.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera, gen_rays, pixel_grid
from .dataio import SceneDataset, holdout_indices
from .deformation import (
    DEFORM_CODE_DIM,
    DeformContext,
    EncoderConfig,
    ResidualConfig,
    ResidualMLP,
    deform_points,
    encode,
)
from .errors import LoadError, ParameterError, TrainingDiverged
from .headmodel import (
    BlendshapeModel,
    HeadParams,
    MeshAccel,
    StackedAccels,
    TriMesh,
    axis_angle_matrix,
    face_mask,
    pose_mesh,
)
from .optim import Adam, ConstantLr, ExponentialDecay
from .radiance import APPEAR_CODE_DIM, ConditioningMode, RadianceConfig, RadianceMLP
from .rendering import (
    SampleOptions,
    coarse_density,
    importance_samples,
    merge_samples,
    render_image,
    stratified_samples,
    volume_render,
)

CHECKPOINT_MAGIC = b"RNCK"
CHECKPOINT_VERSION = 1
PSNR_CAP = 99.0
_IMPORTANCE_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults sized for CPU runs; the full-scale preset
    restores the reference network sizes and step count (GPU territory)."""

    rays_per_batch: int = 1550
    samples_per_ray: int = 128  # split evenly into coarse + importance
    total_steps: int = 20000
    lr0: float = 5e-4
    lr1: float = 5e-5
    coarse_to_fine_steps: int = 40000  # capped at total_steps when scheduling
    deform_reg_weight: float = 1e-3
    deform_reg_samples: int = 192
    mode: ConditioningMode = ConditioningMode.C
    field_scale: float = 1.0
    seed: int = 0
    holdout: int = 10
    eval_every: int = 500
    chunk_rays: int = 512
    pos_bands: int = 10
    def_bands: int = 2
    dir_bands: int = 4
    residual_depth: int = 3
    residual_width: int = 32
    radiance_depth: int = 4
    radiance_width: int = 64
    color_width: int = 32
    code_dim: int = DEFORM_CODE_DIM
    appear_dim: int = APPEAR_CODE_DIM

    def __post_init__(self):
        if min(self.rays_per_batch, self.samples_per_ray, self.total_steps) < 1:
            raise ParameterError("counts must be positive")
        if not (self.lr0 > self.lr1 > 0):
            raise ParameterError("need lr0 > lr1 > 0")
        if self.samples_per_ray % 2:
            raise ParameterError("samples_per_ray must split evenly into coarse+fine")

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(
            total_steps=150000, coarse_to_fine_steps=40000,
            residual_depth=8, residual_width=128,
            radiance_depth=8, radiance_width=256, color_width=128,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def n_coarse(self) -> int:
        return self.samples_per_ray // 2

    @property
    def n_fine(self) -> int:
        return self.samples_per_ray - self.n_coarse

    def alpha_at(self, step: int) -> float:
        ramp = min(self.coarse_to_fine_steps, self.total_steps)
        return self.pos_bands * min(step / ramp, 1.0)

    def reg_weight_at(self, step: int) -> float:
        ramp = min(self.coarse_to_fine_steps, self.total_steps)
        return self.deform_reg_weight * max(0.0, 1.0 - step / ramp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["mode"] = ConditioningMode(d["mode"])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses and metrics


def photometric_loss(pred, gt):
    """Mean squared color error over the batch, per channel."""
    if isinstance(pred, Tensor):
        diff = ad.sub(pred, np.asarray(gt, dtype=pred.dtype))
        return ad.mean(ad.square(diff))
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ParameterError(f"prediction shape {pred.shape} != target {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def deform_reg(deltas):
    """Mean squared norm of residual offsets sampled at posed vertices."""
    if isinstance(deltas, Tensor):
        if deltas.data.size == 0:
            raise ParameterError("deformation penalty needs at least one sample")
        return ad.mean(ad.sum_(ad.square(deltas), axis=1))
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise ParameterError("deformation penalty needs at least one sample")
    return float(np.mean((deltas ** 2).sum(axis=1)))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def metrics(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> dict:
    """MSE/PSNR over the image, plus MSE restricted to the face mask.

    FaceMSE is None (undefined, not zero) when no mask pixel is set."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ParameterError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    out = {"mse": mse, "psnr": psnr_from_mse(mse), "face_mse": None}
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:2]:
            raise ParameterError("mask shape does not match images")
        if mask.any():
            out["face_mse"] = float(np.mean((pred[mask] - gt[mask]) ** 2))
    return out


# ---------------------------------------------------------------------------
# pipeline: everything a checkpoint captures


@dataclass
class Pipeline:
    model: BlendshapeModel
    residual: ResidualMLP
    radiance: RadianceMLP
    omega: Tensor  # (num_frames, code_dim)
    phi: Tensor  # (num_frames, appear_dim)
    config: TrainConfig
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return self.config.alpha_at(self.step)

    def named_tensors(self):
        out = list(self.residual.parameters()) + list(self.radiance.parameters())
        out.append(("codes.omega", self.omega))
        out.append(("codes.phi", self.phi))
        return out

    def trainable(self):
        return [t for _, t in self.named_tensors()]

    def context_for(self, params: HeadParams, posed: Optional[TriMesh] = None) -> DeformContext:
        posed = posed if posed is not None else pose_mesh(self.model, params)
        return DeformContext(
            model=self.model,
            params=params,
            posed=posed,
            accel=MeshAccel(posed),
            residual=self.residual,
            scale=self.config.field_scale,
            pos_encoder=EncoderConfig(self.config.pos_bands, self.alpha),
            def_encoder=EncoderConfig(self.config.def_bands),
        )

    def beta_cond(self, params: HeadParams) -> np.ndarray:
        return np.concatenate([params.beta_exp, params.pose7]).astype(np.float32)

    def sample_options(self, jitter: bool = True) -> SampleOptions:
        return SampleOptions(
            n_coarse=self.config.n_coarse, n_fine=self.config.n_fine, jitter=jitter
        )

    def render(self, camera: Camera, params: HeadParams, omega_vec, phi_vec,
               width: int, height: int, seed: int = 0,
               posed: Optional[TriMesh] = None, opts: Optional[SampleOptions] = None):
        ctx = self.context_for(params, posed)
        return render_image(
            ctx, self.radiance, camera,
            np.asarray(omega_vec, dtype=np.float32),
            np.asarray(phi_vec, dtype=np.float32),
            width, height, opts or self.sample_options(), seed,
            self.beta_cond(params),
        )


def build_pipeline(num_exp: int, num_frames: int, config: TrainConfig,
                   model: BlendshapeModel, rng: np.random.Generator,
                   zero_heads: bool = False) -> Pipeline:
    beta_dim = num_exp + 7
    rcfg = ResidualConfig(
        depth=config.residual_depth, width=config.residual_width,
        pos_bands=config.pos_bands, def_bands=config.def_bands,
        code_dim=config.code_dim, beta_dim=beta_dim,
        condition_on_params=config.mode == ConditioningMode.A,
    )
    residual = ResidualMLP(rcfg, rng)
    fcfg = RadianceConfig(
        depth=config.radiance_depth, width=config.radiance_width,
        color_width=config.color_width, pos_bands=config.pos_bands,
        dir_bands=config.dir_bands, appear_dim=config.appear_dim,
        beta_dim=beta_dim, feature_dim=residual.feature_dim, mode=config.mode,
    )
    radiance = RadianceMLP(fcfg, rng, zero_heads=zero_heads)
    omega = Tensor(np.zeros((num_frames, config.code_dim), dtype=np.float32), requires_grad=True)
    phi = Tensor(np.zeros((num_frames, config.appear_dim), dtype=np.float32), requires_grad=True)
    return Pipeline(model=model, residual=residual, radiance=radiance,
                    omega=omega, phi=phi, config=config)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, pipeline: Pipeline):
    meta = {
        "step": pipeline.step,
        "config": pipeline.config.to_dict(),
        "alpha_window": pipeline.alpha,
        **pipeline.meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = pipeline.named_tensors()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, model: Optional[BlendshapeModel] = None) -> Pipeline:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off); off += 4
    meta = json.loads(blob[off:off + meta_len].decode("utf-8")); off += meta_len
    (n_tensors,) = struct.unpack_from("<I", blob, off); off += 4
    tensors = {}
    order = []
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, off); off += 2
        name = blob[off:off + name_len].decode("utf-8"); off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off); off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off); off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = data.copy()
        order.append(name)

    config = TrainConfig.from_dict(meta["config"])
    step = int(meta["step"])
    num_frames = tensors["codes.omega"].shape[0]
    if model is None:
        model = _model_from_meta(meta)
    rng = np.random.default_rng(0)  # shapes only; weights are overwritten
    pipeline = build_pipeline(model.num_exp, num_frames, config, model, rng)
    pipeline.step = step
    pipeline.meta = {k: v for k, v in meta.items() if k not in ("step", "config", "alpha_window")}
    for name, t in pipeline.named_tensors():
        if name not in tensors:
            raise LoadError(f"{path}: checkpoint is missing tensor '{name}'")
        if tuple(t.data.shape) != tensors[name].shape:
            raise LoadError(
                f"{path}: tensor '{name}' has shape {tensors[name].shape}, expected {t.data.shape}"
            )
        t.data = tensors[name].astype(np.float32)
    extra = set(order) - {n for n, _ in pipeline.named_tensors()}
    if extra:
        raise LoadError(f"{path}: unexpected tensors {sorted(extra)[:4]}")
    return pipeline


def _model_from_meta(meta: dict) -> BlendshapeModel:
    m = meta.get("morphable_model")
    if m is None:
        raise LoadError("checkpoint carries no embedded morphable model; pass one explicitly")
    return BlendshapeModel(
        template=TriMesh(
            vertices=np.asarray(m["template_vertices"], dtype=np.float64),
            triangles=np.asarray(m["triangles"], dtype=np.int32),
        ),
        exp_basis=np.asarray(m["exp_basis"], dtype=np.float64),
        jaw_pivot=np.asarray(m["jaw_pivot"], dtype=np.float64),
        jaw_axis=np.asarray(m["jaw_axis"], dtype=np.float64),
        jaw_weights=np.asarray(m["jaw_weights"], dtype=np.float64),
    )


def model_meta(model: BlendshapeModel) -> dict:
    return {
        "template_vertices": model.template.vertices.tolist(),
        "triangles": model.template.triangles.tolist(),
        "exp_basis": model.exp_basis.tolist(),
        "jaw_pivot": model.jaw_pivot.tolist(),
        "jaw_axis": model.jaw_axis.tolist(),
        "jaw_weights": model.jaw_weights.tolist(),
    }


# ---------------------------------------------------------------------------
# the trainer


class _Trainer:
    def __init__(self, dataset: SceneDataset, config: TrainConfig, dump_dir=None):
        self.dataset = dataset
        self.config = config
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed))

        self.pipeline = build_pipeline(
            dataset.model.num_exp, dataset.num_frames, config, dataset.model, self.rng
        )
        p = self.pipeline
        n = dataset.num_frames
        h, w = dataset.height, dataset.width
        self.pixels_per_frame = h * w
        self.images = np.stack([f.image.reshape(-1, 3) for f in dataset.frames]).astype(np.float32)

        coords = pixel_grid(w, h)
        origins = np.empty((n, h * w, 3), dtype=np.float64)
        dirs = np.empty((n, h * w, 3), dtype=np.float64)
        posed = []
        accels = []
        for i, fr in enumerate(dataset.frames):
            o, d = gen_rays(fr.camera, coords)
            origins[i] = o
            dirs[i] = d
            mesh = fr.posed_mesh if fr.posed_mesh is not None else pose_mesh(dataset.model, fr.params)
            posed.append(mesh.vertices)
            accels.append(MeshAccel(mesh))
        self.origins = origins
        self.dirs = dirs
        self.posed = np.stack(posed)  # (F, V, 3)
        self.stacked = StackedAccels(accels)
        self.canonical = dataset.model.template.vertices
        self.triangles = dataset.model.template.triangles
        self.rot_inv = np.stack([axis_angle_matrix(f.params.rotation).T for f in dataset.frames])
        self.trans = np.stack([f.params.translation for f in dataset.frames])
        self.beta = np.stack(
            [np.concatenate([f.params.beta_exp, f.params.pose7]) for f in dataset.frames]
        ).astype(np.float32)
        self.near = float(dataset.frames[0].camera.near)
        self.far = float(dataset.frames[0].camera.far)

        self.holdout = holdout_indices(n, config.holdout)
        mask = np.ones(n, dtype=bool)
        mask[self.holdout] = False
        self.train_pixels = np.nonzero(np.repeat(mask, self.pixels_per_frame))[0]

        schedule = ExponentialDecay(config.lr0, config.lr1, config.total_steps)
        self.optimizer = Adam(p.trainable(), schedule)
        self.logs = []

        stats = {
            "beta_exp_min": dataset.beta_matrix().min(axis=0).tolist(),
            "beta_exp_max": dataset.beta_matrix().max(axis=0).tolist(),
            "pose_min": dataset.pose_matrix().min(axis=0).tolist(),
            "pose_max": dataset.pose_matrix().max(axis=0).tolist(),
        }
        preset_ids = np.unique(np.linspace(0, n - 1, 5).round().astype(int))
        p.meta = {
            "model_hash": dataset.model_hash,
            "normalization": dataset.normalization,
            "stats": stats,
            "num_exp": dataset.model.num_exp,
            "width": w,
            "height": h,
            "default_camera": dataset.frames[0].camera.to_dict(),
            "presets": [
                {"frame": int(i), **dataset.frames[i].params.to_dict()} for i in preset_ids
            ],
            "morphable_model": model_meta(dataset.model),
        }

    # -- field evaluation over a multi-frame point batch --

    def _field_inputs(self, pts_flat, frame_of_point):
        """Closest-point prior and aligned positions for stacked frames."""
        _, dists, tri_ids, bary = self.stacked.query_batch(pts_flat, frame_of_point)
        corners = self.triangles[tri_ids]  # (N, 3) vertex ids
        canon = np.einsum("nc,ncr->nr", bary, self.canonical[corners])
        cur = np.einsum("nc,ncr->nr", bary, self.posed[frame_of_point[:, None], corners])
        surf_def = canon - cur
        mmdef = surf_def / np.exp(dists / self.config.field_scale)[:, None]
        aligned = np.einsum(
            "nij,nj->ni", self.rot_inv[frame_of_point], pts_flat - self.trans[frame_of_point]
        )
        return mmdef, aligned

    def _residual_inputs(self, mmdef, aligned, frame_of_point, alpha):
        p = self.pipeline
        enc_pos = encode(aligned.astype(np.float32), EncoderConfig(self.config.pos_bands, alpha))
        if p.residual.cfg.condition_on_params:
            cond = self.beta[frame_of_point]
        else:
            cond = encode(mmdef.astype(np.float32), EncoderConfig(self.config.def_bands))
        return enc_pos, cond

    # -- one optimization step --

    def step(self, step_idx: int):
        cfg = self.config
        p = self.pipeline
        alpha = cfg.alpha_at(step_idx)
        rng = self.rng
        nc, nf = cfg.n_coarse, cfg.n_fine

        pick = rng.integers(0, self.train_pixels.shape[0], cfg.rays_per_batch)
        ids = np.sort(self.train_pixels[pick])
        frames = ids // self.pixels_per_frame
        pix = ids % self.pixels_per_frame
        gt = self.images[frames, pix]
        origins = self.origins[frames, pix]
        dirs = self.dirs[frames, pix]

        r = cfg.rays_per_batch
        t_coarse = stratified_samples(nc, self.near, self.far, True, rng, count=r)
        pts_c = (origins[:, None, :] + t_coarse[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
        f_of_c = np.repeat(frames, nc)
        mmdef_c, aligned_c = self._field_inputs(pts_c, f_of_c)
        enc_c, cond_c = self._residual_inputs(mmdef_c, aligned_c, f_of_c, alpha)
        with ad.no_grad():
            delta_c, _ = p.residual.forward(enc_c, cond_c, p.omega.data[f_of_c])
            x_can_c = (pts_c + mmdef_c).astype(np.float32) + delta_c.data
            sig_c = p.radiance.density(x_can_c).data.astype(np.float64).reshape(r, nc)
        if not np.isfinite(sig_c).all():
            self._abort(step_idx, frames, pix, gt, "non-finite density in coarse pass")

        vr_c = volume_render(np.zeros((r, nc, 3)), sig_c, t_coarse, self.far)
        edges = self.near + (self.far - self.near) * np.arange(nc + 1) / nc
        t_new = importance_samples(edges, vr_c["weights"] + _IMPORTANCE_EPS, nf, rng)

        # merge, reusing the coarse points' exact closest-point results
        pts_n = (origins[:, None, :] + t_new[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
        f_of_n = np.repeat(frames, nf)
        mmdef_n, aligned_n = self._field_inputs(pts_n, f_of_n)

        t_cat = np.concatenate([t_coarse, t_new], axis=1)
        order = np.argsort(t_cat, axis=1, kind="stable")
        ts = np.take_along_axis(t_cat, order, axis=1)

        def assemble(a_coarse, a_new):
            cat = np.concatenate(
                [a_coarse.reshape(r, nc, -1), a_new.reshape(r, nf, -1)], axis=1
            )
            return np.take_along_axis(cat, order[:, :, None], axis=1)

        mmdef_m = assemble(mmdef_c, mmdef_n)
        aligned_m = assemble(aligned_c, aligned_n)
        enc_dir = encode(dirs.astype(np.float32), EncoderConfig(cfg.dir_bands))

        total_loss = 0.0
        chunk = cfg.chunk_rays
        for lo in range(0, r, chunk):
            hi = min(lo + chunk, r)
            # per-chunk mean scaled by chunk fraction: the sum over chunks is
            # the full-batch mean, and so are the accumulated gradients
            loss_t = self._chunk_loss(
                origins[lo:hi], dirs[lo:hi], ts[lo:hi], frames[lo:hi], gt[lo:hi],
                mmdef_m[lo:hi], aligned_m[lo:hi], enc_dir[lo:hi], alpha,
                scale=(hi - lo) / r,
            )
            ad.backward(loss_t)
            total_loss += float(loss_t.data)

        reg_w = cfg.reg_weight_at(step_idx)
        reg_val = 0.0
        if reg_w > 0 and cfg.deform_reg_samples > 0:
            reg_t = self._deform_reg_term(frames, alpha)
            scaled = ad.mul(reg_t, np.float32(reg_w))
            ad.backward(scaled)
            reg_val = float(reg_t.data)

        loss_total = total_loss + reg_w * reg_val
        if not np.isfinite(loss_total):
            self._abort(step_idx, frames, pix, gt,
                        f"non-finite loss (photometric {total_loss}, reg {reg_val})", ts=ts)

        self.optimizer.step()
        self.optimizer.zero_grad()
        p.step = step_idx + 1
        return {"loss": loss_total, "photometric": total_loss, "deform_reg": reg_val}

    def _abort(self, step_idx, frames, pix, gt, reason, ts=None):
        dump = None
        if self.dump_dir:
            dump = self.dump_dir / f"diverged_step{step_idx}.npz"
            payload = {"frames": frames, "pix": pix, "gt": gt}
            if ts is not None:
                payload["ts"] = ts
            np.savez(dump, **payload)
        raise TrainingDiverged(f"step {step_idx}: {reason}", dump_path=dump)

    def _chunk_loss(self, origins, dirs, ts, frames, gt, mmdef, aligned, enc_dir, alpha, scale):
        cfg = self.config
        p = self.pipeline
        c, s = ts.shape
        pts = (origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
        f_of_pt = np.repeat(frames, s)
        mmdef = np.ascontiguousarray(mmdef.reshape(-1, 3))
        aligned = np.ascontiguousarray(aligned.reshape(-1, 3))
        enc_pos, cond = self._residual_inputs(mmdef, aligned, f_of_pt, alpha)

        om = ad.gather_rows(p.omega, f_of_pt)
        delta, feats = p.residual.forward(enc_pos, cond, om)
        x_can = ad.add(Tensor((pts + mmdef).astype(np.float32)), delta)

        ph = ad.gather_rows(p.phi, f_of_pt)
        beta = self.beta[f_of_pt] if cfg.mode == ConditioningMode.C else None
        color, sigma = p.radiance.forward(
            x_can, None, ph, features=feats, beta=beta,
            dirs_encoded=np.repeat(enc_dir, s, axis=0),
        )

        vr = volume_render(
            ad.reshape(color, (c, s, 3)), ad.reshape(sigma, (c, s)), ts, self.far
        )
        sq = ad.square(ad.sub(vr["color"], gt.astype(np.float32)))
        return ad.mul(ad.mean(sq), np.float32(scale))

    def _deform_reg_term(self, batch_frames, alpha):
        cfg = self.config
        p = self.pipeline
        k = cfg.deform_reg_samples
        f_ids = batch_frames[self.rng.integers(0, batch_frames.shape[0], k)]
        v_ids = self.rng.integers(0, self.canonical.shape[0], k)
        x = self.posed[f_ids, v_ids]
        mmdef = self.canonical[v_ids] - x  # on-surface: no decay
        aligned = np.einsum("nij,nj->ni", self.rot_inv[f_ids], x - self.trans[f_ids])
        enc_pos, cond = self._residual_inputs(mmdef, aligned, f_ids, alpha)
        om = ad.gather_rows(p.omega, f_ids)
        delta, _ = p.residual.forward(enc_pos, cond, om)
        return deform_reg(delta)

    def eval_frame(self, frame_idx: int, seed: int = 0):
        # held-out frames never receive code gradients; render them with the
        # first frame's latents, mirroring the reanimation default
        fr = self.dataset.frames[frame_idx]
        p = self.pipeline
        out = p.render(
            fr.camera, fr.params,
            p.omega.data[0], p.phi.data[0],
            self.dataset.width, self.dataset.height, seed=seed,
            posed=fr.posed_mesh,
        )
        return metrics(out["color"], fr.image)


def train(dataset: SceneDataset, config: TrainConfig, dump_dir=None, progress=None):
    """Run the training loop; returns (pipeline, log records)."""
    trainer = _Trainer(dataset, config, dump_dir=dump_dir)
    cfg = config
    eval_ids = trainer.holdout if trainer.holdout.size else np.array([0])
    t_start = time.time()
    for step_idx in range(cfg.total_steps):
        stats = trainer.step(step_idx)
        record = {
            "step": step_idx + 1,
            "loss": stats["loss"],
            "photometric": stats["photometric"],
            "deform_reg": stats["deform_reg"],
            "lr": trainer.optimizer.schedule(step_idx),
            "alpha_window": cfg.alpha_at(step_idx),
            "psnr_eval": None,
        }
        if (step_idx + 1) % cfg.eval_every == 0 or step_idx + 1 == cfg.total_steps:
            eval_id = int(eval_ids[((step_idx + 1) // cfg.eval_every - 1) % eval_ids.size])
            record["psnr_eval"] = trainer.eval_frame(eval_id)["psnr"]
            record["eval_frame"] = eval_id
            record["elapsed_s"] = round(time.time() - t_start, 2)
        trainer.logs.append(record)
        if progress is not None:
            progress(record)
    return trainer.pipeline, trainer.logs


# ---------------------------------------------------------------------------
# held-out deformation-code optimization (the evaluation protocol)


def optimize_deform_code(
    pipeline: Pipeline,
    frame,
    iters: int = 200,
    lr: float = 1e-3,
    rays_per_iter: int = 512,
    seed: int = 0,
    init_omega: Optional[np.ndarray] = None,
    width: Optional[int] = None,
    height: Optional[int] = None,
    phi_vec: Optional[np.ndarray] = None,
):
    """Fit a deformation code for one frame by minimizing rendering error;
    every other parameter stays fixed (byte-identical before/after).

    Uses the appearance code of frame 0 unless phi_vec overrides it. Returns
    (omega, report) where report carries pre/post metrics and the loss trace.
    """
    cfg = pipeline.config
    width = width or pipeline.meta.get("width") or frame.image.shape[1]
    height = height or pipeline.meta.get("height") or frame.image.shape[0]
    phi_vec = np.asarray(
        pipeline.phi.data[0] if phi_vec is None else phi_vec, dtype=np.float32
    )
    omega_v = Tensor(
        np.zeros(cfg.code_dim, dtype=np.float32) if init_omega is None
        else np.asarray(init_omega, dtype=np.float32).copy(),
        requires_grad=True,
    )
    ctx = pipeline.context_for(frame.params, frame.posed_mesh)
    beta = pipeline.beta_cond(frame.params)
    cam = frame.camera
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))

    mask = frame.mask
    if mask is None:
        mask = face_mask(ctx.posed, cam, width, height)

    def full_metrics(omega_now):
        out = pipeline.render(cam, frame.params, omega_now, phi_vec, width, height,
                              seed=seed, posed=frame.posed_mesh)
        return metrics(out["color"], frame.image, mask)

    pre = full_metrics(omega_v.data.copy())

    coords = pixel_grid(width, height)
    gt_flat = frame.image.reshape(-1, 3)
    frozen = [t for _, t in pipeline.named_tensors()]
    saved_flags = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False
    opt = Adam([omega_v], ConstantLr(lr))
    trace = []
    try:
        for _ in range(iters):
            pick = rng.integers(0, coords.shape[0], rays_per_iter)
            origins, dirs = gen_rays(cam, coords[pick])
            gt = gt_flat[pick]
            t_coarse = stratified_samples(cfg.n_coarse, cam.near, cam.far, True, rng,
                                          count=rays_per_iter)
            sig_c = coarse_density(ctx, pipeline.radiance, origins, dirs, t_coarse, omega_v.data)
            vr_c = volume_render(np.zeros((*t_coarse.shape, 3)), sig_c, t_coarse, cam.far)
            edges = cam.near + (cam.far - cam.near) * np.arange(cfg.n_coarse + 1) / cfg.n_coarse
            t_fine = importance_samples(edges, vr_c["weights"] + _IMPORTANCE_EPS, cfg.n_fine, rng)
            ts = merge_samples(t_coarse, t_fine)

            s = ts.shape[1]
            pts = (origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
            out = deform_points(ctx, pts, omega_v)
            d_rep = np.repeat(dirs, s, axis=0)
            color, sigma = pipeline.radiance.forward(
                out["x_can"], d_rep, phi_vec, features=out["features"], beta=beta
            )
            vr = volume_render(
                ad.reshape(color, (rays_per_iter, s, 3)),
                ad.reshape(sigma, (rays_per_iter, s)), ts, cam.far,
            )
            loss = photometric_loss(vr["color"], gt)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            trace.append(float(loss.data))
    finally:
        for t, flag in zip(frozen, saved_flags):
            t.requires_grad = flag

    post = full_metrics(omega_v.data.copy())
    return omega_v.data, {"pre": pre, "post": post, "loss_trace": trace}


def evaluate_holdout(pipeline: Pipeline, dataset: SceneDataset, holdout: np.ndarray,
                     iters: int = 200, seed: int = 0, progress=None):
    """The held-out protocol: fit omega per frame, then report metrics."""
    rows = []
    for frame_idx in holdout:
        fr = dataset.frames[int(frame_idx)]
        omega_v, report = optimize_deform_code(
            pipeline, fr, iters=iters, seed=seed,
            width=dataset.width, height=dataset.height,
        )
        row = {
            "frame": int(frame_idx),
            "mse": report["post"]["mse"],
            "psnr": report["post"]["psnr"],
            "face_mse": report["post"]["face_mse"],
            "pre_mse": report["pre"]["mse"],
            "pre_psnr": report["pre"]["psnr"],
            "pre_face_mse": report["pre"]["face_mse"],
        }
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows
