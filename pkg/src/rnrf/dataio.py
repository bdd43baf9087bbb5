"""Dataset manifests, image codecs, and the synthetic-scene writer.

A dataset directory holds a JSON manifest, the morphable model container,
and one PNG per frame. Loading is atomic: any missing asset or schema
violation raises a LoadError naming the offending frame. Scenes are
normalized so the canonical head has bounding radius 1 about the origin;
the transform applied is recorded in the manifest and on the dataset.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import LoadError, ParameterError
from .headmodel import (
    BlendshapeModel,
    HeadParams,
    TriMesh,
    load_model,
    load_obj,
    save_model,
)
from .synth import SynthSpec, frame_trajectory, make_head_model, render_frame

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "rnrf-dataset"
MANIFEST_VERSION = 1
RAW_MAGIC = b"RNFD"
_RADIUS_TOL = 1e-6


# ---------------------------------------------------------------------------
# image codecs


def save_png(img: np.ndarray, path):
    """8-bit PNG from float [0,1] (RGB or gray) or bool arrays."""
    img = np.asarray(img)
    if img.dtype == np.bool_:
        data = (img.astype(np.uint8)) * 255
        mode = "L"
    else:
        data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        mode = "RGB" if data.ndim == 3 else "L"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def save_raw(img: np.ndarray, path):
    """Float32 dump: magic, u32 width/height/channels, then row-major data."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(img.astype("<f4").tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RAW_MAGIC:
            raise LoadError(f"{path}: bad raw-dump magic {magic!r}")
        w, h, c = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != w * h * c:
        raise LoadError(f"{path}: raw dump size mismatch")
    return data.reshape(h, w, c).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset types


@dataclass
class FrameRecord:
    index: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    camera: Camera
    params: HeadParams
    image_path: str
    mask: Optional[np.ndarray] = None
    posed_mesh: Optional[TriMesh] = None


@dataclass
class SceneDataset:
    model: BlendshapeModel
    frames: list
    width: int
    height: int
    root: Path
    model_hash: str
    normalization: dict = field(default_factory=lambda: {"center": [0.0, 0.0, 0.0], "scale": 1.0})

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def beta_matrix(self) -> np.ndarray:
        return np.stack([f.params.beta_exp for f in self.frames])

    def pose_matrix(self) -> np.ndarray:
        return np.stack([f.params.pose7 for f in self.frames])


def holdout_indices(n_frames: int, k: int) -> np.ndarray:
    """k evenly spaced frame indices reserved for evaluation."""
    if not 0 <= k < n_frames:
        raise ParameterError("holdout size must be in [0, n_frames)")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.linspace(0, n_frames - 1, k).round().astype(np.int64))


# ---------------------------------------------------------------------------
# manifest io


def save_dataset(dataset: SceneDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_model(dataset.model, out / "model.rnrf")
    frames_meta = []
    for fr in dataset.frames:
        rel = f"frames/frame_{fr.index:04d}.png"
        save_png(fr.image, out / rel)
        meta = {
            "index": fr.index,
            "image": rel,
            "camera": fr.camera.to_dict(),
            "params": fr.params.to_dict(),
        }
        if fr.mask is not None:
            mrel = f"frames/mask_{fr.index:04d}.png"
            save_png(fr.mask, out / mrel)
            meta["mask"] = mrel
        frames_meta.append(meta)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "model": "model.rnrf",
        "width": dataset.width,
        "height": dataset.height,
        "normalization": dataset.normalization,
        "frames": frames_meta,
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out / MANIFEST_NAME


def load_dataset(path) -> SceneDataset:
    """Load a dataset from a manifest path or its directory."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest_path.parent
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as exc:
        raise LoadError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    if manifest.get("format") != MANIFEST_FORMAT:
        raise LoadError(f"{manifest_path}: not an {MANIFEST_FORMAT} manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise LoadError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    for key in ("model", "width", "height", "frames"):
        if key not in manifest:
            raise LoadError(f"{manifest_path}: missing required key '{key}'")

    model_path = root / manifest["model"]
    if not model_path.exists():
        raise LoadError(f"{manifest_path}: model file {model_path} does not exist")
    model = load_model(model_path)
    model_hash = hashlib.sha256(model_path.read_bytes()).hexdigest()

    width, height = int(manifest["width"]), int(manifest["height"])
    frames = []
    for i, meta in enumerate(manifest["frames"]):
        label = f"frame {meta.get('index', i)}"
        try:
            index = int(meta["index"])
            image_rel = meta["image"]
            cam = Camera.from_dict(meta["camera"])
            params = HeadParams.from_dict(meta["params"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{manifest_path}: {label}: bad record: {exc}") from exc
        img_path = root / image_rel
        if not img_path.exists():
            raise LoadError(f"{manifest_path}: {label}: missing image {img_path}")
        img = load_png(img_path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise LoadError(f"{manifest_path}: {label}: image must be RGB")
        if img.shape[0] != height or img.shape[1] != width:
            raise LoadError(
                f"{manifest_path}: {label}: image is {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {width}x{height}"
            )
        if params.beta_exp.shape[0] != model.num_exp:
            raise LoadError(
                f"{manifest_path}: {label}: {params.beta_exp.shape[0]} expression "
                f"coefficients, model has {model.num_exp}"
            )
        mask = None
        if "mask" in meta:
            mask_path = root / meta["mask"]
            if not mask_path.exists():
                raise LoadError(f"{manifest_path}: {label}: missing mask {mask_path}")
            mask = load_png(mask_path) > 0.5
        posed = None
        if "posed_mesh" in meta:
            mesh_path = root / meta["posed_mesh"]
            if not mesh_path.exists():
                raise LoadError(f"{manifest_path}: {label}: missing posed mesh {mesh_path}")
            posed = load_obj(mesh_path)
            if posed.num_vertices != model.template.num_vertices:
                raise LoadError(f"{manifest_path}: {label}: posed mesh vertex count mismatch")
        frames.append(FrameRecord(index=index, image=img, camera=cam, params=params,
                                  image_path=str(img_path), mask=mask, posed_mesh=posed))

    indices = sorted(f.index for f in frames)
    if indices != list(range(len(frames))):
        raise LoadError(f"{manifest_path}: frame indices must be dense 0..N-1, got {indices[:8]}...")
    frames.sort(key=lambda f: f.index)

    dataset = SceneDataset(
        model=model, frames=frames, width=width, height=height, root=root,
        model_hash=model_hash,
        normalization=manifest.get("normalization", {"center": [0, 0, 0], "scale": 1.0}),
    )
    _normalize(dataset)
    return dataset


def _normalize(dataset: SceneDataset):
    """Rescale/recenter so the canonical head has bounding radius 1."""
    t = dataset.model.template
    center = t.vertices.mean(axis=0)
    radius = np.linalg.norm(t.vertices - center, axis=1).max()
    if abs(radius - 1.0) <= _RADIUS_TOL and np.abs(center).max() <= _RADIUS_TOL:
        return
    s = 1.0 / radius
    model = dataset.model
    new_template = TriMesh(vertices=(t.vertices - center) * s, triangles=t.triangles)
    dataset.model = BlendshapeModel(
        template=new_template,
        exp_basis=model.exp_basis * s,
        jaw_pivot=(model.jaw_pivot - center) * s,
        jaw_axis=model.jaw_axis,
        jaw_weights=model.jaw_weights,
    )
    for fr in dataset.frames:
        cam = fr.camera
        fr.camera = Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            rotation=cam.rotation, origin=(cam.origin - center) * s,
            near=cam.near * s, far=cam.far * s,
        )
        p = fr.params
        # posing acts on recentered vertices: R v + t = R v' + (R c + t - c)
        from .headmodel import axis_angle_matrix

        rot = axis_angle_matrix(p.rotation)
        fr.params = HeadParams(
            beta_exp=p.beta_exp, rotation=p.rotation,
            translation=(rot @ center + p.translation - center) * s, jaw=p.jaw,
        )
        if fr.posed_mesh is not None:
            fr.posed_mesh = TriMesh(
                vertices=(fr.posed_mesh.vertices - center) * s,
                triangles=fr.posed_mesh.triangles,
            )
    dataset.normalization = {
        "center": center.tolist(),
        "scale": s,
    }


# ---------------------------------------------------------------------------
# synthetic generation


def synth_scene(spec: SynthSpec, out_dir) -> SceneDataset:
    """Generate, render, and write a synthetic dataset; returns it loaded."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(7,)))
    model = make_head_model(num_exp=spec.num_exp, subdivisions=spec.subdivisions, seed=spec.seed)
    frames = []
    for i, (cam, params) in enumerate(frame_trajectory(spec, rng)):
        img = render_frame(model, params, cam, spec).astype(np.float32)
        frames.append(FrameRecord(index=i, image=img, camera=cam, params=params, image_path=""))
    dataset = SceneDataset(
        model=model, frames=frames, width=spec.width, height=spec.height,
        root=Path(out_dir), model_hash="",
    )
    manifest = save_dataset(dataset, out_dir)
    return load_dataset(manifest)
