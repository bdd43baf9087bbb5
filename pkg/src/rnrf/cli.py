"""Command-line front end: synth / train / render / reanimate / eval /
inspect / serve.

RNRF_THREADS caps worker threads (BLAS and kernel pools); it must be read
before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _setup_threads():
    n = os.environ.get("RNRF_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rnrf",
        description="Controllable neural 3D portrait: train and drive a "
                    "morphable-model-guided deformable radiance field.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic portrait dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--frames", type=int, default=150)
    s.add_argument("--size", type=int, default=64, help="image width/height in pixels")
    s.add_argument("--exp-dims", type=int, default=10, help="expression coefficient count")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--supersample", type=int, default=2, help="oracle antialiasing factor")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    t.add_argument("--steps", type=int, default=20000)
    t.add_argument("--mode", choices=["A", "B", "C"], default="C",
                   help="conditioning configuration (C = full model)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rays", type=int, default=1550, help="rays per batch")
    t.add_argument("--samples", type=int, default=128, help="samples per ray (coarse+fine)")
    t.add_argument("--holdout", type=int, default=10, help="frames held out from training")
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--lr0", type=float, default=5e-4)
    t.add_argument("--lr1", type=float, default=5e-5)
    t.add_argument("--deform-reg", type=float, default=1e-3)
    t.add_argument("--full-scale", action="store_true",
                   help="full-size networks and 150k steps (GPU-scale; impractical on CPU)")
    t.add_argument("--deform-width", type=int, default=None)
    t.add_argument("--deform-depth", type=int, default=None)
    t.add_argument("--radiance-width", type=int, default=None)
    t.add_argument("--radiance-depth", type=int, default=None)
    t.add_argument("--quiet", action="store_true")

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ck", required=True, help="checkpoint file or its directory")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--params", default="zero",
                   help="head parameters: 'zero', 'frame:N', or a JSON file")
    r.add_argument("--camera", default="frame:0",
                   help="camera: 'frame:N', 'orbit:AZ,EL,RADIUS', or a JSON file")
    r.add_argument("--data", default=None, help="dataset (needed for frame: references)")
    r.add_argument("--size", type=int, default=None, help="override render resolution")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--raw", action="store_true", help="also write float32 raw dumps")
    r.add_argument("--stem", default="render", help="output filename stem")

    a = sub.add_parser("reanimate", help="render a driving parameter sequence")
    a.add_argument("--ck", required=True)
    a.add_argument("--drive", required=True, help="JSON driving sequence file")
    a.add_argument("--out", required=True)
    a.add_argument("--size", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="held-out metrics after deformation-code fitting")
    e.add_argument("--ck", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--holdout", type=int, default=10)
    e.add_argument("--iters", type=int, default=200, help="code-fitting iterations per frame")
    e.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inspect", help="depth and deformation-magnitude maps")
    i.add_argument("--ck", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--data", default=None)
    i.add_argument("--frame", type=int, default=None, help="dataset frame to inspect")
    i.add_argument("--params", default=None, help="'zero', 'frame:N', or JSON file")
    i.add_argument("--camera", default="frame:0")
    i.add_argument("--size", type=int, default=None)
    i.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("serve", help="interactive render service over HTTP")
    v.add_argument("--ck", required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8765)
    return p


def main(argv=None) -> int:
    _setup_threads()
    args = build_parser().parse_args(argv)
    from .errors import LoadError, MeshError, ParameterError, TrainingDiverged

    try:
        return _dispatch(args)
    except (LoadError, ParameterError, MeshError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if os.environ.get("RNRF_THREADS"):
        import numba

        numba.set_num_threads(max(1, int(os.environ["RNRF_THREADS"])))
    handler = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "render": _cmd_render,
        "reanimate": _cmd_reanimate,
        "eval": _cmd_eval,
        "inspect": _cmd_inspect,
        "serve": _cmd_serve,
    }[args.command]
    return handler(args)


def _cmd_synth(args) -> int:
    from .dataio import synth_scene
    from .synth import SynthSpec

    spec = SynthSpec(
        n_frames=args.frames, width=args.size, height=args.size,
        num_exp=args.exp_dims, seed=args.seed, supersample=args.supersample,
    )
    ds = synth_scene(spec, args.out)
    print(f"wrote {ds.num_frames} frames at {ds.width}x{ds.height} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    import numpy as np

    from .dataio import load_dataset
    from .radiance import ConditioningMode
    from .report import plot_training_curves, write_csv
    from .training import TrainConfig, save_checkpoint, train

    ds = load_dataset(args.data)
    kw = dict(
        total_steps=args.steps, mode=ConditioningMode(args.mode), seed=args.seed,
        rays_per_batch=args.rays, samples_per_ray=args.samples,
        holdout=args.holdout, eval_every=args.eval_every,
        lr0=args.lr0, lr1=args.lr1, deform_reg_weight=args.deform_reg,
    )
    for flag, key in (("deform_width", "residual_width"), ("deform_depth", "residual_depth"),
                      ("radiance_width", "radiance_width"), ("radiance_depth", "radiance_depth")):
        val = getattr(args, flag)
        if val is not None:
            kw[key] = val
    config = TrainConfig.full_scale(**kw) if args.full_scale else TrainConfig(**kw)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.ndjson"
    print(f"training {config.total_steps} steps on {ds.num_frames} frames "
          f"({config.rays_per_batch} rays x {config.samples_per_ray} samples, "
          f"mode {config.mode.value})")

    log_f = open(log_path, "w", encoding="utf-8")

    def progress(rec):
        log_f.write(json.dumps(rec, sort_keys=True) + "\n")
        if rec.get("psnr_eval") is not None:
            log_f.flush()
            if not args.quiet:
                print(f"  step {rec['step']:>6}  loss {rec['loss']:.5f}  "
                      f"holdout psnr {rec['psnr_eval']:.2f} dB  lr {rec['lr']:.2e}")

    try:
        pipeline, logs = train(ds, config, dump_dir=out, progress=progress)
    finally:
        log_f.close()
    ck_path = out / "checkpoint.rnck"
    save_checkpoint(ck_path, pipeline)
    plot_training_curves(logs, out / "curves.png")
    write_csv(
        [r for r in logs if r.get("psnr_eval") is not None],
        out / "eval_log.csv",
        columns=["step", "loss", "psnr_eval", "eval_frame", "lr", "alpha_window", "elapsed_s"],
    )
    print(f"checkpoint: {ck_path}")
    return 0


def _find_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.rnck"
    return p


def _resolve_params(spec, pipeline, dataset):
    import numpy as np

    from .errors import ParameterError
    from .headmodel import HeadParams

    num_exp = pipeline.model.num_exp
    if spec is None or spec == "zero":
        return HeadParams.zeros(num_exp)
    if spec.startswith("frame:"):
        idx = int(spec.split(":", 1)[1])
        if dataset is None:
            raise ParameterError("frame: parameter references need --data")
        return dataset.frames[idx].params
    with open(spec, "r", encoding="utf-8") as f:
        return HeadParams.from_dict(json.load(f))


def _resolve_camera(spec, pipeline, dataset):
    from .camera import Camera, orbit_camera
    from .errors import ParameterError

    if spec.startswith("frame:"):
        idx = int(spec.split(":", 1)[1])
        if dataset is not None:
            return dataset.frames[idx].camera
        if idx == 0 and "default_camera" in pipeline.meta:
            return Camera.from_dict(pipeline.meta["default_camera"])
        raise ParameterError("frame: camera references need --data")
    if spec.startswith("orbit:"):
        try:
            az, el, radius = (float(x) for x in spec.split(":", 1)[1].split(","))
        except ValueError as exc:
            raise ParameterError(f"bad orbit camera spec {spec!r}: {exc}") from exc
        base = pipeline.meta.get("default_camera")
        if base:
            cam = Camera.from_dict(base)
            return orbit_camera(az, el, radius, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                                near=cam.near, far=cam.far)
        return orbit_camera(az, el, radius)
    with open(spec, "r", encoding="utf-8") as f:
        return Camera.from_dict(json.load(f))


def _load_for_render(args):
    from .dataio import load_dataset
    from .training import load_checkpoint

    dataset = load_dataset(args.data) if getattr(args, "data", None) else None
    pipeline = load_checkpoint(_find_checkpoint(args.ck))
    size = args.size or pipeline.meta.get("width") or 64
    return pipeline, dataset, int(size)


def _cmd_render(args) -> int:
    import numpy as np

    from .report import render_artifacts

    pipeline, dataset, size = _load_for_render(args)
    params = _resolve_params(args.params, pipeline, dataset)
    camera = _resolve_camera(args.camera, pipeline, dataset)
    omega = pipeline.omega.data[0]
    phi = pipeline.phi.data[0]
    if args.params.startswith("frame:") and dataset is not None:
        idx = int(args.params.split(":", 1)[1])
        omega = pipeline.omega.data[idx]
        phi = pipeline.phi.data[idx]
    out = pipeline.render(camera, params, omega, phi, size, size, seed=args.seed)
    paths = render_artifacts(out, args.out, args.stem, raw=args.raw)
    print("\n".join(str(p) for p in paths.values()))
    return 0


def _cmd_reanimate(args) -> int:
    import numpy as np

    from .errors import LoadError
    from .headmodel import HeadParams
    from .camera import Camera
    from .report import render_artifacts

    pipeline, _, size = _load_for_render(args)
    with open(args.drive, "r", encoding="utf-8") as f:
        drive = json.load(f)
    records = drive["frames"] if isinstance(drive, dict) else drive
    if not records:
        raise LoadError(f"{args.drive}: no frames in driving sequence")
    # reanimation reuses the first training frame's latent codes
    omega = pipeline.omega.data[0]
    phi = pipeline.phi.data[0]
    default_cam = Camera.from_dict(pipeline.meta["default_camera"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        params = HeadParams.from_dict(rec)
        cam = Camera.from_dict(rec["camera"]) if "camera" in rec else default_cam
        out = pipeline.render(cam, params, omega, phi, size, size, seed=args.seed)
        render_artifacts(out, out_dir, f"frame_{i:04d}")
    print(f"wrote {len(records)} frames to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .dataio import holdout_indices, load_dataset
    from .report import plot_eval_metrics, write_csv
    from .training import evaluate_holdout, load_checkpoint

    dataset = load_dataset(args.data)
    pipeline = load_checkpoint(_find_checkpoint(args.ck))
    if pipeline.meta.get("model_hash") and pipeline.meta["model_hash"] != dataset.model_hash:
        print("warning: checkpoint was trained against a different morphable model",
              file=sys.stderr)
    holdout = holdout_indices(dataset.num_frames, args.holdout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"  frame {row['frame']:>4}  psnr {row['pre_psnr']:6.2f} -> {row['psnr']:6.2f} dB"
              f"  face mse {row['pre_face_mse']:.2e} -> {row['face_mse']:.2e}")

    rows = evaluate_holdout(pipeline, dataset, holdout, iters=args.iters,
                            seed=args.seed, progress=progress)
    write_csv(rows, out / "metrics.csv",
              columns=["frame", "mse", "psnr", "face_mse", "pre_mse", "pre_psnr", "pre_face_mse"])
    plot_eval_metrics(rows, out / "metrics.png")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_face = float(np.mean([r["face_mse"] for r in rows]))
    print(f"held-out mean: PSNR {mean_psnr:.2f} dB, FaceMSE {mean_face:.3e} "
          f"({len(rows)} frames, {args.iters} fitting iterations)")
    return 0


def _cmd_inspect(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    from .report import render_artifacts

    pipeline, dataset, size = _load_for_render(args)
    if args.frame is not None:
        if dataset is None:
            from .errors import ParameterError

            raise ParameterError("--frame needs --data")
        fr = dataset.frames[args.frame]
        params, camera = fr.params, fr.camera
        omega = pipeline.omega.data[args.frame]
        phi = pipeline.phi.data[args.frame]
    else:
        params = _resolve_params(args.params, pipeline, dataset)
        camera = _resolve_camera(args.camera, pipeline, dataset)
        omega, phi = pipeline.omega.data[0], pipeline.phi.data[0]
    out = pipeline.render(camera, params, omega, phi, size, size, seed=args.seed)
    out_dir = Path(args.out)
    paths = render_artifacts(out, out_dir, "inspect", raw=True)

    fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
    panels = [("color", out["color"], None), ("depth", out["depth"], "magma"),
              ("|residual|", out["delta_mag"], "viridis"),
              ("|total deformation|", out["dhat_mag"], "viridis")]
    for ax, (title, img, cmap) in zip(axes, panels):
        im = ax.imshow(img, cmap=cmap)
        ax.set_title(title)
        ax.axis("off")
        if cmap:
            fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_dir / "inspect_panels.png", dpi=110)
    plt.close(fig)
    print("\n".join(str(p) for p in paths.values()))
    print(out_dir / "inspect_panels.png")
    return 0


def _cmd_serve(args) -> int:
    from .service import serve
    from .training import load_checkpoint

    pipeline = load_checkpoint(_find_checkpoint(args.ck))
    serve(pipeline, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
