"""Report artifacts: delimited metric tables and matplotlib figures.

Every reporting path writes a CSV next to its figures so results stay
machine-readable; figures are rendered with the Agg backend to plain PNGs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataio import save_png


def write_csv(rows, path, columns=None):
    """Write dict rows as CSV; None becomes an empty cell."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return path


def plot_training_curves(logs, path):
    """Loss / held-out PSNR / learning-rate curves from training records."""
    steps = [r["step"] for r in logs]
    loss = [r["loss"] for r in logs]
    eval_pts = [(r["step"], r["psnr_eval"]) for r in logs if r.get("psnr_eval") is not None]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(steps, loss, lw=0.8)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].set_title("training loss")
    if eval_pts:
        axes[1].plot(*zip(*eval_pts), marker="o", ms=3)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("PSNR [dB]")
    axes[1].set_title("held-out PSNR")
    axes[2].plot(steps, [r["lr"] for r in logs], lw=0.8, label="lr")
    ax2 = axes[2].twinx()
    ax2.plot(steps, [r["alpha_window"] for r in logs], lw=0.8, color="tab:orange", label="alpha")
    axes[2].set_xlabel("step")
    axes[2].set_ylabel("learning rate")
    ax2.set_ylabel("encoding window")
    axes[2].set_title("schedules")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_eval_metrics(rows, path):
    """Per-frame PSNR and face-region MSE before/after code optimization."""
    frames = [r["frame"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(frames, [r["pre_psnr"] for r in rows], "o--", ms=4, label="before")
    axes[0].plot(frames, [r["psnr"] for r in rows], "o-", ms=4, label="after")
    axes[0].set_xlabel("held-out frame")
    axes[0].set_ylabel("PSNR [dB]")
    axes[0].legend()
    axes[0].set_title("code optimization effect")
    pre = [r["pre_face_mse"] for r in rows]
    post = [r["face_mse"] for r in rows]
    x = np.arange(len(frames))
    width = 0.4
    axes[1].bar(x - width / 2, pre, width, label="before")
    axes[1].bar(x + width / 2, post, width, label="after")
    axes[1].set_xticks(x, [str(f) for f in frames])
    axes[1].set_xlabel("held-out frame")
    axes[1].set_ylabel("face MSE")
    axes[1].set_yscale("log")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_map_png(arr, path, cmap="viridis", vmin=None, vmax=None):
    """Colormapped PNG of a scalar map (depth, deformation magnitudes)."""
    arr = np.asarray(arr, dtype=np.float64)
    lo = np.min(arr) if vmin is None else vmin
    hi = np.max(arr) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    norm = np.clip((arr - lo) / span, 0.0, 1.0)
    rgba = matplotlib.colormaps[cmap](norm)
    save_png(rgba[..., :3], path)
    return Path(path)


def render_artifacts(out, out_dir, stem, raw: bool = False):
    """Write color + diagnostic maps for one render() result."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["color"] = out_dir / f"{stem}.png"
    save_png(out["color"], paths["color"])
    paths["depth"] = save_map_png(out["depth"], out_dir / f"{stem}_depth.png", cmap="magma")
    paths["delta"] = save_map_png(out["delta_mag"], out_dir / f"{stem}_ddelta.png")
    paths["dhat"] = save_map_png(out["dhat_mag"], out_dir / f"{stem}_dhat.png")
    if raw:
        from .dataio import save_raw

        for key in ("color", "depth", "acc", "delta_mag", "dhat_mag"):
            save_raw(out[key], out_dir / f"{stem}_{key}.raw")
    return paths
