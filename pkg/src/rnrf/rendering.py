"""Ray sampling, volume-rendering quadrature, and image rendering.

Hierarchical sampling: a stratified coarse pass provides quadrature weights,
an inverse-CDF importance pass refines where the weight mass is, and the
merged sample set is shaded once through the deformation + radiance networks.
Rendering is tiled; every tile draws its jitter from a seed-derived stream,
so images are bit-reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera, gen_rays, pixel_grid
from .deformation import DeformContext, deform_points
from .errors import ParameterError

_ACC_EPS = 1e-10
_IMPORTANCE_EPS = 1e-5


@dataclass(frozen=True)
class SampleOptions:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = True
    tile_rays: int = 4096

    @property
    def samples_per_ray(self) -> int:
        return self.n_coarse + self.n_fine


def stratified_samples(n: int, near: float, far: float, jitter: bool, rng=None, count: int = 1):
    """(count, n) strictly increasing depths; bin midpoints when not jittered."""
    if n < 1:
        raise ParameterError("need at least one sample per ray")
    if not near < far:
        raise ParameterError("near must be < far")
    if jitter:
        if rng is None:
            raise ParameterError("jittered sampling needs an rng")
        u = rng.random((count, n))
    else:
        u = np.full((count, n), 0.5)
    i = np.arange(n)
    return near + (i + u) * ((far - near) / n)


def importance_samples(edges: np.ndarray, weights: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw n depths per ray from the piecewise-constant density given by
    weights over bins bounded by edges. edges: (R, B+1) or (B+1,);
    weights: (R, B). Samples come back sorted per ray."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[None, :]
    r, b = weights.shape
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim == 1:
        edges = np.broadcast_to(edges, (r, b + 1))
    if edges.shape != (r, b + 1):
        raise ParameterError(f"edges shape {edges.shape} does not match weights {weights.shape}")
    if not np.isfinite(weights).all():
        raise ParameterError("importance weights must be finite")
    if weights.min() < 0:
        raise ParameterError("importance weights must be nonnegative")
    total = weights.sum(axis=1)
    if np.any(total <= 0):
        raise ParameterError("importance weights must not be all zero")

    pdf = weights / total[:, None]
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0  # close the last bin against roundoff
    u = rng.random((r, n))
    idx = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), b - 1)
    rows = np.arange(r)[:, None]
    cdf_lo = np.where(idx > 0, np.take_along_axis(np.pad(cdf, ((0, 0), (1, 0))), idx, axis=1), 0.0)
    frac = (u - cdf_lo) / np.maximum(np.take_along_axis(pdf, idx, axis=1), 1e-12)
    lo = np.take_along_axis(edges, idx, axis=1)
    hi = np.take_along_axis(edges, idx + 1, axis=1)
    t = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    return np.sort(t, axis=1)


def merge_samples(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([a, b], axis=1), axis=1)


def volume_render(colors, sigmas, ts: np.ndarray, far_cap):
    """Front-to-back compositing over per-ray samples.

    colors: (R, S, 3); sigmas: (R, S); ts: (R, S) strictly increasing;
    far_cap: scalar or (R,) closing the last interval. Accepts Tensors for
    colors/sigmas (differentiable path) or plain arrays. Returns a dict with
    color (R, 3), acc (R,), weights (R, S), and, on the array path, depth.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2:
        raise ParameterError("sample depths must be (R, S)")
    if np.any(np.diff(ts, axis=1) <= 0):
        raise ParameterError("sample depths must be strictly increasing along each ray")
    far_cap = np.asarray(far_cap, dtype=np.float64)
    last = np.full((ts.shape[0], 1), float(far_cap)) if far_cap.ndim == 0 else far_cap[:, None]
    if np.any(last[:, 0] < ts[:, -1]):
        raise ParameterError("far_cap must not precede the last sample")
    deltas = np.concatenate([np.diff(ts, axis=1), last - ts[:, -1:]], axis=1)

    if isinstance(colors, Tensor) or isinstance(sigmas, Tensor):
        sig = sigmas if isinstance(sigmas, Tensor) else Tensor(sigmas)
        col = colors if isinstance(colors, Tensor) else Tensor(colors)
        d = deltas.astype(sig.dtype)
        tau = ad.mul(sig, d)
        trans = ad.exp(ad.neg(ad.cumsum_exclusive(tau, axis=1)))
        alpha = ad.sub(np.asarray(1.0, dtype=sig.dtype), ad.exp(ad.neg(tau)))
        weights = ad.mul(trans, alpha)
        w3 = ad.reshape(weights, (*deltas.shape, 1))
        color = ad.sum_(ad.mul(w3, col), axis=1)
        acc = ad.sum_(weights, axis=1)
        return {"color": color, "acc": acc, "weights": weights}

    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    tau = sigmas * deltas
    trans = np.exp(-np.cumsum(np.concatenate([np.zeros((ts.shape[0], 1)), tau[:, :-1]], axis=1), axis=1))
    alpha = 1.0 - np.exp(-tau)
    weights = trans * alpha
    color = (weights[:, :, None] * colors).sum(axis=1)
    acc = weights.sum(axis=1)
    depth = (weights * ts).sum(axis=1) / np.maximum(acc, _ACC_EPS)
    return {"color": color, "acc": acc, "weights": weights, "depth": depth}


# ---------------------------------------------------------------------------
# field evaluation over rays


def render_rays(
    ctx: DeformContext,
    radiance,
    origins: np.ndarray,
    dirs: np.ndarray,
    omega: np.ndarray,
    phi: np.ndarray,
    near: float,
    far: float,
    rng,
    opts: SampleOptions,
    beta_cond: np.ndarray,
):
    """Non-differentiable full render of a ray batch (used by image rendering
    and evaluation). Returns color, depth, acc, and the weighted |residual|
    and |total deformation| ray statistics."""
    r = origins.shape[0]
    t_coarse = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng, count=r)
    with ad.no_grad():
        sig_c = coarse_density(ctx, radiance, origins, dirs, t_coarse, omega)
        if opts.n_fine > 0:
            vr_c = volume_render(np.zeros((*t_coarse.shape, 3)), sig_c, t_coarse, far)
            edges = near + (far - near) * np.arange(opts.n_coarse + 1) / opts.n_coarse
            w = vr_c["weights"] + _IMPORTANCE_EPS
            t_fine = importance_samples(edges, w, opts.n_fine, rng)
            ts = merge_samples(t_coarse, t_fine)
        else:
            ts = t_coarse

        pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        d_flat = np.repeat(dirs, ts.shape[1], axis=0)
        out = deform_points(ctx, flat, omega)
        color, sigma = radiance.forward(
            out["x_can"], d_flat, phi, features=out["features"], beta=beta_cond
        )
        color = color.data if isinstance(color, Tensor) else color
        sigma = sigma.data if isinstance(sigma, Tensor) else sigma

    s = ts.shape[1]
    vr = volume_render(color.reshape(r, s, 3).astype(np.float64),
                       sigma.reshape(r, s).astype(np.float64), ts, far)
    wgt = vr["weights"]
    acc = vr["acc"]
    delta_mag = np.linalg.norm(out["delta"], axis=1).reshape(r, s)
    dhat_mag = np.linalg.norm(out["mmdef"] + out["delta"].astype(np.float64), axis=1).reshape(r, s)
    denom = np.maximum(acc, _ACC_EPS)
    return {
        "color": vr["color"],
        "depth": vr["depth"],
        "acc": acc,
        "delta_mag": (wgt * delta_mag).sum(axis=1) / denom,
        "dhat_mag": (wgt * dhat_mag).sum(axis=1) / denom,
    }


def coarse_density(ctx, radiance, origins, dirs, ts, omega):
    """Density at stratified depths, for importance sampling. Never taped."""
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    with ad.no_grad():
        out = deform_points(ctx, pts.reshape(-1, 3), omega)
        sig = radiance.density(_plain(out["x_can"]).astype(radiance.dtype))
    return _plain(sig).reshape(ts.shape).astype(np.float64)


def _plain(x):
    return x.data if isinstance(x, Tensor) else x


def render_image(
    ctx: DeformContext,
    radiance,
    camera: Camera,
    omega: np.ndarray,
    phi: np.ndarray,
    width: int,
    height: int,
    opts: SampleOptions,
    seed: int,
    beta_cond: np.ndarray,
):
    """Tile-parallelizable deterministic render; returns float images."""
    coords = pixel_grid(width, height)
    n = coords.shape[0]
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    acc = np.zeros(n)
    dmag = np.zeros(n)
    dhat = np.zeros(n)
    tile = opts.tile_rays
    for ti, lo in enumerate(range(0, n, tile)):
        hi = min(lo + tile, n)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ti,)))
        origins, dirs = gen_rays(camera, coords[lo:hi])
        out = render_rays(ctx, radiance, origins, dirs, omega, phi,
                          camera.near, camera.far, rng, opts, beta_cond)
        color[lo:hi] = out["color"]
        depth[lo:hi] = out["depth"]
        acc[lo:hi] = out["acc"]
        dmag[lo:hi] = out["delta_mag"]
        dhat[lo:hi] = out["dhat_mag"]
    return {
        "color": color.reshape(height, width, 3),
        "depth": depth.reshape(height, width),
        "acc": acc.reshape(height, width),
        "delta_mag": dmag.reshape(height, width),
        "dhat_mag": dhat.reshape(height, width),
    }
