"""Numba kernels for the two hot paths: sinusoidal features and mesh queries.

The sinusoidal features use the double-angle recursion sin(2v) = 2 sin v cos v,
cos(2v) = 1 - 2 sin^2 v, so only band 0 pays for libm calls. The closest-point
query is a branch-and-bound BVH traversal with the exact point-triangle test
from Ericson's "Real-Time Collision Detection"; ties between equidistant
triangles resolve to the lowest triangle id.
"""

from __future__ import annotations

import numpy as np
from numba import get_num_threads, get_thread_id, njit, prange

_STACK_DEPTH = 64


@njit(cache=True, parallel=True, fastmath=False)
def _fourier_fwd(x, m, w, out):
    n, k = x.shape
    for i in prange(n):
        for d in range(k):
            v = x[i, d]
            out[i, d] = v
            s = np.sin(v)
            c = np.cos(v)
            for j in range(m):
                wj = w[j]
                out[i, k + 2 * j * k + d] = wj * s
                out[i, k + (2 * j + 1) * k + d] = wj * c
                s, c = 2.0 * s * c, 1.0 - 2.0 * s * s


@njit(cache=True, parallel=True, fastmath=False)
def _fourier_bwd(g, k, m, out, gx):
    n = g.shape[0]
    for i in prange(n):
        for d in range(k):
            acc = g[i, d]
            scale = 1.0
            for j in range(m):
                sin_col = k + 2 * j * k + d
                cos_col = k + (2 * j + 1) * k + d
                # d(w sin(sx))/dx = s * (w cos(sx)); the weighted values are in out
                acc += scale * (g[i, sin_col] * out[i, cos_col] - g[i, cos_col] * out[i, sin_col])
                scale *= 2.0
            gx[i, d] = acc


def fourier_forward(x, num_bands, band_weights):
    x = np.ascontiguousarray(x)
    n, k = x.shape
    out = np.empty((n, k + 2 * k * num_bands), dtype=x.dtype)
    _fourier_fwd(x, num_bands, band_weights.astype(x.dtype), out)
    return out


def fourier_backward(g, k, num_bands, out):
    g = np.ascontiguousarray(g)
    gx = np.empty((g.shape[0], k), dtype=g.dtype)
    _fourier_bwd(g, k, num_bands, out, gx)
    return gx


# ---------------------------------------------------------------------------
# exact closest point on a triangle (Ericson), returning barycentrics


@njit(cache=True, inline="always")
def _closest_on_triangle(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az

    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 1.0, 0.0, 0.0

    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 0.0, 1.0, 0.0

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, 1.0 - v, v, 0.0

    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 0.0, 0.0, 1.0

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, 1.0 - w, 0.0, w

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (
            bx + w * (cx - bx),
            by + w * (cy - by),
            bz + w * (cz - bz),
            0.0,
            1.0 - w,
            w,
        )

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        ax + abx * v + acx * w,
        ay + aby * v + acy * w,
        az + abz * v + acz * w,
        1.0 - v - w,
        v,
        w,
    )


@njit(cache=True, inline="always")
def _query_one(
    root, boxes, left, right, start, count, tri_order, tri_verts,
    px, py, pz, stack, out_point, out_bary, qi,
):
    """Branch-and-bound traversal, visiting the nearer child first and
    pruning any box farther than the best squared distance so far."""
    best_d2 = np.inf
    best_tri = -1
    top = 0
    stack[top] = root
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        dx = max(boxes[node, 0] - px, 0.0, px - boxes[node, 3])
        dy = max(boxes[node, 1] - py, 0.0, py - boxes[node, 4])
        dz = max(boxes[node, 2] - pz, 0.0, pz - boxes[node, 5])
        if dx * dx + dy * dy + dz * dz > best_d2:
            continue
        c = count[node]
        if c > 0:
            s = start[node]
            for t in range(s, s + c):
                tri = tri_order[t]
                base = tri * 9
                qx, qy, qz, u, v, w = _closest_on_triangle(
                    tri_verts[base + 0], tri_verts[base + 1], tri_verts[base + 2],
                    tri_verts[base + 3], tri_verts[base + 4], tri_verts[base + 5],
                    tri_verts[base + 6], tri_verts[base + 7], tri_verts[base + 8],
                    px, py, pz,
                )
                ex, ey, ez = px - qx, py - qy, pz - qz
                d2 = ex * ex + ey * ey + ez * ez
                if d2 < best_d2 or (d2 == best_d2 and tri < best_tri):
                    best_d2 = d2
                    best_tri = tri
                    out_point[qi, 0] = qx
                    out_point[qi, 1] = qy
                    out_point[qi, 2] = qz
                    out_bary[qi, 0] = u
                    out_bary[qi, 1] = v
                    out_bary[qi, 2] = w
        else:
            l, r = left[node], right[node]
            dlx = max(boxes[l, 0] - px, 0.0, px - boxes[l, 3])
            dly = max(boxes[l, 1] - py, 0.0, py - boxes[l, 4])
            dlz = max(boxes[l, 2] - pz, 0.0, pz - boxes[l, 5])
            drx = max(boxes[r, 0] - px, 0.0, px - boxes[r, 3])
            dry = max(boxes[r, 1] - py, 0.0, py - boxes[r, 4])
            drz = max(boxes[r, 2] - pz, 0.0, pz - boxes[r, 5])
            dl = dlx * dlx + dly * dly + dlz * dlz
            dr = drx * drx + dry * dry + drz * drz
            if dl <= dr:
                if dr <= best_d2:
                    stack[top] = r
                    top += 1
                stack[top] = l
                top += 1
            else:
                if dl <= best_d2:
                    stack[top] = l
                    top += 1
                stack[top] = r
                top += 1
    return best_d2, best_tri


@njit(parallel=True)
def bvh_query_batch(
    boxes, left, right, start, count, tri_order, tri_verts, queries,
    out_point, out_bary, out_tri, out_dist,
):
    stacks = np.empty((get_num_threads(), _STACK_DEPTH), dtype=np.int64)
    for qi in prange(queries.shape[0]):
        d2, tri = _query_one(
            0, boxes, left, right, start, count, tri_order, tri_verts,
            queries[qi, 0], queries[qi, 1], queries[qi, 2],
            stacks[get_thread_id()], out_point, out_bary, qi,
        )
        out_tri[qi] = tri
        out_dist[qi] = np.sqrt(d2)


@njit(parallel=True)
def bvh_query_stacked(
    boxes, left, right, start, count, tri_order, tri_verts,
    node_offset, tri_id_offset, accel_ids, queries,
    out_point, out_bary, out_tri, out_dist,
):
    """Query many points, each against its own accel, all packed into one
    flat node array. Triangle ids come back local to the owning accel."""
    stacks = np.empty((get_num_threads(), _STACK_DEPTH), dtype=np.int64)
    for qi in prange(queries.shape[0]):
        aid = accel_ids[qi]
        d2, tri = _query_one(
            node_offset[aid], boxes, left, right, start, count,
            tri_order, tri_verts,
            queries[qi, 0], queries[qi, 1], queries[qi, 2],
            stacks[get_thread_id()], out_point, out_bary, qi,
        )
        out_tri[qi] = tri - tri_id_offset[aid]
        out_dist[qi] = np.sqrt(d2)


@njit(cache=True, parallel=True)
def rays_hit_mesh(origins, dirs, tri_verts, eps, out_hit):
    """Watertight-enough any-hit test: does each ray hit any triangle at t > eps."""
    n_tri = tri_verts.shape[0] // 9
    for ri in prange(origins.shape[0]):
        ox, oy, oz = origins[ri, 0], origins[ri, 1], origins[ri, 2]
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        hit = False
        for tri in range(n_tri):
            base = tri * 9
            ax, ay, az = tri_verts[base], tri_verts[base + 1], tri_verts[base + 2]
            e1x, e1y, e1z = tri_verts[base + 3] - ax, tri_verts[base + 4] - ay, tri_verts[base + 5] - az
            e2x, e2y, e2z = tri_verts[base + 6] - ax, tri_verts[base + 7] - ay, tri_verts[base + 8] - az
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if -1e-12 < det < 1e-12:
                continue
            inv = 1.0 / det
            tx, ty, tz = ox - ax, oy - ay, oz - az
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if t > eps:
                hit = True
                break
        out_hit[ri] = hit
