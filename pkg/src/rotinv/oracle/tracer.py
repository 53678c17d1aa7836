"""Brute-force Monte Carlo path tracer over analytic quads and spheres.

Written against the same reflectance model as the shading module but
sharing none of its code: intersection, BRDF, environment lookup, sampling
and the random-number hash are all re-implemented here in numba.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .. import bvh as _threading_setup  # noqa: F401  (selects a numba threading layer)
from ..core import Camera
from .scenes import PATTERN_FLOOR, SceneDescription

_F0 = 0.04
_EPS = 1e-6


# --------------------------------------------------------------------------
# random numbers: splitmix64 chain over (seed, a, b, c, d)


@nb.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _rand(seed, a, b, c, d):
    h = _mix(np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15))
    h = _mix(h ^ np.uint64(a))
    h = _mix(h ^ np.uint64(b))
    h = _mix(h ^ np.uint64(c))
    h = _mix(h ^ np.uint64(d))
    return float(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# geometry


@nb.njit(cache=True)
def _intersect(ox, oy, oz, dx, dy, dz, tmin, quads, spheres):
    """Closest hit: (t, kind, index, nx, ny, nz) with the geometric normal."""
    best = np.inf
    kind = -1
    idx = -1
    bnx = 0.0
    bny = 0.0
    bnz = 0.0
    for i in range(quads.shape[0]):
        px, py, pz = quads[i, 0, 0], quads[i, 0, 1], quads[i, 0, 2]
        ax, ay, az = quads[i, 1, 0], quads[i, 1, 1], quads[i, 1, 2]
        bx, by, bz = quads[i, 2, 0], quads[i, 2, 1], quads[i, 2, 2]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
        den = dx * nx + dy * ny + dz * nz
        if abs(den) < 1e-14:
            continue
        t = ((px - ox) * nx + (py - oy) * ny + (pz - oz) * nz) / den
        if t <= tmin or t >= best:
            continue
        wx = ox + t * dx - px
        wy = oy + t * dy - py
        wz = oz + t * dz - pz
        nn = nx * nx + ny * ny + nz * nz
        # w = s*a + r*b  ->  s = ((w x b) . n)/|n|^2, r = ((a x w) . n)/|n|^2
        s = ((wy * bz - wz * by) * nx + (wz * bx - wx * bz) * ny + (wx * by - wy * bx) * nz) / nn
        r = ((ay * wz - az * wy) * nx + (az * wx - ax * wz) * ny + (ax * wy - ay * wx) * nz) / nn
        if s < 0.0 or s > 1.0 or r < 0.0 or r > 1.0:
            continue
        inv = 1.0 / math.sqrt(nn)
        best, kind, idx = t, 0, i
        bnx, bny, bnz = nx * inv, ny * inv, nz * inv
    for i in range(spheres.shape[0]):
        cx, cy, cz, rad = spheres[i, 0], spheres[i, 1], spheres[i, 2], spheres[i, 3]
        lx, ly, lz = ox - cx, oy - cy, oz - cz
        b = lx * dx + ly * dy + lz * dz
        c = lx * lx + ly * ly + lz * lz - rad * rad
        disc = b * b - c
        if disc < 0.0:
            continue
        sq = math.sqrt(disc)
        t = -b - sq
        if t <= tmin:
            t = -b + sq
        if t <= tmin or t >= best:
            continue
        best, kind, idx = t, 1, i
        bnx = (ox + t * dx - cx) / rad
        bny = (oy + t * dy - cy) / rad
        bnz = (oz + t * dz - cz) / rad
    return best, kind, idx, bnx, bny, bnz


@nb.njit(cache=True)
def _material(kind, idx, x, z, qmat, smat, alb, rough, pat):
    m = qmat[idx] if kind == 0 else smat[idx]
    r = rough[m]
    a0, a1, a2 = alb[m, 0], alb[m, 1], alb[m, 2]
    if pat[m] == PATTERN_FLOOR:
        s0 = math.sin(2.3 * x + 0.0) * math.cos(1.9 * z + 0.0)
        s1 = math.sin(2.3 * x + 2.1) * math.cos(1.9 * z + 1.05)
        s2 = math.sin(2.3 * x + 4.2) * math.cos(1.9 * z + 2.1)
        a0 = min(max(a0 * (1.0 + 0.45 * s0), 0.02), 0.98)
        a1 = min(max(a1 * (1.0 + 0.45 * s1), 0.02), 0.98)
        a2 = min(max(a2 * (1.0 + 0.45 * s2), 0.02), 0.98)
    return a0, a1, a2, r


# --------------------------------------------------------------------------
# environment (bilinear, wrap in u, clamp in v, blended pole caps)


@nb.njit(cache=True)
def _env(env, top, bot, rot, dx, dy, dz):
    # rotate the query direction: d' = R d
    x = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2] * dz
    y = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2] * dz
    z = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2] * dz
    H = env.shape[0]
    W = env.shape[1]
    u = 0.5 + math.atan2(x, -z) / (2.0 * math.pi)
    v = math.acos(min(max(y, -1.0), 1.0)) / math.pi
    fx = u * W - 0.5
    fy = v * H - 0.5
    x0 = math.floor(fx)
    y0 = math.floor(fy)
    wx = fx - x0
    wy = fy - y0
    xa = int(x0) % W
    xb = (int(x0) + 1) % W
    ya = min(max(int(y0), 0), H - 1)
    yb = min(max(int(y0) + 1, 0), H - 1)
    wt = min(max(-fy / 0.5, 0.0), 1.0)
    wb = min(max((fy - (H - 1)) / 0.5, 0.0), 1.0)
    out = np.empty(3)
    for c in range(3):
        top_row = env[ya, xa, c] * (1 - wx) + env[ya, xb, c] * wx
        bot_row = env[yb, xa, c] * (1 - wx) + env[yb, xb, c] * wx
        val = top_row * (1 - wy) + bot_row * wy
        val = val * (1 - wt) + top[c] * wt
        val = val * (1 - wb) + bot[c] * wb
        out[c] = val
    return out


# --------------------------------------------------------------------------
# reflectance


@nb.njit(cache=True)
def _fres(c):
    m = min(max(1.0 - c, 0.0), 1.0)
    return _F0 + (1.0 - _F0) * m * m * m * m * m


@nb.njit(cache=True)
def _brdf(a0, a1, a2, r, nx, ny, nz, ix, iy, iz, ox, oy, oz, specular):
    ci = nx * ix + ny * iy + nz * iz
    co = nx * ox + ny * oy + nz * oz
    out = np.zeros(3)
    if ci <= 0.0 or co <= 0.0:
        return out
    if not specular:
        out[0] = a0 / math.pi
        out[1] = a1 / math.pi
        out[2] = a2 / math.pi
        return out
    kd = (1.0 - _fres(ci)) * (1.0 - _fres(co)) / ((1.0 - _F0) ** 2)
    hx, hy, hz = ix + ox, iy + oy, iz + oz
    hl = math.sqrt(hx * hx + hy * hy + hz * hz)
    hx, hy, hz = hx / hl, hy / hl, hz / hl
    nh = max(nx * hx + ny * hy + nz * hz, 0.0)
    alpha2 = r * r * r * r
    k = nh * nh * (alpha2 - 1.0) + 1.0
    d = alpha2 / (math.pi * k * k)
    gi = 2.0 * ci / (ci + math.sqrt(alpha2 + (1.0 - alpha2) * ci * ci))
    go = 2.0 * co / (co + math.sqrt(alpha2 + (1.0 - alpha2) * co * co))
    f = _fres(0.5 * ((hx * ix + hy * iy + hz * iz) + (hx * ox + hy * oy + hz * oz)))
    spec = d * gi * go * f / (4.0 * ci * co)
    out[0] = kd * a0 / math.pi + spec
    out[1] = kd * a1 / math.pi + spec
    out[2] = kd * a2 / math.pi + spec
    return out


@nb.njit(cache=True)
def _frame(nx, ny, nz):
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    return (1.0 + sign * nx * nx * a, sign * b, -sign * nx), (b, sign + ny * ny * a, -ny)


@nb.njit(cache=True)
def _hemi(nx, ny, nz, u1, u2):
    t, b = _frame(nx, ny, nz)
    st = math.sqrt(max(0.0, 1.0 - u1 * u1))
    c = st * math.cos(2.0 * math.pi * u2)
    s = st * math.sin(2.0 * math.pi * u2)
    return c * t[0] + s * b[0] + u1 * nx, c * t[1] + s * b[1] + u1 * ny, c * t[2] + s * b[2] + u1 * nz


# --------------------------------------------------------------------------
# kernels


@nb.njit(cache=True)
def _camera_dir(c2w, fx, fy, cx, cy, px, py):
    lx = (px - cx) / fx
    ly = -(py - cy) / fy
    lz = -1.0
    dx = c2w[0, 0] * lx + c2w[0, 1] * ly + c2w[0, 2] * lz
    dy = c2w[1, 0] * lx + c2w[1, 1] * ly + c2w[1, 2] * lz
    dz = c2w[2, 0] * lx + c2w[2, 1] * ly + c2w[2, 2] * lz
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n


@nb.njit(cache=True, parallel=True)
def _trace_kernel(W, H, c2w, fx, fy, cx, cy, quads, qmat, spheres, smat, alb, rough, pat, env, top, bot, rot,
                  spp, max_bounces, seed, tmin, specular, rr_start):
    img = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    var = np.zeros((H, W, 3))
    for pix in nb.prange(W * H):
        i = pix // W
        j = pix % W
        ox0, oy0, oz0 = c2w[0, 3], c2w[1, 3], c2w[2, 3]
        dx0, dy0, dz0 = _camera_dir(c2w, fx, fy, cx, cy, j + 0.5, i + 0.5)
        t0, kind0, idx0, _, _, _ = _intersect(ox0, oy0, oz0, dx0, dy0, dz0, 0.0, quads, spheres)
        alpha[i, j] = 1.0 if kind0 >= 0 else 0.0
        acc = np.zeros(3)
        acc2 = np.zeros(3)
        for s in range(spp):
            ox, oy, oz, dx, dy, dz = ox0, oy0, oz0, dx0, dy0, dz0
            thr0, thr1, thr2 = 1.0, 1.0, 1.0
            l0, l1, l2 = 0.0, 0.0, 0.0
            t_lo = 0.0
            for bounce in range(max_bounces + 1):
                t, kind, idx, nx, ny, nz = _intersect(ox, oy, oz, dx, dy, dz, t_lo, quads, spheres)
                if kind < 0:
                    e = _env(env, top, bot, rot, dx, dy, dz)
                    l0 += thr0 * e[0]
                    l1 += thr1 * e[1]
                    l2 += thr2 * e[2]
                    break
                if bounce == max_bounces:
                    break
                hx, hy, hz = ox + t * dx, oy + t * dy, oz + t * dz
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx, ny, nz = -nx, -ny, -nz
                a0, a1, a2, r = _material(kind, idx, hx, hz, qmat, smat, alb, rough, pat)
                u1 = _rand(seed, pix, s, bounce, 0)
                u2 = _rand(seed, pix, s, bounce, 1)
                ix, iy, iz = _hemi(nx, ny, nz, u1, u2)
                f = _brdf(a0, a1, a2, r, nx, ny, nz, ix, iy, iz, -dx, -dy, -dz, specular)
                w = 2.0 * math.pi * (nx * ix + ny * iy + nz * iz)
                thr0 *= f[0] * w
                thr1 *= f[1] * w
                thr2 *= f[2] * w
                if bounce + 1 >= rr_start:
                    q = min(max(thr0, thr1, thr2), 0.95)
                    if _rand(seed, pix, s, bounce, 2) >= q:
                        break
                    thr0 /= q
                    thr1 /= q
                    thr2 /= q
                ox, oy, oz, dx, dy, dz = hx, hy, hz, ix, iy, iz
                t_lo = tmin
            acc[0] += l0
            acc[1] += l1
            acc[2] += l2
            acc2[0] += l0 * l0
            acc2[1] += l1 * l1
            acc2[2] += l2 * l2
        for c in range(3):
            m = acc[c] / spp
            img[i, j, c] = m
            var[i, j, c] = max(acc2[c] / spp - m * m, 0.0) / spp
    return img, alpha, var


@nb.njit(cache=True, parallel=True)
def _gbuffer_kernel(W, H, c2w, fx, fy, cx, cy, quads, qmat, spheres, smat, alb, rough, pat):
    out = np.zeros((H, W, 10))  # alpha, depth, normal(3), albedo(3), roughness, hit-kind
    for pix in nb.prange(W * H):
        i = pix // W
        j = pix % W
        ox, oy, oz = c2w[0, 3], c2w[1, 3], c2w[2, 3]
        dx, dy, dz = _camera_dir(c2w, fx, fy, cx, cy, j + 0.5, i + 0.5)
        t, kind, idx, nx, ny, nz = _intersect(ox, oy, oz, dx, dy, dz, 0.0, quads, spheres)
        if kind < 0:
            out[i, j, 1] = np.inf
            out[i, j, 9] = -1.0
            continue
        if nx * dx + ny * dy + nz * dz > 0.0:
            nx, ny, nz = -nx, -ny, -nz
        a0, a1, a2, r = _material(kind, idx, ox + t * dx, oz + t * dz, qmat, smat, alb, rough, pat)
        out[i, j, 0] = 1.0
        out[i, j, 1] = t
        out[i, j, 2], out[i, j, 3], out[i, j, 4] = nx, ny, nz
        out[i, j, 5], out[i, j, 6], out[i, j, 7] = a0, a1, a2
        out[i, j, 8] = r
        out[i, j, 9] = kind
    return out


@nb.njit(cache=True, parallel=True)
def _ao_kernel(points, normals, quads, spheres, n_samples, seed, tmin):
    n = points.shape[0]
    out = np.zeros(n)
    for p in nb.prange(n):
        vis = 0
        nx, ny, nz = normals[p, 0], normals[p, 1], normals[p, 2]
        for s in range(n_samples):
            # stratify cos(theta) over the samples
            u1 = (s + _rand(seed, p, s, 0, 0)) / n_samples
            u2 = _rand(seed, p, s, 0, 1)
            ix, iy, iz = _hemi(nx, ny, nz, u1, u2)
            t, kind, _, _, _, _ = _intersect(points[p, 0], points[p, 1], points[p, 2], ix, iy, iz, tmin, quads, spheres)
            if kind < 0:
                vis += 1
        out[p] = vis / n_samples
    return out


# --------------------------------------------------------------------------
# python entry points


def _rot_y(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def path_trace(scene: SceneDescription, camera: Camera, light_angle: float = 0.0, spp: int = 64,
               max_bounces: int = 4, seed: int = 0, specular: bool = True, rr_start: int = 3, env=None):
    """Render ``(rgb, alpha, variance_of_mean)`` for one camera.

    ``light_angle`` rotates environment queries about +y. Russian roulette
    starts after bounce ``rr_start``.
    """
    if spp < 1 or max_bounces < 1:
        raise ValueError("spp and max_bounces must be >= 1")
    q, qm, s, sm, alb, rough, pat = scene.packed()
    env = np.ascontiguousarray(scene.env if env is None else env, dtype=np.float64)
    top = env[0].mean(0)
    bot = env[-1].mean(0)
    tmin = _EPS * max(scene.extent, 1.0)
    return _trace_kernel(camera.width, camera.height, np.ascontiguousarray(camera.c2w), camera.fx, camera.fy,
                         camera.cx, camera.cy, q, qm, s, sm, alb, rough, pat, env, top, bot, _rot_y(light_angle),
                         int(spp), int(max_bounces), int(seed), tmin, bool(specular), int(rr_start))


def gbuffer(scene: SceneDescription, camera: Camera) -> dict[str, np.ndarray]:
    """Primary-hit ground truth: alpha, depth, normal (toward camera), albedo, roughness, point."""
    q, qm, s, sm, alb, rough, pat = scene.packed()
    g = _gbuffer_kernel(camera.width, camera.height, np.ascontiguousarray(camera.c2w), camera.fx, camera.fy,
                        camera.cx, camera.cy, q, qm, s, sm, alb, rough, pat)
    o, d = camera.pixel_rays()
    depth = g[..., 1]
    pts = o.reshape(g.shape[:2] + (3,)) + np.where(np.isfinite(depth), depth, 0.0)[..., None] * d.reshape(
        g.shape[:2] + (3,))
    return {"alpha": g[..., 0], "depth": depth, "normal": g[..., 2:5], "albedo": g[..., 5:8],
            "roughness": g[..., 8], "point": pts}


def ao_reference(scene: SceneDescription, points, normals, n_samples: int = 1_000_000, seed: int = 0,
                 tmin: float | None = None) -> np.ndarray:
    """Environment visibility over stratified uniform hemisphere samples on the analytic scene."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    q, _, s, _, _, _, _ = scene.packed()
    if tmin is None:
        tmin = 1e-4 * scene.extent
    return _ao_kernel(points, normals, q, s, int(n_samples), int(seed), float(tmin))
