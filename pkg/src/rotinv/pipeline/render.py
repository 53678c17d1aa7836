"""Final renders: material maps, shaded images, relighting and AO maps."""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial import cKDTree

from ..core import Camera, DetRng
from ..envlight import EnvironmentMap, LightAngleTable, env_lookup_rotated
from ..gsplat import Gaussians, blend_along_ray
from ..meshproxy import MeshProxy
from ..shading import MeshBackend, ambient_occlusion, shade


def _pixels(camera: Camera, g: Gaussians, proxy: MeshProxy | None):
    """Splat every pixel; incident origins are mesh hits (splat point as fallback)."""
    o, d = camera.pixel_rays()
    with torch.no_grad():
        b = blend_along_ray(o, d, g, with_color=False)
    valid = b.valid.numpy()
    depth = np.where(valid, b.depth.numpy(), 0.0)
    x = o + depth[:, None] * d
    x_m = x.copy()
    if proxy is not None:
        h = proxy.intersect(o, d, t_min=0.0)
        x_m[h.hit] = h.point[h.hit]
        valid = valid & (h.hit | (b.alpha.numpy() > 0.5))
    n = b.normal.numpy()
    wo = -d
    valid = valid & ((n * wo).sum(-1) > 0)
    return b, x_m, n, wo, valid


def render_image(camera: Camera, g: Gaussians, backend, k: int, n_samples: int, rng: DetRng, proxy=None,
                 chunk: int = 2048, specular: bool = True, iteration: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Shaded linear image ``(H, W, 3)`` and splat alpha. Invalid pixels are black."""
    b, x_m, n, wo, valid = _pixels(camera, g, proxy)
    out = np.zeros((len(wo), 3))
    idx = np.flatnonzero(valid)
    dtype = backend.env.raw.dtype
    with torch.no_grad():
        alb = b.albedo.to(dtype)
        rough = b.roughness.to(dtype)
        for s in range(0, len(idx), chunk):
            sel = idx[s : s + chunk]
            st = torch.from_numpy(sel)
            c = shade(x_m[sel], n[sel], wo[sel], alb[st], rough[st], k, backend, n_samples, rng, keys=sel,
                      iteration=iteration, specular=specular)
            out[sel] = c.numpy()
    return out.reshape(camera.height, camera.width, 3), b.alpha.numpy().reshape(camera.height, camera.width)


def material_maps(camera: Camera, g: Gaussians) -> dict[str, np.ndarray]:
    o, d = camera.pixel_rays()
    with torch.no_grad():
        b = blend_along_ray(o, d, g, with_color=False)
    h, w = camera.height, camera.width
    depth = b.depth.numpy()
    pts = o + np.where(np.isfinite(depth), depth, 0.0)[:, None] * d
    return {"albedo": b.albedo.numpy().reshape(h, w, 3), "roughness": b.roughness.numpy().reshape(h, w),
            "normal": b.normal.numpy().reshape(h, w, 3), "alpha": b.alpha.numpy().reshape(h, w),
            "depth": depth.reshape(h, w), "point": pts.reshape(h, w, 3)}


class RelightBackend:
    """Incident light under a new environment for relighting.

    Misses see the (rotated) new environment. Hits at ``y`` return one bounce
    of direct light: ``y`` is shaded with the material of the nearest
    Gaussian, its face normal, and env-only incident light (no caches, which
    hold the old illumination).
    """

    name = "relight"

    def __init__(self, proxy: MeshProxy, env: EnvironmentMap, table: LightAngleTable, g: Gaussians,
                 bounce_samples: int = 8, rng: DetRng = DetRng(0)):
        self.proxy = proxy
        self.env = env
        self.table = table
        self.bounce_samples = bounce_samples
        self.rng = rng
        self.direct = MeshBackend(proxy, env, table, caches=None)
        with torch.no_grad():
            self.tree = cKDTree(g.mu.detach().numpy())
            self.albedo = g.albedo().detach().to(env.raw.dtype)
            self.rough = g.roughness().detach().to(env.raw.dtype)
        self._calls = 0

    def incident(self, x: torch.Tensor, wi: torch.Tensor, k) -> torch.Tensor:
        dtype = self.env.raw.dtype
        xn = x.detach().numpy()
        wn = wi.detach().numpy()
        h = self.proxy.intersect(xn, wn)
        out = torch.zeros((len(wn), 3), dtype=dtype)
        miss = np.flatnonzero(~h.hit)
        kk = k if isinstance(k, int) else torch.as_tensor(k)
        if len(miss):
            km = kk if isinstance(kk, int) else kk[torch.from_numpy(miss)]
            out[torch.from_numpy(miss)] = env_lookup_rotated(self.env, wi[torch.from_numpy(miss)], km, self.table)
        hit = np.flatnonzero(h.hit)
        if len(hit):
            y = h.point[hit]
            wo = -wn[hit]
            nrm = h.normal[hit]
            nrm = np.where((nrm * wo).sum(-1, keepdims=True) < 0, -nrm, nrm)
            _, gi = self.tree.query(y)
            gt = torch.from_numpy(gi)
            kh = kk if isinstance(kk, int) else kk[torch.from_numpy(hit)]
            self._calls += 1
            c = shade(y, nrm, wo, self.albedo[gt], self.rough[gt], kh, self.direct, self.bounce_samples, self.rng,
                      keys=hit, iteration=1_000_000 + self._calls)
            out[torch.from_numpy(hit)] = c
        return out

    def visibility(self, x, wi) -> torch.Tensor:
        return self.direct.visibility(x, wi)


def relight(camera: Camera, g: Gaussians, proxy: MeshProxy, new_env: EnvironmentMap, n_samples: int,
            table: LightAngleTable | None = None, k: int = 0, bounce_samples: int = 8, seed: int = 0,
            chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Image of the recovered model under ``new_env`` (optionally rotated by ``table[k]``)."""
    table = table or LightAngleTable.from_degrees([0.0])
    rng = DetRng(seed).child(0x2E1)
    backend = RelightBackend(proxy, new_env, table, g, bounce_samples, rng.child(1))
    return render_image(camera, g, backend, k, n_samples, rng, proxy, chunk)


def ao_map(camera: Camera, g: Gaussians, backend, n_samples: int, seed: int = 0, proxy=None,
           chunk: int = 4096) -> np.ndarray:
    """AO image at the splatted surface (mesh hit as origin when available)."""
    b, x_m, n, wo, valid = _pixels(camera, g, proxy)
    out = np.zeros(len(wo))
    idx = np.flatnonzero(valid)
    rng = DetRng(seed).child(0xA0)
    for s in range(0, len(idx), chunk):
        sel = idx[s : s + chunk]
        out[sel] = ambient_occlusion(backend, x_m[sel], n[sel], n_samples, rng, keys=sel)
    return out.reshape(camera.height, camera.width)
