"""Physically based shading with pluggable incident-light backends.

Reflectance is a Lambert-plus-GGX microfacet BRDF driven by two parameters,
albedo and roughness. The Lambert lobe is scaled by a Fresnel transmission
factor so that total reflectance stays below one at grazing angles; at
normal incidence and exit it reduces to ``albedo / pi`` exactly.

Incident radiance comes from one of two backends:

* :class:`MeshBackend` traces the opaque proxy mesh. A hit at ``y`` returns
  the light-angle cache ``R_k(y, -w_i)``; a miss returns the rotated
  environment lookup.
* :class:`GaussianBackend` integrates the Gaussians along the ray, skipping
  a fixed offset, and returns ``c_rt + (1 - alpha_rt) * E_k(w_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .cache import query_caches
from .core import DetRng, orthonormal_basis
from .envlight import EnvironmentMap, LightAngleTable, env_lookup_rotated
from .gsplat import Gaussians, trace_gaussians
from .meshproxy import MeshProxy

F0 = 0.04
ROUGHNESS_MIN = 0.04
GAUSSIAN_OFFSET = 0.05


@dataclass
class Material:
    albedo: torch.Tensor  # (..., 3) in [0, 1]
    roughness: torch.Tensor  # (...,) in [0.04, 1]

    def __post_init__(self):
        a = torch.as_tensor(self.albedo)
        r = torch.as_tensor(self.roughness)
        if bool((a < 0).any() | (a > 1).any()):
            raise ValueError("albedo outside [0, 1]")
        if bool((r < ROUGHNESS_MIN - 1e-12).any() | (r > 1).any()):
            raise ValueError("roughness outside [0.04, 1]")


def _dot(a, b):
    return (a * b).sum(-1)


def schlick(c):
    m = (1.0 - c).clamp(0.0, 1.0)
    m2 = m * m
    return F0 + (1.0 - F0) * (m2 * m2 * m)


def ggx_d(nh, a2):
    k = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (math.pi * k * k)


def smith_g1(c, a2):
    return 2.0 * c / (c + torch.sqrt(a2 + (1.0 - a2) * c * c))


def brdf_lobes(albedo, roughness, n, wi, wo, specular: bool = True):
    """Diffuse ``(..., 3)`` and specular ``(...)`` parts of :func:`brdf_eval`."""
    ci = _dot(n, wi)
    co = _dot(n, wo)
    ok = (ci > 0) & (co > 0)
    ci = torch.where(ok, ci, torch.ones_like(ci))
    co = torch.where(ok, co, torch.ones_like(co))
    if not specular:
        diffuse = albedo / math.pi * ok.to(albedo.dtype)[..., None]
        return diffuse, torch.zeros_like(ci)
    w_d = ((1.0 - schlick(ci)) * (1.0 - schlick(co))) / ((1.0 - F0) * (1.0 - F0))
    h = wi + wo
    h = h / torch.linalg.norm(h, dim=-1, keepdim=True).clamp_min(1e-12)
    a2 = roughness**4
    cos_d = 0.5 * (_dot(h, wi) + _dot(h, wo))
    spec = ggx_d(_dot(n, h).clamp_min(0.0), a2) * (smith_g1(ci, a2) * smith_g1(co, a2)) * schlick(cos_d) / (
        4.0 * (ci * co))
    diffuse = w_d[..., None] * albedo / math.pi
    zero = torch.zeros_like(diffuse)
    return torch.where(ok[..., None], diffuse, zero), torch.where(ok, spec, torch.zeros_like(spec))


def brdf_eval(albedo, roughness, n, wi, wo, specular: bool = True) -> torch.Tensor:
    """BRDF value ``f(w_i, w_o)`` per colour channel, zero below the horizon.

    Args:
        albedo: ``(..., 3)``.
        roughness: ``(...)``; GGX alpha is ``roughness ** 2``.
        n, wi, wo: ``(..., 3)`` unit vectors; ``wi`` and ``wo`` point away from the surface.
        specular: drop the GGX lobe and Fresnel weighting (pure Lambert) when False.
    """
    diffuse, spec = brdf_lobes(albedo, roughness, n, wi, wo, specular)
    return diffuse + spec[..., None]


# --------------------------------------------------------------------------
# incident light


class MeshBackend:
    """Opaque proxy mesh for visibility; caches (or zero) on hits, env on misses."""

    name = "mesh"

    def __init__(self, proxy: MeshProxy, env: EnvironmentMap, table: LightAngleTable, caches=None,
                 t_min: float | None = None):
        self.proxy = proxy
        self.env = env
        self.table = table
        self.caches = caches
        self.t_min = 1e-4 * proxy.extent if t_min is None else t_min

    def trace(self, x, wi):
        return self.proxy.intersect(_np(x), _np(wi), t_min=self.t_min)

    def incident(self, x: torch.Tensor, wi: torch.Tensor, k) -> torch.Tensor:
        h = self.trace(x, wi)
        dtype = self.env.raw.dtype
        hit = torch.from_numpy(h.hit)
        kk = torch.as_tensor(k, dtype=torch.long).expand(len(wi)) if not isinstance(k, int) else None
        out = torch.zeros((len(wi), 3), dtype=dtype)
        miss = torch.nonzero(~hit)[:, 0]
        if len(miss):
            out = out.index_put((miss,), env_lookup_rotated(self.env, wi[miss], k if kk is None else kk[miss],
                                                            self.table))
        hits = torch.nonzero(hit)[:, 0]
        if len(hits) and self.caches is not None:
            y = torch.as_tensor(h.point[h.hit], dtype=dtype)
            out = out.index_put((hits,), query_caches(self.caches, y, -wi[hits], k if kk is None else kk[hits]))
        return out

    def visibility(self, x, wi) -> torch.Tensor:
        return torch.from_numpy((~self.trace(x, wi).hit).astype(np.float64))


class GaussianBackend:
    """Gaussian ray-trace backend with an origin offset of ``offset * extent``."""

    name = "gaussian"

    def __init__(self, gaussians: Gaussians, env: EnvironmentMap, table: LightAngleTable, extent: float,
                 offset: float = GAUSSIAN_OFFSET):
        self.gaussians = gaussians
        self.env = env
        self.table = table
        self.extent = extent
        self.offset = offset

    def incident(self, x: torch.Tensor, wi: torch.Tensor, k) -> torch.Tensor:
        c, a, _ = trace_gaussians(x, wi, self.offset, self.extent, self.gaussians)
        e = env_lookup_rotated(self.env, wi, k, self.table)
        return c.to(e.dtype) + (1.0 - a.to(e.dtype))[:, None] * e

    def visibility(self, x, wi) -> torch.Tensor:
        with torch.no_grad():
            _, a, _ = trace_gaussians(x, wi, self.offset, self.extent, self.gaussians)
        return (1.0 - a).to(torch.float64)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.ascontiguousarray(x, dtype=np.float64)


def incident_radiance(backend, x, wi, k) -> torch.Tensor:
    dtype = backend.env.raw.dtype
    return backend.incident(torch.as_tensor(x, dtype=dtype).reshape(-1, 3),
                            torch.as_tensor(wi, dtype=dtype).reshape(-1, 3), k)


# --------------------------------------------------------------------------
# Monte Carlo estimators


def lattice_multiplier(n: int) -> int:
    """Largest ``m <= 0.618 n`` coprime to ``n`` (azimuth stratum stride)."""
    m = max(1, int(0.6180339887 * n))
    while m > 1 and math.gcd(m, n) != 1:
        m -= 1
    return m


def hemisphere_dirs(n: np.ndarray, n_samples: int, rng: DetRng, keys, iteration: int = 0) -> np.ndarray:
    """Stratified uniform-hemisphere directions ``(P, S, 3)`` about normals ``n (P, 3)``.

    Sample ``s`` draws ``cos(theta)`` from stratum ``s`` and the azimuth from
    stratum ``s * m mod S`` of ``S`` equal bins (a jittered rank-1 lattice, so
    both angles are stratified). A per-key random azimuth rotation (keyed with ``s = S``) decorrelates
    neighbouring points. Random numbers are keyed by ``(key, iteration, s, dim)``.
    """
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 1)
    s = np.arange(n_samples)[None, :]
    m = lattice_multiplier(n_samples)
    u1 = (s + rng.uniform(keys, iteration, s, 0)) / n_samples
    u2 = ((s * m) % n_samples + rng.uniform(keys, iteration, s, 1)) / n_samples
    u2 = (u2 + rng.uniform(keys, iteration, n_samples, 2)) % 1.0
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - u1 * u1))
    phi = 2.0 * math.pi * u2
    t, b = orthonormal_basis(n)
    return ((sin_t * np.cos(phi))[..., None] * t[:, None] + (sin_t * np.sin(phi))[..., None] * b[:, None]
            + u1[..., None] * n[:, None])


def shade(x_m, n, wo, albedo, roughness, k, backend, n_samples: int, rng: DetRng, keys, iteration: int = 0,
          specular: bool = True, return_terms: bool = False):
    """Outgoing radiance: MC estimate of the reflection integral.

    Incident queries start at ``x_m`` (the mesh hit); BRDF inputs ``n``,
    ``albedo``, ``roughness`` come from the splatted surface. Estimator is
    ``2 pi / S * sum_s f L_i cos``, with samples in fixed stratum order.

    Returns ``(P, 3)``; rows with ``n . wo <= 0`` are exactly zero.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    dtype = backend.env.raw.dtype
    x_m = torch.as_tensor(x_m, dtype=dtype).reshape(-1, 3)
    n = torch.as_tensor(n, dtype=dtype).reshape(-1, 3)
    wo = torch.as_tensor(wo, dtype=dtype).reshape(-1, 3)
    P = x_m.shape[0]
    wi = torch.as_tensor(hemisphere_dirs(_np(n), n_samples, rng, keys, iteration), dtype=dtype)
    xq = x_m[:, None, :].expand(P, n_samples, 3).reshape(-1, 3)
    kq = k if isinstance(k, int) else torch.as_tensor(k, dtype=torch.long).reshape(-1, 1).expand(P, n_samples).reshape(-1)
    L = backend.incident(xq, wi.reshape(-1, 3), kq).reshape(P, n_samples, 3)
    f = brdf_eval(albedo[:, None, :], roughness[:, None], n[:, None, :], wi, wo[:, None, :], specular)
    cos = _dot(n[:, None, :], wi).clamp_min(0.0)
    terms = f * L * cos[..., None] * (2.0 * math.pi)
    out = terms.mean(1)
    return (out, terms) if return_terms else out


def ambient_occlusion(backend, x_m, n, n_samples: int, rng: DetRng, keys, iteration: int = 0) -> np.ndarray:
    """Fraction of stratified uniform hemisphere directions that reach the environment."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x_m = _np(x_m).reshape(-1, 3)
    n = _np(n).reshape(-1, 3)
    P = len(x_m)
    wi = hemisphere_dirs(n, n_samples, rng, keys, iteration).reshape(-1, 3)
    xq = np.repeat(x_m, n_samples, axis=0)
    vis = backend.visibility(xq, wi).detach().cpu().numpy().reshape(P, n_samples)
    return vis.mean(1)
