"""Stage 1: fit Gaussian geometry and SH colour under one light, then extract the proxy mesh.

Two entry modes:

* full fit: Gaussians seeded on the surface of a mask visual hull, then
  position, orientation, scale, opacity and SH colour are optimized with an
  L1 photometric loss plus mask BCE (fixed primitive count);
* known geometry: Gaussians seeded on a supplied mesh and only SH colour is
  fitted; the proxy mesh is that mesh.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from ..core import DetRng, normalize
from ..gsplat import Gaussians, blend_along_ray, render_maps
from ..meshproxy import (EmptyMeshError, MeshProxy, TriangleMesh, TsdfConfig, marching_cubes, tsdf_fuse)
from ..optim import NumericError
from .config import MeshConfig, Stage1Config
from .dataset import Dataset

MIN_VIEWS = 8


def seed_on_mesh(mesh: TriangleMesh, n: int, rng: DetRng, scale_factor: float = 0.9, opacity: float = 0.97,
                 sh_degree: int = 1, dtype=torch.float64) -> Gaussians:
    """Disks at area-weighted random surface points, lying in the face planes.

    Disk sigma is ``scale_factor * sqrt(area / n)`` so neighbours overlap.
    """
    if mesh.n_triangles == 0:
        raise EmptyMeshError("cannot seed Gaussians on an empty mesh")
    i = np.arange(n)
    u0, u1, u2 = (rng.uniform(i, 0, dim) for dim in range(3))
    cdf = np.cumsum(mesh.areas)
    tri = np.minimum(np.searchsorted(cdf, u0 * cdf[-1], side="right"), mesh.n_triangles - 1)
    s = np.sqrt(u1)
    bary = np.stack([1.0 - s, s * (1.0 - u2), s * u2], -1)
    tv = mesh.vertices[mesh.triangles[tri]]
    mu = np.einsum("nk,nkc->nc", bary, tv)
    nrm = mesh.face_normals[tri]
    tan = normalize(tv[:, 1] - tv[:, 0])
    sigma = scale_factor * math.sqrt(cdf[-1] / n)
    return Gaussians.create(mu, nrm, tan, sigma, opacity, sh_degree=sh_degree, dtype=dtype)


def visual_hull(dataset: Dataset, bbox_min, bbox_max, resolution: int = 48, threshold: float = 0.5):
    """Voxel carving: a voxel survives if every view that sees it has mask > threshold there.

    Returns ``(occupied (N,N,N) bool, origin, voxel_size)``.
    """
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    vs = float((hi - lo).max()) / resolution
    origin = 0.5 * (lo + hi) - 0.5 * vs * resolution
    ax = origin[None, :] + (np.arange(resolution)[:, None] + 0.5) * vs
    X, Y, Z = np.meshgrid(ax[:, 0], ax[:, 1], ax[:, 2], indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
    occ = np.ones(len(pts), dtype=bool)
    for f in dataset.frames:
        px, py, z = f.camera.project(pts)
        with np.errstate(invalid="ignore"):
            ix = np.floor(px).astype(np.int64)
            iy = np.floor(py).astype(np.int64)
        inside = (z > 0) & (ix >= 0) & (ix < f.camera.width) & (iy >= 0) & (iy < f.camera.height)
        sel = np.nonzero(inside)[0]
        carve = f.mask[iy[sel], ix[sel]] <= threshold
        occ[sel[carve]] = False
    return occ.reshape((resolution,) * 3), origin, vs


def seed_on_hull(occ: np.ndarray, origin, voxel_size: float, n: int, rng: DetRng, scale_factor: float = 0.9,
                 opacity: float = 0.9, sh_degree: int = 1, dtype=torch.float64) -> Gaussians:
    """Disks on surface voxels of an occupancy grid, oriented by the occupancy gradient."""
    pad = np.pad(occ, 1)
    interior = pad[2:, 1:-1, 1:-1] & pad[:-2, 1:-1, 1:-1] & pad[1:-1, 2:, 1:-1] & pad[1:-1, :-2, 1:-1] \
        & pad[1:-1, 1:-1, 2:] & pad[1:-1, 1:-1, :-2]
    surf = np.argwhere(occ & ~interior)
    if len(surf) == 0:
        raise EmptyMeshError("visual hull is empty; check masks and the scene bounds")
    occf = occ.astype(np.float64)
    gx, gy, gz = np.gradient(occf)
    g = -np.stack([gx, gy, gz], -1)[tuple(surf.T)]
    g = np.where(np.linalg.norm(g, axis=1, keepdims=True) > 1e-9, g, np.array([0.0, 1.0, 0.0]))
    nrm = normalize(g)
    i = np.arange(n)
    pick = np.minimum((rng.uniform(i, 1, 0) * len(surf)).astype(np.int64), len(surf) - 1)
    jitter = rng.uniform(i[:, None], 1, np.arange(1, 4)[None, :]) - 0.5
    mu = np.asarray(origin) + (surf[pick] + 0.5 + jitter) * voxel_size
    nrm = nrm[pick]
    ref = np.where(np.abs(nrm[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    tan = normalize(np.cross(nrm, ref))
    area = len(surf) * voxel_size**2
    sigma = scale_factor * math.sqrt(area / n)
    return Gaussians.create(mu, nrm, tan, sigma, opacity, sh_degree=sh_degree, dtype=dtype)


def _frame_pixels(dataset: Dataset):
    rays = []
    for f in dataset.frames:
        o, d = f.camera.pixel_rays()
        rays.append((o, d, f.rgb.reshape(-1, 3), f.mask.reshape(-1)))
    return rays


def photometric_loss(g: Gaussians, o, d, rgb, mask, mask_weight: float = 0.0) -> torch.Tensor:
    """Masked L1 between splatted SH colour and ``rgb``, plus ``mask_weight`` times alpha-vs-mask BCE."""
    b = blend_along_ray(o, d, g)
    m = torch.as_tensor(mask, dtype=b.color.dtype)
    gt = torch.as_tensor(rgb, dtype=b.color.dtype)
    den = m.sum().clamp_min(1.0)
    loss = ((b.color - gt).abs().mean(-1) * m).sum() / den
    if mask_weight:
        a = b.alpha.clamp(1e-6, 1 - 1e-6)
        loss = loss + mask_weight * F.binary_cross_entropy(a, m.clamp(0, 1))
    return loss


def fit_gaussians(g: Gaussians, dataset: Dataset, cfg: Stage1Config, rng: DetRng, geometry: bool = True,
                  log=None) -> list[float]:
    """Photometric fit on random ray batches, one view per step.

    With ``geometry=False`` only SH colour is trained.
    """
    groups = [{"params": [g.sh], "lr": cfg.lr_sh}]
    if geometry:
        groups += [{"params": [g.mu], "lr": cfg.lr_mu}, {"params": [g.quat], "lr": cfg.lr_quat},
                   {"params": [g.log_scale], "lr": cfg.lr_scale}, {"params": [g.opacity_logit], "lr": cfg.lr_opacity}]
    train = {id(p) for grp in groups for p in grp["params"]}
    for p in g.parameters():
        p.requires_grad_(id(p) in train)
    opt = torch.optim.Adam(groups)
    rays = _frame_pixels(dataset)
    losses = []
    for step in range(cfg.steps):
        vi = int(rng.integers(len(rays), step, 0))
        o, d, rgb, mask = rays[vi]
        n = min(cfg.batch_rays, len(d))
        idx = rng.integers(len(d), step, 1, np.arange(n))
        loss = photometric_loss(g, o[idx], d[idx], rgb[idx], mask[idx], cfg.mask_weight if geometry else 0.0)
        if not bool(torch.isfinite(loss)):
            raise NumericError("stage-1 photometric loss", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if geometry:
            with torch.no_grad():
                g.quat.div_(torch.linalg.norm(g.quat, dim=-1, keepdim=True))
        losses.append(loss.item())
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log(f"stage1 step {step} loss {loss.item():.5f}")
    for p in g.parameters():
        p.requires_grad_(False)
    return losses


def stage1_fit(dataset: Dataset, cfg: Stage1Config, seed: int = 0, mesh: TriangleMesh | None = None,
               bounds=None, dtype=torch.float64, log=None) -> Gaussians:
    """Fit Gaussians to the views of one light angle.

    ``dataset`` must already be restricted to a single light. In known-geometry
    mode (``mesh`` given) disks are seeded on the mesh and only SH colour is
    trained. Otherwise they are seeded on the visual hull inside ``bounds``.
    Zero steps return the initialization unchanged.
    """
    if len(dataset.frames) < MIN_VIEWS:
        raise ValueError(f"stage 1 needs at least {MIN_VIEWS} views, got {len(dataset.frames)}")
    rng = DetRng(seed).child(0x51)
    if mesh is not None:
        g = seed_on_mesh(mesh, cfg.n_gaussians, rng, cfg.scale_factor, opacity=0.97, sh_degree=cfg.sh_degree,
                         dtype=dtype)
    else:
        if bounds is None:
            raise ValueError("full stage-1 fit needs scene bounds for the visual hull")
        occ, origin, vs = visual_hull(dataset, bounds[0], bounds[1], cfg.hull_resolution)
        g = seed_on_hull(occ, origin, vs, cfg.n_gaussians, rng, cfg.scale_factor, cfg.init_opacity,
                         cfg.sh_degree, dtype)
    fit_gaussians(g, dataset, cfg, rng.child(1), geometry=mesh is None, log=log)
    return g


def extract_proxy_mesh(g: Gaussians, cameras, cfg: MeshConfig = MeshConfig(), known_mesh: TriangleMesh | None = None,
                       extent: float | None = None) -> MeshProxy:
    """Depth maps of every camera, fused into a TSDF and meshed; known meshes pass through."""
    if known_mesh is not None:
        return MeshProxy(known_mesh, extent)
    depths, alphas = [], []
    for cam in cameras:
        m = render_maps(cam, g)
        a = m["alpha"].numpy()
        dpt = m["depth"].numpy()
        depths.append(np.where(np.isfinite(dpt), dpt, 0.0))
        alphas.append(a)
    lo, hi = g.bounds()
    grid = tsdf_fuse(depths, alphas, cameras, lo, hi,
                     TsdfConfig(cfg.resolution, cfg.padding, cfg.trunc_voxels, cfg.alpha_threshold))
    mesh = marching_cubes(grid)
    if mesh.n_triangles == 0:
        raise EmptyMeshError("TSDF produced an empty mesh; try a finer grid, more padding or a lower alpha threshold")
    return MeshProxy(mesh, extent)
