"""Desk-scale ablation experiments used by the acceptance suite and ``scripts/``.

Each experiment generates (or reuses) a synthetic dataset under ``work``,
runs the pipeline and returns plain numbers. Ablation arms share every input
except the factor under test: stage-1 Gaussians, the proxy mesh and the
pretrained caches are computed once and copied.
"""

from __future__ import annotations

import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..core import DetRng
from ..envlight import EnvironmentMap, LightAngleTable
from ..meshproxy import MeshProxy
from ..oracle import ao_reference, gbuffer, make_scene
from ..shading import GaussianBackend, MeshBackend, ambient_occlusion
from .config import RunConfig
from .metrics import region_mask, scale_align
from .render import material_maps
from .run import Run, setup_determinism
from .stage1 import seed_on_mesh

SHARED = ("gaussians_s1.txt", "proxy_mesh.obj")


def ablation_config(scene: str, work: Path, tag: str, **stage2) -> RunConfig:
    """Known-geometry configuration tuned for a 128^2, 32-views-per-angle dataset on one CPU core."""
    cfg = RunConfig(data=str(work / f"{scene}_data"), out=str(work / tag))
    cfg.gen.scene = scene
    cfg.stage1.known_geometry = True
    cfg.stage1.steps = 100
    cfg.cache.steps = 4000
    cfg.cache.lr = 1e-2
    cfg.cache.hidden = 64
    cfg.cache.batch = 1024
    cfg.stage2.steps = 600
    cfg.stage2.lr_material = 0.05
    cfg.stage2.lr_env = 0.05
    for k, v in stage2.items():
        setattr(cfg.stage2, k, v)
    return cfg


def _prepare(cfg: RunConfig, log) -> Run:
    """Dataset, stage 1 and cache pretraining for the first arm."""
    r = Run(cfg, log=log)
    cfg.save(r.out / "config.json")
    if not (r.data / "transforms_train.json").exists():
        r.gen()
    r.stage1()
    r.pretrain()
    return r


def _arm(cfg: RunConfig, src: Path, log, n_caches: int | None = None) -> Run:
    """Second arm: copy shared inputs from ``src`` and run stage 2 plus metrics."""
    r = Run(cfg, log=log)
    cfg.save(r.out / "config.json")
    for name in SHARED:
        shutil.copy(src / name, r.out / name)
    K = r.train_set().K if n_caches is None else n_caches
    for k in range(K):
        shutil.copy(src / f"cache_{k}.bin", r.out / f"cache_{k}.bin")
    return r


def aligned_albedo(r: Run, region: str | None = None):
    """Scale-aligned albedo MSE over test views, optionally inside a named scene region.

    The per-channel scale is fitted over all masked pixels; the region only
    selects which pixels enter the error.
    """
    g, _, _ = r.final_model()
    scene = make_scene(r.scene_info()["scene"])
    box = scene.regions[region] if region else None
    preds, gts, masks, sel = [], [], [], []
    for f in r.test_set().frames:
        m = material_maps(f.camera, g)
        mask = (f.mask > 0.5) & (m["alpha"] > 0.5)
        preds.append(m["albedo"])
        gts.append(f.gt["albedo"])
        masks.append(mask)
        if box is not None:
            gb = gbuffer(scene, f.camera)
            sel.append(mask & (gb["alpha"] > 0) & region_mask(gb["point"], *box))
        else:
            sel.append(mask)
    s = scale_align(preds, gts, masks)
    num = sum(float(((p * s - q) ** 2)[m].sum()) for p, q, m in zip(preds, gts, sel))
    den = 3 * sum(int(m.sum()) for m in sel)
    return num / den


@dataclass
class RotLightResult:
    psnr_k3: float
    psnr_k1: float
    runtime: float
    k3_dir: Path
    k1_dir: Path

    @property
    def gain(self) -> float:
        return self.psnr_k3 - self.psnr_k1


def rotlight_ablation(work, log=None) -> RotLightResult:
    """Shadow-box, K=3 (0/120/240 deg) against K=1 (0 deg) with everything else shared."""
    work = Path(work)
    t = time.time()
    cfg3 = ablation_config("shadow-box", work, "rotlight_k3")
    r3 = _prepare(cfg3, log)
    r3.stage2()
    rep3 = r3.metrics()
    cfg1 = ablation_config("shadow-box", work, "rotlight_k1")
    cfg1.lights = [0]
    r1 = _arm(cfg1, r3.out, log)
    r1.stage2()
    rep1 = r1.metrics()
    return RotLightResult(rep3.aggregate()["albedo_psnr_aligned"], rep1.aggregate()["albedo_psnr_aligned"],
                          time.time() - t, r3.out, r1.out)


@dataclass
class ResidualResult:
    mse_with: float
    mse_without: float


def residual_ablation(work, log=None) -> ResidualResult:
    """Two-box-cavity, stage 2 with and without the residual term (lambda 10), cavity-masked albedo MSE."""
    work = Path(work)
    cfg_a = ablation_config("two-box-cavity", work, "residual_on", use_residual=True, lambda_residual=10.0)
    ra = _prepare(cfg_a, log)
    ra.stage2()
    cfg_b = ablation_config("two-box-cavity", work, "residual_off", use_residual=False, lambda_residual=10.0)
    rb = _arm(cfg_b, ra.out, log)
    rb.stage2()
    return ResidualResult(aligned_albedo(ra, "cavity"), aligned_albedo(rb, "cavity"))


@dataclass
class AoResult:
    err_mesh: float
    err_gaussian: float
    n_points: int


def ao_points(n: int = 64, seed: int = 0):
    """Evaluation points on the sphere-plane scene: a floor annulus around the contact and the upper sphere."""
    scene = make_scene("sphere-plane")
    sp = scene.spheres[0]
    c = np.asarray(sp.center)
    rng = np.random.default_rng(seed)
    m = n // 2
    rad = rng.uniform(0.05, 1.0, m)
    ang = rng.uniform(0, 2 * math.pi, m)
    floor = np.stack([rad * np.cos(ang), np.zeros(m), rad * np.sin(ang)], -1)
    u = rng.normal(size=(n - m, 3))
    u[:, 1] = np.abs(u[:, 1]) * 0.5 - 0.2  # band from slightly below the equator upwards
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = np.concatenate([floor, c + sp.radius * u])
    nrm = np.concatenate([np.tile([0.0, 1.0, 0.0], (m, 1)), u])
    return scene, pts, nrm


def ao_comparison(n_points: int = 64, n_samples: int = 4096, oracle_samples: int = 1_000_000,
                  n_gaussians: int = 4000, offset: float = 0.05, seed: int = 0, chunk: int = 8192) -> AoResult:
    """Mean abs AO error of the mesh and Gaussian backends against the analytic-scene oracle.

    Both backends see the same known geometry: the tessellated scene mesh, and
    disks seeded on it as in known-geometry stage 1.
    """
    setup_determinism()
    scene, pts, nrm = ao_points(n_points, seed)
    ref = ao_reference(scene, pts, nrm, oracle_samples, seed=seed + 1)
    mesh = scene.mesh()
    proxy = MeshProxy(mesh, scene.extent)
    env = EnvironmentMap(4, 1.0)
    table = LightAngleTable.from_degrees([0.0])
    g = seed_on_mesh(mesh, n_gaussians, DetRng(seed), opacity=0.97)
    rng = DetRng(seed).child(0xA0)
    keys = np.arange(len(pts))
    ao_m = ambient_occlusion(MeshBackend(proxy, env, table), pts, nrm, n_samples, rng, keys)
    gb = GaussianBackend(g, env, table, scene.extent, offset)
    ao_g = np.zeros(len(pts))
    step = max(1, chunk // n_samples)
    with torch.no_grad():
        for s in range(0, len(pts), step):
            sl = slice(s, s + step)
            ao_g[sl] = ambient_occlusion(gb, pts[sl], nrm[sl], n_samples, rng, keys[sl])
    return AoResult(float(np.abs(ao_m - ref).mean()), float(np.abs(ao_g - ref).mean()), len(pts))


def self_consistency(run_dir, n_samples: int = 64, bounce_samples: int = 8, views: int = 2, log=None) -> float:
    """Mean abs difference between relighting under the recovered env and the stage-2 render (light 0)."""
    from .config import load_config

    cfg = load_config(Path(run_dir) / "config.json")
    r = Run(cfg, log=log)
    test = r.test_set()
    frames = [i for i, f in enumerate(test.frames) if f.k == 0][:views]
    table = r.train_set().table
    a = r.render(n_samples=n_samples, frames=frames)
    env_path = r.out / "stage2" / "env.pfm"
    cfg.render.relight_bounce_samples = bounce_samples
    b = r.relight(env_path, angle_deg=math.degrees(table.angles[0]), n_samples=n_samples, frames=frames)
    diffs = []
    for i in frames:
        f = test.frames[i]
        m = f.mask > 0.5
        diffs.append(np.abs(a[f.name] - b[f.name])[m])
    return float(np.concatenate(diffs).mean())
