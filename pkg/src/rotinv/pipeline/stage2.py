"""Stage 2: cache pretraining and joint material / light / cache optimization.

Each step draws one training view and a square pixel patch inside its mask.
The patch is splatted with frozen geometry to get per-pixel blend weights,
normals and depths; albedo and roughness are re-composited from those weights
so gradients reach the per-Gaussian material parameters. Shading starts
incident rays at the proxy-mesh hit of each camera ray. A separate batch of
random mesh surface points ties each cache to its own re-rendering.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..cache import CacheConfig, HashGridConfig, PretrainView, make_caches, pretrain_caches, query_caches
from ..core import DetRng
from ..envlight import EnvironmentMap
from ..gsplat import Gaussians, blend_along_ray, composite_material
from ..meshproxy import MeshProxy, sample_surface
from ..optim import (LossCsv, LossReport, ParamStore, backward, adam_step, edge_aware_smoothness, light_smoothness,
                     light_whiteness, loss_cache, loss_data, loss_mask, loss_residual)
from ..shading import GaussianBackend, MeshBackend, shade
from .config import CacheTrainConfig, Stage2Config
from .dataset import Dataset, _angle_index

RESIDUAL_PROBE = 0.01  # splat probe offset for residual samples, relative to the scene extent


def cache_box(proxy: MeshProxy, pad: float = 0.05):
    lo, hi = proxy.mesh.bounds()
    ext = hi - lo
    return lo - pad * ext.max(), hi + pad * ext.max()


def cache_config(cfg: CacheTrainConfig) -> CacheConfig:
    grid = HashGridConfig(cfg.levels, cfg.table_size, cfg.features, cfg.base_resolution, cfg.growth)
    return CacheConfig(grid, cfg.n_freq, cfg.hidden)


def pretrain_views(dataset: Dataset, proxy: MeshProxy) -> list[PretrainView]:
    """Mesh hits of every masked camera ray, with the radiance seen along it."""
    views = []
    for f in dataset.frames:
        o, d = f.camera.pixel_rays()
        h = proxy.intersect(o, d, t_min=0.0)
        sel = h.hit & (f.mask.reshape(-1) > 0.5)
        views.append(PretrainView(f.k, h.point[sel], -d[sel], f.rgb.reshape(-1, 3)[sel]))
    return views


def pretrain(dataset: Dataset, proxy: MeshProxy, cfg: CacheTrainConfig, seed: int = 0, log=None):
    """One cache per light index, fitted to camera-ray hits."""
    lo, hi = cache_box(proxy)
    caches = make_caches(dataset.K, lo, hi, cache_config(cfg), seed)
    views = pretrain_views(dataset, proxy)
    losses = pretrain_caches(caches, views, cfg.steps, DetRng(seed).child(0xCA), cfg.batch, cfg.lr, log)
    return caches, losses


@dataclass
class PatchBatch:
    """Splatted patch of one view: only valid pixels are kept (flattened)."""

    k: int
    view: int
    keys: np.ndarray  # global pixel keys (view * H * W + pixel)
    pix: np.ndarray  # (P,) flat pixel index into the patch
    shape: tuple  # (h, w) of the patch
    x_m: torch.Tensor
    n: torch.Tensor
    wo: torch.Tensor
    gt: torch.Tensor  # (P, 3)
    W: torch.Tensor
    gidx: torch.Tensor
    patch_gt: torch.Tensor  # (h, w, 3)
    patch_mask: torch.Tensor  # (h, w) gt mask
    patch_alpha: torch.Tensor  # (h, w) splat alpha


def env_init_level(dataset: Dataset) -> float:
    vals = [f.rgb[f.mask > 0.5] for f in dataset.frames]
    vals = np.concatenate(vals) if vals else np.zeros((1, 3))
    return 2.0 * float(vals.mean()) if len(vals) else 1.0


class Stage2:
    """Joint optimization of Gaussian materials, the environment map and the caches."""

    def __init__(self, dataset: Dataset, gaussians: Gaussians, proxy: MeshProxy, caches, cfg: Stage2Config,
                 seed: int = 0, env: EnvironmentMap | None = None, extent: float | None = None, log=None):
        self.ds = dataset
        self.g = gaussians
        self.proxy = proxy
        self.caches = caches
        self.cfg = cfg
        self.rng = DetRng(seed).child(0x52)
        self.log = log
        dtype = gaussians.mu.dtype
        self.env = env if env is not None else EnvironmentMap(cfg.env_height, env_init_level(dataset), dtype)
        self.extent = proxy.extent if extent is None else extent
        self.table = dataset.table
        if cfg.backend == "mesh":
            self.backend = MeshBackend(proxy, self.env, self.table, caches)
        else:
            self.backend = GaussianBackend(gaussians, self.env, self.table, self.extent, cfg.gaussian_offset)
        self.store = ParamStore()
        self.store.add("geometry", gaussians.geometry_params() + [gaussians.sh], 0.0, trainable=False)
        self.store.add("materials", gaussians.material_params(), cfg.lr_material)
        self.store.add("env", [self.env.raw], cfg.lr_env)
        self.store.add("cache", [p for c in caches for p in c.parameters()], cfg.lr_cache,
                       trainable=not cfg.freeze_cache)
        self.weights = {"mask": cfg.w_mask, "albedo_smooth": cfg.w_albedo_smooth, "rough_smooth": cfg.w_rough_smooth,
                        "light_smooth": cfg.w_light_smooth, "light_white": cfg.w_light_white}
        self._rays = [f.camera.pixel_rays() for f in dataset.frames]
        self._masked = [np.flatnonzero(f.mask.reshape(-1) > 0.5) for f in dataset.frames]
        self._geom_snapshot = [p.detach().clone() for p in self.store["geometry"].params]

    # ---- batches ---------------------------------------------------------

    def patch(self, step: int, j: int = 0) -> PatchBatch:
        cfg = self.cfg
        vi = int(self.rng.integers(len(self.ds.frames), step, j, 0))
        f = self.ds.frames[vi]
        expected = _angle_index(self.ds.angles_deg, f.angle_deg) if self.ds.angles_deg else f.k
        assert f.k == expected, f"light index {f.k} does not match the frame tag {f.angle_deg} deg"
        H, Wd = f.mask.shape
        ps = min(cfg.patch, H, Wd)
        masked = self._masked[vi]
        centre = int(masked[int(self.rng.integers(len(masked), step, j, 1))]) if len(masked) else 0
        cy, cx = divmod(centre, Wd)
        y0 = min(max(cy - ps // 2, 0), H - ps)
        x0 = min(max(cx - ps // 2, 0), Wd - ps)
        yy, xx = np.meshgrid(np.arange(y0, y0 + ps), np.arange(x0, x0 + ps), indexing="ij")
        flat = (yy * Wd + xx).reshape(-1)
        o_all, d_all = self._rays[vi]
        o, d = o_all[flat], d_all[flat]
        with torch.no_grad():
            b = blend_along_ray(o, d, self.g, with_color=False)
        hits = self.proxy.intersect(o, d, t_min=0.0)
        dtype = self.g.mu.dtype
        alpha = b.alpha.detach()
        splat_pt = o + np.where(b.valid.numpy()[:, None], b.depth.numpy()[:, None], 0.0) * d
        use_splat = ~hits.hit & (alpha.numpy() > 0.5)
        x_m = np.where(hits.hit[:, None], hits.point, splat_pt)
        n = b.normal.detach()
        wo = torch.as_tensor(-d, dtype=dtype)
        gt_mask = f.mask.reshape(-1)[flat]
        ok = (gt_mask > 0.5) & b.valid.numpy() & (hits.hit | use_splat) & ((n * wo).sum(-1).numpy() > 0)
        sel = np.flatnonzero(ok)
        st = torch.from_numpy(sel)
        rgb = f.rgb.reshape(-1, 3)[flat]
        return PatchBatch(
            k=f.k, view=vi, keys=vi * H * Wd + flat[sel], pix=sel, shape=(ps, ps),
            x_m=torch.as_tensor(x_m[sel], dtype=dtype), n=n[st], wo=wo[st], gt=torch.as_tensor(rgb[sel], dtype=dtype),
            W=b.weights.detach(), gidx=b.gidx, patch_gt=torch.as_tensor(rgb.reshape(ps, ps, 3), dtype=dtype),
            patch_mask=torch.as_tensor(gt_mask.reshape(ps, ps), dtype=dtype), patch_alpha=alpha.reshape(ps, ps))

    # ---- losses ----------------------------------------------------------

    def residual(self, step: int) -> torch.Tensor:
        cfg = self.cfg
        rr = self.rng.child(0x5E5)
        s = sample_surface(self.proxy.mesh, cfg.n_residual, rr, step, cfg.area_weighted_residual)
        k = rr.integers(self.table.K, np.arange(len(s)), step, 7).astype(np.int64)
        delta = RESIDUAL_PROBE * self.extent
        with torch.no_grad():
            b = blend_along_ray(s.point + delta * s.dir, -s.dir, self.g, t_max=2.0 * delta, with_color=False)
        keep = np.flatnonzero(b.valid.numpy())
        if len(keep) == 0:
            return torch.zeros((), dtype=self.g.mu.dtype)
        kt = torch.from_numpy(keep)
        albedo, rough = composite_material(b.weights[kt], b.gidx[kt], self.g)
        dtype = self.g.mu.dtype
        p = torch.as_tensor(s.point[keep], dtype=dtype)
        dirs = torch.as_tensor(s.dir[keep], dtype=dtype)
        nrm = torch.as_tensor(s.normal[keep], dtype=dtype)
        kk = torch.from_numpy(k[keep])
        lo = shade(p, nrm, dirs, albedo, rough, kk, self.backend, cfg.n_residual_inner, rr.child(1), keys=keep,
                   iteration=step, specular=cfg.specular)
        if cfg.residual_stop_grad:
            lo = lo.detach()
        r = query_caches(self.caches, p, dirs, kk)
        return loss_residual(r, lo)

    def losses(self, step: int) -> LossReport:
        cfg = self.cfg
        data = cache = 0.0
        regs = {"mask": 0.0, "albedo_smooth": 0.0, "rough_smooth": 0.0}
        for j in range(cfg.patches_per_step):
            pb = self.patch(step, j)
            albedo_all, rough_all = composite_material(pb.W, pb.gidx, self.g)
            st = torch.from_numpy(pb.pix)
            rgb = shade(pb.x_m, pb.n, pb.wo, albedo_all[st], rough_all[st], pb.k, self.backend, cfg.n_samples,
                        self.rng, pb.keys, iteration=step, specular=cfg.specular)
            data = data + loss_data(rgb, pb.gt)
            cache = cache + loss_cache(query_caches(self.caches, pb.x_m, pb.wo, pb.k), pb.gt)
            h, w = pb.shape
            valid = torch.zeros(h * w, dtype=pb.gt.dtype)
            valid[st] = 1.0
            vm = valid.reshape(1, h, w)
            img = pb.patch_gt[None]
            regs["mask"] = regs["mask"] + loss_mask(pb.patch_alpha, pb.patch_mask)
            regs["albedo_smooth"] = regs["albedo_smooth"] + edge_aware_smoothness(albedo_all.reshape(1, h, w, 3), img, vm)
            regs["rough_smooth"] = regs["rough_smooth"] + edge_aware_smoothness(rough_all.reshape(1, h, w, 1), img, vm)
        npch = cfg.patches_per_step
        data, cache = data / npch, cache / npch
        regs = {k: v / npch for k, v in regs.items()}
        rad = self.env.radiance()
        regs["light_smooth"] = light_smoothness(rad)
        regs["light_white"] = light_whiteness(rad)
        res = self.residual(step) if cfg.use_residual else 0.0
        return LossReport.combine(data, cache, res, regs, self.weights, cfg.lambda_residual if cfg.use_residual else 0.0)

    def set_lr(self, step: int) -> None:
        """Exponential decay from each group's base rate to ``lr_decay`` times it at the last step."""
        frac = step / max(self.cfg.steps - 1, 1)
        scale = self.cfg.lr_decay ** min(frac, 1.0)
        for group in self.store.optimizer().param_groups:
            group["lr"] = self.store[group["name"]].lr * scale

    def step(self, step: int) -> LossReport:
        rep = self.losses(step)
        self.store.zero_grad()
        backward(rep.total, self.store, rep.terms(), step)
        self.set_lr(step)
        adam_step(self.store)
        return rep

    def run(self, steps: int | None = None, csv_path=None) -> list[LossReport]:
        steps = self.cfg.steps if steps is None else steps
        writer = LossCsv(csv_path) if csv_path is not None else None
        reports = []
        for s in range(steps):
            rep = self.step(s)
            reports.append(rep)
            if writer is not None:
                writer.write(s, rep)
            if self.log is not None and (s % 50 == 0 or s == steps - 1):
                f = rep.floats()
                self.log(f"stage2 step {s} total {f['total']:.5f} data {f['data']:.5f} residual {f['residual']:.5f}")
        self.check_frozen()
        return reports

    def check_frozen(self) -> None:
        """Geometry and the proxy mesh must be exactly as they were before stage 2."""
        for a, b in zip(self._geom_snapshot, self.store["geometry"].params):
            if not torch.equal(a, b.detach()):
                raise RuntimeError("Gaussian geometry changed during stage 2")
        self.proxy.assert_unchanged()

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.g.save(out / "gaussians.txt")
        self.env.save(out / "env.pfm")
        for c in self.caches:
            c.save(out / f"cache_{c.k}.bin")
