"""Pipeline orchestration: each stage reads its inputs from and writes its outputs to ``cfg.out``.

Output layout::

    out/config.json        resolved configuration
    out/gaussians_s1.txt   stage-1 Gaussians
    out/proxy_mesh.obj     proxy mesh
    out/cache_<k>.bin      caches (pretrained, then overwritten by stage 2)
    out/stage2/            stage-2 Gaussians, env map, caches
    out/losses.csv         stage-2 loss log
    out/metrics.csv        per-view and mean material metrics
    out/manifest.json      config, seed and content hashes of the outputs
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import torch

from ..cache import RadianceCache
from ..core import DetRng, write_pfm, write_png
from ..envlight import EnvironmentMap, LightAngleTable
from ..gsplat import Gaussians
from ..meshproxy import MeshProxy, load_obj, save_obj
from ..oracle import gen_dataset
from ..shading import GaussianBackend, MeshBackend
from .config import RunConfig
from .dataset import Dataset, load_dataset, load_scene_info
from .metrics import compute_metrics
from .render import ao_map, material_maps, relight, render_image
from .stage1 import extract_proxy_mesh, stage1_fit
from .stage2 import Stage2, pretrain


def setup_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    # intra-op threading changes floating-point reduction order; pin it
    torch.set_num_threads(1)


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


class Run:
    """Stateful handle on one output directory."""

    def __init__(self, cfg: RunConfig, log=None):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data = Path(cfg.data)
        self.log = log or (lambda *a: None)
        self.timings: dict[str, float] = {}
        setup_determinism()

    # ---- inputs ----------------------------------------------------------

    def train_set(self) -> Dataset:
        ds = load_dataset(self.data, "train", load_gt=False)
        if self.cfg.lights is not None:
            ds = ds.restrict(self.cfg.lights)
        return ds

    def test_set(self, train: Dataset | None = None) -> Dataset:
        ds = load_dataset(self.data, "test")
        train = train or self.train_set()
        return ds.with_table(train.angles_deg)

    def scene_info(self) -> dict:
        return load_scene_info(self.data)

    def extent(self) -> float | None:
        return self.scene_info().get("extent")

    # ---- stages ----------------------------------------------------------

    def gen(self) -> Path:
        c = self.cfg.gen
        t = time.time()
        p = gen_dataset(c.scene, tuple(c.angles_deg), c.n_train, c.n_test, c.resolution, c.spp, self.data,
                        self.cfg.seed, c.max_bounces, c.ao_samples, log=self.log)
        self.timings["gen"] = time.time() - t
        return p

    def known_mesh(self):
        c = self.cfg.stage1
        if not c.known_geometry:
            return None
        path = Path(c.mesh) if c.mesh else self.data / "gt_mesh.obj"
        return load_obj(path)

    def stage1(self) -> Gaussians:
        t = time.time()
        train = self.train_set()
        single = train.restrict([self.cfg.stage1.light_index])
        info = self.scene_info()
        bounds = info.get("bounds")
        g = stage1_fit(single, self.cfg.stage1, self.cfg.seed, mesh=self.known_mesh(), bounds=bounds,
                       dtype=_dtype(self.cfg), log=self.log)
        g.save(self.out / "gaussians_s1.txt")
        proxy = extract_proxy_mesh(g, [f.camera for f in single.frames], self.cfg.mesh, self.known_mesh(),
                                   self.extent())
        save_obj(proxy.mesh, self.out / "proxy_mesh.obj")
        self.timings["stage1"] = time.time() - t
        return g

    def extract_mesh(self) -> MeshProxy:
        g = self.load_gaussians("gaussians_s1.txt")
        single = self.train_set().restrict([self.cfg.stage1.light_index])
        proxy = extract_proxy_mesh(g, [f.camera for f in single.frames], self.cfg.mesh, self.known_mesh(),
                                   self.extent())
        save_obj(proxy.mesh, self.out / "proxy_mesh.obj")
        return proxy

    def proxy(self) -> MeshProxy:
        return MeshProxy(load_obj(self.out / "proxy_mesh.obj"), self.extent())

    def load_gaussians(self, name: str) -> Gaussians:
        return Gaussians.load(self.out / name, dtype=_dtype(self.cfg))

    def pretrain(self):
        t = time.time()
        caches, losses = pretrain(self.train_set(), self.proxy(), self.cfg.cache, self.cfg.seed,
                                  log=lambda s, l: self.log(f"pretrain step {s} mse {l:.5f}"))
        for c in caches:
            c.save(self.out / f"cache_{c.k}.bin")
        self.timings["pretrain"] = time.time() - t
        return caches

    def load_caches(self, directory: Path, K: int):
        return [RadianceCache.load(directory / f"cache_{k}.bin") for k in range(K)]

    def stage2(self) -> Stage2:
        t = time.time()
        train = self.train_set()
        g = self.load_gaussians("gaussians_s1.txt")
        proxy = self.proxy()
        caches = self.load_caches(self.out, train.K)
        s2 = Stage2(train, g, proxy, caches, self.cfg.stage2, self.cfg.seed, extent=self.extent(), log=self.log)
        s2.run(csv_path=self.out / "losses.csv")
        s2.save(self.out / "stage2")
        self.timings["stage2"] = time.time() - t
        return s2

    def final_model(self):
        """Stage-2 Gaussians, env map and caches from disk."""
        d = self.out / "stage2"
        g = Gaussians.load(d / "gaussians.txt", dtype=_dtype(self.cfg))
        env = EnvironmentMap.load(d / "env.pfm", dtype=_dtype(self.cfg))
        K = len(list(d.glob("cache_*.bin")))
        return g, env, self.load_caches(d, K)

    # ---- evaluation ------------------------------------------------------

    def metrics(self):
        g, _, _ = self.final_model()
        test = self.test_set()
        preds_a, gts_a, preds_r, gts_r, masks, names = [], [], [], [], [], []
        mdir = self.out / "maps"
        mdir.mkdir(exist_ok=True)
        for f in test.frames:
            if "albedo" not in f.gt or "roughness" not in f.gt:
                continue
            m = material_maps(f.camera, g)
            mask = (f.mask > 0.5) & (m["alpha"] > 0.5)
            preds_a.append(m["albedo"])
            gts_a.append(f.gt["albedo"])
            preds_r.append(m["roughness"])
            gts_r.append(f.gt["roughness"])
            masks.append(mask)
            names.append(f.name)
            write_pfm(mdir / f"{f.name}_albedo.pfm", m["albedo"])
            write_pfm(mdir / f"{f.name}_roughness.pfm", m["roughness"])
        rep = compute_metrics(preds_a, gts_a, preds_r, gts_r, masks, names)
        rep.write_csv(self.out / "metrics.csv")
        self.write_manifest()
        return rep

    def _backend(self, backend: str, g, env, table, caches, proxy, offset: float):
        if backend == "mesh":
            return MeshBackend(proxy, env, table, caches)
        return GaussianBackend(g, env, table, proxy.extent if self.extent() is None else self.extent(), offset)

    def render(self, backend: str | None = None, n_samples: int | None = None, frames=None, offset: float | None = None):
        """Shade test views with the stage-2 model under the training illumination."""
        g, env, caches = self.final_model()
        train = self.train_set()
        test = self.test_set(train)
        proxy = self.proxy()
        be = self._backend(backend or self.cfg.stage2.backend, g, env, train.table, caches, proxy,
                           self.cfg.stage2.gaussian_offset if offset is None else offset)
        out = self.out / "renders"
        out.mkdir(exist_ok=True)
        rng = DetRng(self.cfg.seed).child(0x4E4)
        imgs = {}
        for i, f in enumerate(test.frames if frames is None else [test.frames[j] for j in frames]):
            with torch.no_grad():
                img, alpha = render_image(f.camera, g, be, f.k, n_samples or self.cfg.render.n_samples, rng, proxy,
                                          specular=self.cfg.stage2.specular)
            write_pfm(out / f"{f.name}.pfm", img)
            write_png(out / f"{f.name}.png", img, alpha)
            imgs[f.name] = img
        return imgs

    def relight(self, env_path=None, angle_deg: float = 0.0, n_samples: int | None = None, frames=None):
        """Relight test views; default light is the recovered env map at ``angle_deg``."""
        g, env, _ = self.final_model()
        if env_path is not None:
            env = EnvironmentMap.load(env_path, dtype=_dtype(self.cfg))
        test = self.test_set()
        proxy = self.proxy()
        table = LightAngleTable.from_degrees([angle_deg])
        out = self.out / "relight"
        out.mkdir(exist_ok=True)
        imgs = {}
        for f in test.frames if frames is None else [test.frames[j] for j in frames]:
            with torch.no_grad():
                img, alpha = relight(f.camera, g, proxy, env, n_samples or self.cfg.render.n_samples, table, 0,
                                     self.cfg.render.relight_bounce_samples, self.cfg.seed)
            write_pfm(out / f"{f.name}.pfm", img)
            write_png(out / f"{f.name}.png", img, alpha)
            imgs[f.name] = img
        return imgs

    def ao(self, backend: str = "mesh", offset: float = 0.05, n_samples: int | None = None, frames=None):
        g = self.load_gaussians("gaussians_s1.txt")
        proxy = self.proxy()
        env = EnvironmentMap(4, 1.0, _dtype(self.cfg))
        be = self._backend(backend, g, env, LightAngleTable.from_degrees([0.0]), None, proxy, offset)
        out = self.out / "ao"
        out.mkdir(exist_ok=True)
        test = self.test_set()
        maps = {}
        for f in test.frames if frames is None else [test.frames[j] for j in frames]:
            a = ao_map(f.camera, g, be, n_samples or self.cfg.render.ao_samples, self.cfg.seed, proxy)
            write_pfm(out / f"{f.name}_{backend}.pfm", a)
            maps[f.name] = a
        return maps

    def write_manifest(self) -> None:
        hashes = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.suffix in (".txt", ".obj", ".bin", ".pfm", ".csv") and p.name != "manifest.json":
                hashes[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        man = {"seed": self.cfg.seed, "config": self.cfg.to_dict(), "hashes": hashes, "timings": self.timings}
        (self.out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))

    def all(self, generate: bool = True):
        self.cfg.save(self.out / "config.json")
        if generate and not (self.data / "transforms_train.json").exists():
            self.gen()
        self.stage1()
        self.pretrain()
        self.stage2()
        return self.metrics()
