"""Proxy triangle mesh: ray queries, TSDF extraction and surface sampling."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bvh as _bvh
from .core import Camera, DetRng, orthonormal_basis


class EmptyMeshError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    face_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        cr = self._cross()
        n = np.linalg.norm(cr, axis=1, keepdims=True)
        object.__setattr__(self, "face_normals", cr / np.where(n > 0, n, 1.0))

    def _cross(self) -> np.ndarray:
        v0, v1, v2 = (self.vertices[self.triangles[:, i]] for i in range(3))
        return np.cross(v1 - v0, v2 - v0)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def tri_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        tv = self.vertices[self.triangles]
        return tv.min(1), tv.max(1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()

    def cleaned(self, weld_tol: float = 1e-6, min_area: float = 1e-14) -> "TriangleMesh":
        """Weld vertices closer than ``weld_tol`` and drop zero-area faces."""
        if len(self.vertices) == 0:
            return self
        key = np.round(self.vertices / weld_tol).astype(np.int64)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
        verts = self.vertices[first]
        tris = inverse[self.triangles]
        keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
        tris = tris[keep]
        m = TriangleMesh(verts, tris)
        m = TriangleMesh(verts, tris[m.areas > min_area])
        used = np.unique(m.triangles)
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(verts[used], remap[m.triangles])

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        f.write(f"# {len(mesh.vertices)} vertices, {mesh.n_triangles} faces\n")
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for j in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[j], idx[j + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# --------------------------------------------------------------------------
# ray queries


@dataclass(frozen=True)
class MeshHit:
    t: float
    tri: int
    bary: tuple[float, float]  # (b0, b1); b2 = 1 - b0 - b1
    point: np.ndarray
    normal: np.ndarray

    @property
    def b2(self) -> float:
        return 1.0 - self.bary[0] - self.bary[1]


@dataclass(frozen=True)
class MeshHits:
    """Batched hits. Rays that miss have ``tri == -1`` and ``t == inf``."""

    t: np.ndarray
    tri: np.ndarray
    bary: np.ndarray  # (N, 3) weights of the triangle's three vertices
    point: np.ndarray
    normal: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.tri >= 0


def build_bvh(mesh: TriangleMesh) -> _bvh.Bvh:
    lo, hi = mesh.tri_bounds() if mesh.n_triangles else (np.zeros((0, 3)), np.zeros((0, 3)))
    return _bvh.build(lo, hi)


def _as_rays(origins, dirs, t_min, t_max):
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if len(o) == 1 and len(d) > 1:
        o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    n = len(d)
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    return o, d, tmin, tmax


def intersect(mesh: TriangleMesh, tree: _bvh.Bvh, origins, dirs, t_min=0.0, t_max=np.inf) -> MeshHits:
    """Closest hit with ``t > t_min`` for each ray; ties go to the lower triangle index."""
    o, d, tmin, tmax = _as_rays(origins, dirs, t_min, t_max)
    t, tri, u, v = _bvh.closest_triangle(o, d, tmin, tmax, mesh.vertices, mesh.triangles, tree.bmin, tree.bmax,
                                         tree.left, tree.right, tree.start, tree.count, tree.order)
    return _make_hits(mesh, t, tri, u, v)


def _make_hits(mesh, t, tri, u, v) -> MeshHits:
    hit = tri >= 0
    bary = np.stack([1.0 - u - v, u, v], -1)
    bary[~hit] = 0.0
    point = np.zeros((len(t), 3))
    normal = np.zeros((len(t), 3))
    if hit.any() and mesh.n_triangles:
        tv = mesh.vertices[mesh.triangles[tri[hit]]]
        point[hit] = np.einsum("nk,nkc->nc", bary[hit], tv)
        normal[hit] = mesh.face_normals[tri[hit]]
    return MeshHits(t, tri, bary, point, normal)


def _dot3(a, b):
    # left-to-right sum, the same operation order as the compiled kernel
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def intersect_brute_force(mesh: TriangleMesh, origins, dirs, t_min=0.0, t_max=np.inf, chunk: int = 256) -> MeshHits:
    """Exhaustive all-triangles intersection in plain numpy (reference path)."""
    o, d, tmin, tmax = _as_rays(origins, dirs, t_min, t_max)
    n = len(d)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if mesh.n_triangles == 0:
        return _make_hits(mesh, best_t, best_tri, best_u, best_v)
    v0, v1, v2 = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    e1, e2 = v1 - v0, v2 - v0
    for s in range(0, n, chunk):
        oo, dd = o[s : s + chunk, None, :], d[s : s + chunk, None, :]
        p = np.cross(dd, e2[None])
        det = _dot3(e1[None], p)
        ok = np.abs(det) >= 1e-9
        inv = 1.0 / np.where(ok, det, 1.0)
        sv = oo - v0[None]
        u = _dot3(sv, p) * inv
        q = np.cross(sv, e1[None])
        v = _dot3(dd, q) * inv
        t = _dot3(e2[None], q) * inv
        ok &= (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1)
        ok &= (t > tmin[s : s + chunk, None]) & (t <= tmax[s : s + chunk, None])
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)  # first index among equal minima
        rows = np.arange(len(j))
        tt = t[rows, j]
        hit = np.isfinite(tt)
        sl = slice(s, s + chunk)
        best_t[sl] = tt
        best_tri[sl] = np.where(hit, j, -1)
        best_u[sl] = np.where(hit, u[rows, j], 0.0)
        best_v[sl] = np.where(hit, v[rows, j], 0.0)
    return _make_hits(mesh, best_t, best_tri, best_u, best_v)


class MeshProxy:
    """An immutable mesh with its BVH. ``extent`` sets the default ray epsilon."""

    def __init__(self, mesh: TriangleMesh, extent: float | None = None):
        self.mesh = mesh
        self.bvh = build_bvh(mesh)
        if extent is None:
            lo, hi = mesh.bounds() if len(mesh.vertices) else (np.zeros(3), np.ones(3))
            extent = 0.5 * float(np.linalg.norm(hi - lo))
        self.extent = extent
        self.hash = mesh.content_hash()

    def intersect(self, origins, dirs, t_min=None, t_max=np.inf) -> MeshHits:
        if t_min is None:
            t_min = 1e-4 * self.extent
        return intersect(self.mesh, self.bvh, origins, dirs, t_min, t_max)

    def assert_unchanged(self) -> None:
        if self.mesh.content_hash() != self.hash:
            raise RuntimeError("proxy mesh was modified after construction")


def ray_mesh_intersect(tree: _bvh.Bvh, mesh: TriangleMesh, ray) -> MeshHit | None:
    h = intersect(mesh, tree, ray.origin[None], ray.dir[None], ray.t_min, ray.t_max)
    if not h.hit[0]:
        return None
    return MeshHit(float(h.t[0]), int(h.tri[0]), (float(h.bary[0, 0]), float(h.bary[0, 1])), h.point[0], h.normal[0])


# --------------------------------------------------------------------------
# TSDF fusion and marching cubes


@dataclass
class TsdfGrid:
    origin: np.ndarray  # world position of voxel (0,0,0)'s corner
    voxel_size: float
    tsdf: np.ndarray  # (N, N, N) indexed [ix, iy, iz], values in [-1, 1]
    weight: np.ndarray

    @property
    def resolution(self) -> int:
        return self.tsdf.shape[0]

    def centers(self) -> np.ndarray:
        n = self.resolution
        i = (np.arange(n) + 0.5) * self.voxel_size
        g = np.stack(np.meshgrid(i, i, i, indexing="ij"), -1).reshape(-1, 3)
        return g + self.origin

    def save(self, path) -> None:
        """Raw float32 volume ``path`` plus a ``path.txt`` text header."""
        path = Path(path)
        n = self.resolution
        o = [float(x) for x in self.origin]
        header = (f"dims {n} {n} {n}\norigin {o[0]!r} {o[1]!r} {o[2]!r}\n"
                  f"voxel_size {float(self.voxel_size)!r}\nlayout tsdf,weight float32 C-order [ix,iy,iz]\n")
        Path(str(path) + ".txt").write_text(header)
        np.concatenate([self.tsdf.ravel(), self.weight.ravel()]).astype(np.float32).tofile(path)

    @classmethod
    def load(cls, path) -> "TsdfGrid":
        meta = {}
        for line in Path(str(path) + ".txt").read_text().splitlines():
            k, *vals = line.split()
            meta[k] = vals
        n = int(meta["dims"][0])
        raw = np.fromfile(path, dtype=np.float32).astype(np.float64)
        return cls(np.array([float(x) for x in meta["origin"]]), float(meta["voxel_size"][0]),
                   raw[: n**3].reshape(n, n, n), raw[n**3 :].reshape(n, n, n))


@dataclass(frozen=True)
class TsdfConfig:
    resolution: int = 128
    padding: float = 0.05
    trunc_voxels: float = 4.0
    alpha_threshold: float = 0.5


def tsdf_fuse(depth_maps, alphas, cameras: list[Camera], bbox_min, bbox_max, cfg: TsdfConfig = TsdfConfig(),
              chunk: int = 1 << 18) -> TsdfGrid:
    """Weighted TSDF fusion of ray-distance depth maps.

    ``depth_maps[i]`` holds, per pixel, the distance along the pixel's ray from
    the camera centre. Only pixels with alpha above the threshold contribute.
    The grid is a cube over the padded box. Voxels that no view sees as
    background and that are only ever seen more than the truncation distance
    behind a surface are marked solid.
    """
    if not (len(depth_maps) == len(alphas) == len(cameras)):
        raise ConfigError("depth maps, alphas and cameras must have the same length")
    for dm, am, cam in zip(depth_maps, alphas, cameras):
        if np.shape(dm) != (cam.height, cam.width) or np.shape(am) != (cam.height, cam.width):
            raise ConfigError("depth/alpha map size does not match its camera")
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    ext = (hi - lo).max() * (1.0 + 2.0 * cfg.padding)
    n = cfg.resolution
    vs = ext / n
    origin = 0.5 * (lo + hi) - 0.5 * ext
    grid = TsdfGrid(origin, vs, np.ones((n, n, n)), np.zeros((n, n, n)))
    tau = cfg.trunc_voxels * vs
    tsdf = grid.tsdf.reshape(-1)
    weight = grid.weight.reshape(-1)
    centers = grid.centers()
    behind = np.zeros_like(weight)
    seen_empty = np.zeros(len(weight), dtype=bool)
    for dm, am, cam in zip(depth_maps, alphas, cameras):
        dm = np.asarray(dm, dtype=np.float64)
        am = np.asarray(am, dtype=np.float64)
        c = cam.center
        for s in range(0, len(centers), chunk):
            p = centers[s : s + chunk]
            px, py, z = cam.project(p)
            with np.errstate(invalid="ignore"):
                ix = np.floor(px).astype(np.int64)
                iy = np.floor(py).astype(np.int64)
            ok = (z > 0) & (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
            idx = np.nonzero(ok)[0]
            ix, iy = ix[idx], iy[idx]
            valid = am[iy, ix] > cfg.alpha_threshold
            seen_empty[s + idx[~valid]] = True
            idx, ix, iy = idx[valid], ix[valid], iy[valid]
            dist = np.linalg.norm(p[idx] - c, axis=1)
            sdf = dm[iy, ix] - dist
            keep = sdf >= -tau
            behind[s + idx[~keep]] += 1.0
            idx, sdf = idx[keep], sdf[keep]
            g = s + idx
            val = np.minimum(1.0, sdf / tau)
            w = weight[g]
            tsdf[g] = (tsdf[g] * w + val) / (w + 1.0)
            weight[g] = w + 1.0
    # seen only from behind a surface: solid interior rather than unknown
    solid = (weight == 0) & (behind > 0) & ~seen_empty
    tsdf[solid] = -1.0
    weight[solid] = 1.0
    return grid


def marching_cubes(grid: TsdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Zero level set of the grid; unobserved voxels count as outside.

    Faces are wound so their normals point towards increasing TSDF.
    """
    from skimage import measure

    vol = np.where(grid.weight > 0, grid.tsdf, 1.0)
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(grid.voxel_size,) * 3,
                                                allow_degenerate=False)
    verts = verts + grid.origin + 0.5 * grid.voxel_size
    mesh = TriangleMesh(verts, faces.astype(np.int64)).cleaned()
    return mesh


def sdf_grid(fn, origin, voxel_size: float, resolution: int) -> TsdfGrid:
    """Sample an analytic signed distance function into a (fully observed) grid."""
    g = TsdfGrid(np.asarray(origin, dtype=np.float64), voxel_size, np.zeros((resolution,) * 3),
                 np.ones((resolution,) * 3))
    g.tsdf = np.asarray(fn(g.centers()), dtype=np.float64).reshape((resolution,) * 3)
    return g


# --------------------------------------------------------------------------
# surface sampling


@dataclass(frozen=True)
class SurfaceSamples:
    point: np.ndarray
    normal: np.ndarray
    dir: np.ndarray
    tri: np.ndarray

    def __len__(self) -> int:
        return len(self.point)


def uniform_hemisphere(n: np.ndarray, u1, u2) -> np.ndarray:
    """Directions uniform on the hemisphere about ``n`` (``cos(theta) = u1``)."""
    cos_t = np.asarray(u1)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * np.asarray(u2)
    t, b = orthonormal_basis(n)
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], -1)
    return local[..., :1] * t + local[..., 1:2] * b + local[..., 2:] * n


def sample_surface(mesh: TriangleMesh, n_samples: int, rng: DetRng, iteration: int = 0,
                   area_weighted: bool = False) -> SurfaceSamples:
    """Random surface points with outgoing directions on the normal's hemisphere.

    Triangles are picked uniformly by index unless ``area_weighted``; points
    are uniform inside the triangle (square-root barycentric mapping).
    """
    if mesh.n_triangles == 0:
        raise EmptyMeshError("cannot sample an empty mesh")
    i = np.arange(n_samples)
    u = [rng.uniform(i, iteration, dim) for dim in range(5)]
    if area_weighted:
        cdf = np.cumsum(mesh.areas)
        tri = np.minimum(np.searchsorted(cdf, u[0] * cdf[-1], side="right"), mesh.n_triangles - 1)
    else:
        tri = np.minimum((u[0] * mesh.n_triangles).astype(np.int64), mesh.n_triangles - 1)
    s = np.sqrt(u[1])
    bary = np.stack([1.0 - s, s * (1.0 - u[2]), s * u[2]], -1)
    tv = mesh.vertices[mesh.triangles[tri]]
    point = np.einsum("nk,nkc->nc", bary, tv)
    normal = mesh.face_normals[tri]
    d = uniform_hemisphere(normal, u[3], u[4])
    return SurfaceSamples(point, normal, d, tri)
