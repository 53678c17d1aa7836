"""Analytic test scenes built from quads (planes, boxes) and spheres.

The path tracer intersects the analytic primitives directly. The exported
ground-truth triangle mesh tessellates quads into regular grids and spheres
into icospheres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..meshproxy import TriangleMesh

PATTERN_NONE = 0
PATTERN_FLOOR = 1


@dataclass(frozen=True)
class MaterialDef:
    albedo: tuple[float, float, float]
    roughness: float
    pattern: int = PATTERN_NONE


@dataclass(frozen=True)
class Quad:
    """Parallelogram ``origin + s*e1 + t*e2``, ``s, t in [0, 1]``; normal ``e1 x e2``."""

    origin: tuple
    e1: tuple
    e2: tuple
    material: int
    subdiv: int = 1


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: int


@dataclass
class SceneDescription:
    name: str
    materials: list[MaterialDef]
    quads: list[Quad]
    spheres: list[Sphere] = field(default_factory=list)
    env: np.ndarray = None  # (H, 2H, 3) linear radiance
    target: tuple = (0.0, 0.0, 0.0)
    cam_radius: float = 3.0
    fov_deg: float = 40.0
    regions: dict = field(default_factory=dict)  # named axis-aligned boxes (lo, hi) for masks

    def packed(self):
        """Flat arrays for the tracer kernels."""
        q = np.array([[qd.origin, qd.e1, qd.e2] for qd in self.quads], dtype=np.float64).reshape(-1, 3, 3)
        qm = np.array([qd.material for qd in self.quads], dtype=np.int64)
        s = np.array([[*sp.center, sp.radius] for sp in self.spheres], dtype=np.float64).reshape(-1, 4)
        sm = np.array([sp.material for sp in self.spheres], dtype=np.int64)
        alb = np.array([m.albedo for m in self.materials], dtype=np.float64).reshape(-1, 3)
        rough = np.array([m.roughness for m in self.materials], dtype=np.float64)
        pat = np.array([m.pattern for m in self.materials], dtype=np.int64)
        return q, qm, s, sm, alb, rough, pat

    def mesh(self, sphere_subdiv: int = 3) -> TriangleMesh:
        parts = [quad_mesh(q) for q in self.quads]
        for sp in self.spheres:
            v, f = icosphere(sphere_subdiv)
            parts.append(TriangleMesh(v * sp.radius + np.asarray(sp.center), f))
        return TriangleMesh.concatenate(parts).cleaned()

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = []
        for q in self.quads:
            o, a, b = (np.asarray(x, dtype=np.float64) for x in (q.origin, q.e1, q.e2))
            pts += [o, o + a, o + b, o + a + b]
        for sp in self.spheres:
            c = np.asarray(sp.center, dtype=np.float64)
            pts += [c - sp.radius, c + sp.radius]
        pts = np.array(pts)
        return pts.min(0), pts.max(0)

    @property
    def extent(self) -> float:
        lo, hi = self.bounds()
        return 0.5 * float(np.linalg.norm(hi - lo))


def floor_albedo(base, x, z):
    """Smooth low-frequency texture used by patterned materials (numpy)."""
    base = np.asarray(base, dtype=np.float64)
    x = np.asarray(x)[..., None]
    z = np.asarray(z)[..., None]
    ph = np.array([0.0, 2.1, 4.2])
    m = 1.0 + 0.45 * np.sin(2.3 * x + ph) * np.cos(1.9 * z + 0.5 * ph)
    return np.clip(base * m, 0.02, 0.98)


def quad_mesh(q: Quad) -> TriangleMesh:
    n = q.subdiv
    o, a, b = (np.asarray(x, dtype=np.float64) for x in (q.origin, q.e1, q.e2))
    s, t = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1), indexing="ij")
    v = o + s[..., None] * a + t[..., None] * b
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    i00, i10, i01, i11 = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
    f = np.concatenate([np.stack([i00, i10, i11], -1).reshape(-1, 3), np.stack([i00, i11, i01], -1).reshape(-1, 3)])
    return TriangleMesh(v.reshape(-1, 3), f)


def icosphere(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward winding."""
    p = (1 + math.sqrt(5)) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
         (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6),
         (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = list(f)
    for _ in range(subdiv):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.array(verts), np.array(faces, dtype=np.int64)


def box_quads(lo, hi, material: int, open_top: bool = False, bottom: bool = True, subdiv: int = 2) -> list[Quad]:
    """Axis-aligned box faces with outward normals."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    q = [
        Quad((x0, y0, z0), (0, 0, dz), (0, dy, 0), material, subdiv),  # -x
        Quad((x1, y0, z0), (0, dy, 0), (0, 0, dz), material, subdiv),  # +x
        Quad((x0, y0, z0), (0, dy, 0), (dx, 0, 0), material, subdiv),  # -z
        Quad((x0, y0, z1), (dx, 0, 0), (0, dy, 0), material, subdiv),  # +z
    ]
    if not open_top:
        q.append(Quad((x0, y1, z0), (0, 0, dz), (dx, 0, 0), material, subdiv))  # +y
    if bottom:
        q.append(Quad((x0, y0, z0), (dx, 0, 0), (0, 0, dz), material, subdiv))  # -y
    return q


def floor_quad(half: float, material: int, y: float = 0.0, subdiv: int = 8) -> Quad:
    return Quad((-half, y, -half), (0, 0, 2 * half), (2 * half, 0, 0), material, subdiv)


def make_env(height: int = 16, sun_dir=(0.55, 0.6, -0.58), sun_radiance=6.0, sun_sigma_deg=14.0,
             sky=(0.28, 0.32, 0.40), ground=(0.08, 0.07, 0.06)) -> np.ndarray:
    """Sky gradient plus a soft Gaussian sun, sampled at texel centres."""
    H, W = height, 2 * height
    v = (np.arange(H) + 0.5) / H
    u = (np.arange(W) + 0.5) / W
    theta = v[:, None] * math.pi
    phi = (u[None, :] - 0.5) * 2 * math.pi
    d = np.stack([np.sin(theta) * np.sin(phi), np.cos(theta) * np.ones_like(phi), -np.sin(theta) * np.cos(phi)], -1)
    y = d[..., 1:2]
    t = np.clip(y, 0, 1)
    env = np.where(y > 0, (1 - 0.4 * t) * np.asarray(sky) + 0.4 * t * np.asarray(sky) * 1.6, np.asarray(ground))
    sd = np.asarray(sun_dir, dtype=np.float64)
    sd = sd / np.linalg.norm(sd)
    ang = np.arccos(np.clip(d @ sd, -1, 1))
    sig = math.radians(sun_sigma_deg)
    env = env + sun_radiance * np.exp(-0.5 * (ang / sig) ** 2)[..., None] * np.array([1.0, 0.95, 0.85])
    return env


def shadow_box(env_height: int = 16) -> SceneDescription:
    mats = [MaterialDef((0.62, 0.55, 0.45), 0.7, PATTERN_FLOOR), MaterialDef((0.75, 0.72, 0.68), 0.45)]
    quads = [floor_quad(1.5, 0)]
    quads += box_quads((-0.45, 0.0, -0.45), (0.45, 0.55, 0.45), 1, open_top=True, bottom=False)
    return SceneDescription("shadow-box", mats, quads, env=make_env(env_height), target=(0.0, 0.15, 0.0),
                            cam_radius=3.4, fov_deg=45.0, regions={"inside": ((-0.45, -0.01, -0.45), (0.45, 0.56, 0.45))})


def sphere_plane(env_height: int = 16) -> SceneDescription:
    mats = [MaterialDef((0.6, 0.6, 0.6), 0.8), MaterialDef((0.7, 0.45, 0.3), 0.35)]
    quads = [floor_quad(1.5, 0)]
    spheres = [Sphere((0.0, 0.45, 0.0), 0.4, 1)]
    return SceneDescription("sphere-plane", mats, quads, spheres, env=make_env(env_height), target=(0.0, 0.2, 0.0),
                            cam_radius=3.2, fov_deg=45.0)


def two_box_cavity(env_height: int = 16) -> SceneDescription:
    mats = [MaterialDef((0.55, 0.55, 0.55), 0.8), MaterialDef((0.75, 0.3, 0.22), 0.6),
            MaterialDef((0.25, 0.65, 0.3), 0.6)]
    quads = [floor_quad(1.5, 0)]
    gap = 0.16
    quads += box_quads((-0.55 - gap / 2, 0.0, -0.4), (-gap / 2, 0.7, 0.4), 1, bottom=False, subdiv=4)
    quads += box_quads((gap / 2, 0.0, -0.4), (0.55 + gap / 2, 0.7, 0.4), 2, bottom=False, subdiv=4)
    return SceneDescription("two-box-cavity", mats, quads, env=make_env(env_height, sun_dir=(0.2, 0.8, 0.55)),
                            target=(0.0, 0.25, 0.0), cam_radius=3.2, fov_deg=45.0,
                            regions={"cavity": ((-gap / 2 - 1e-3, -0.01, -0.4), (gap / 2 + 1e-3, 0.71, 0.4))})


def textured_cube(env_height: int = 16) -> SceneDescription:
    """A single closed cube with the patterned material (geometry-fit toy scene)."""
    mats = [MaterialDef((0.6, 0.5, 0.4), 0.6, PATTERN_FLOOR)]
    quads = box_quads((-0.4, -0.4, -0.4), (0.4, 0.4, 0.4), 0, subdiv=4)
    return SceneDescription("textured-cube", mats, quads, env=make_env(env_height), target=(0.0, 0.0, 0.0),
                            cam_radius=2.6, fov_deg=40.0)


SCENES = {"shadow-box": shadow_box, "sphere-plane": sphere_plane, "two-box-cavity": two_box_cavity,
          "textured-cube": textured_cube}


def make_scene(name: str, env_height: int = 16) -> SceneDescription:
    if name not in SCENES:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(SCENES)}")
    return SCENES[name](env_height)


def fibonacci_poses(n: int, radius: float, target, elev_min_deg: float = 15.0, elev_max_deg: float = 70.0,
                    phase: float = 0.0) -> list[np.ndarray]:
    """Camera-to-world matrices on an upper-hemisphere Fibonacci spiral looking at ``target``."""
    from ..core import look_at

    golden = math.pi * (3.0 - math.sqrt(5.0))
    s0, s1 = math.sin(math.radians(elev_min_deg)), math.sin(math.radians(elev_max_deg))
    out = []
    for i in range(n):
        h = s0 + (s1 - s0) * (i + 0.5) / n
        az = i * golden + phase
        r = math.sqrt(1 - h * h)
        eye = np.asarray(target) + radius * np.array([r * math.sin(az), h, r * math.cos(az)])
        out.append(look_at(eye, target))
    return out
