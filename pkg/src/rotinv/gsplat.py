"""2D Gaussian surfels evaluated exactly along rays.

Every ray is intersected with each candidate disk's plane, the hit is mapped
to the disk's local ``(u, v)`` coordinates and weighted by
``opacity * exp(-(u^2 + v^2) / 2)``. Hits are sorted by distance (ties by
primitive index) and composited front to back. Camera rendering and the
ray-trace operator used for incident queries go through the same function,
:func:`blend_along_ray`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import bvh as _bvh
from .core import Camera

CUTOFF_SQ = 9.0
WEIGHT_FLOOR = 1.0 / 255.0
T_EPS = 1e-4
PARALLEL_EPS = 1e-9
ROUGHNESS_MIN = 0.04
_ALL_PAIRS_MAX = 64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def gauss_value(u, v):
    """Standard 2D Gaussian, zero outside the 3-sigma disk."""
    xp = torch if isinstance(u, torch.Tensor) else np
    r2 = u * u + v * v
    return xp.where(r2 <= CUTOFF_SQ, xp.exp(-0.5 * r2), 0.0 * r2)


def sh_eval(coeffs: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Real SH colour for coefficients ``(..., (deg+1)^2, 3)`` along unit ``d (..., 3)``.

    Uses the 0.5 DC offset convention and clamps at zero.
    """
    n = coeffs.shape[-2]
    deg = int(round(math.sqrt(n))) - 1
    if (deg + 1) ** 2 != n or deg > 3:
        raise ValueError(f"unsupported SH coefficient count {n}")
    x, y, z = (d[..., i : i + 1] for i in range(3))
    c = coeffs
    out = SH_C0 * c[..., 0, :]
    if deg >= 1:
        out = out - SH_C1 * y * c[..., 1, :] + SH_C1 * z * c[..., 2, :] - SH_C1 * x * c[..., 3, :]
    if deg >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out = (out + SH_C2[0] * xy * c[..., 4, :] + SH_C2[1] * yz * c[..., 5, :]
               + SH_C2[2] * (2 * zz - xx - yy) * c[..., 6, :] + SH_C2[3] * xz * c[..., 7, :]
               + SH_C2[4] * (xx - yy) * c[..., 8, :])
    if deg >= 3:
        out = (out + SH_C3[0] * y * (3 * xx - yy) * c[..., 9, :] + SH_C3[1] * xy * z * c[..., 10, :]
               + SH_C3[2] * y * (4 * zz - xx - yy) * c[..., 11, :]
               + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * c[..., 12, :]
               + SH_C3[4] * x * (4 * zz - xx - yy) * c[..., 13, :] + SH_C3[5] * z * (xx - yy) * c[..., 14, :]
               + SH_C3[6] * x * (xx - 3 * yy) * c[..., 15, :])
    return (out + 0.5).clamp_min(0.0)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Columns ``[t_u, t_v, n]`` for quaternions ``(w, x, y, z)`` (normalized here)."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for proper rotations (numpy, batched)."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    q = np.empty((len(R), 4))
    for i, m in enumerate(R):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


class Gaussians(torch.nn.Module):
    """Raw, unconstrained per-surfel parameters.

    Derived quantities: ``scales = exp(log_scale)``, ``opacity = sigmoid``,
    ``albedo = sigmoid``, ``roughness = 0.04 + 0.96 * sigmoid``.
    """

    FIELDS = ("mu", "quat", "log_scale", "opacity_logit", "sh", "albedo_logit", "roughness_logit")

    def __init__(self, mu, quat, log_scale, opacity_logit, sh, albedo_logit, roughness_logit,
                 dtype=torch.float64):
        super().__init__()

        def p(x):
            return torch.nn.Parameter(torch.tensor(np.array(x, dtype=np.float64), dtype=dtype))

        self.mu = p(mu)
        self.quat = p(quat)
        self.log_scale = p(log_scale)
        self.opacity_logit = p(opacity_logit)
        self.sh = p(sh)
        self.albedo_logit = p(albedo_logit)
        self.roughness_logit = p(roughness_logit)

    @classmethod
    def create(cls, mu, normals=None, tangents=None, scales=0.05, opacity=0.9, sh_degree=1, albedo=0.5,
               roughness=0.5, rotations=None, dtype=torch.float64) -> "Gaussians":
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        if rotations is None:
            rotations = np.tile(np.eye(3), (n, 1, 1))
            if normals is not None:
                nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
                if tangents is None:
                    from .core import orthonormal_basis

                    tu, tv = orthonormal_basis(nrm)
                else:
                    tu = np.asarray(tangents, dtype=np.float64)
                    tv = np.cross(nrm, tu)
                rotations = np.stack([tu, tv, nrm], -1)
        quat = rotmat_to_quat(rotations)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2)) if np.ndim(scales) < 2 else scales
        sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
        rough = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (n,))
        return cls(mu, quat, np.log(scales), np.broadcast_to(logit(opacity), (n,)), sh,
                   np.broadcast_to(logit(albedo), (n, 3)), logit((rough - ROUGHNESS_MIN) / (1 - ROUGHNESS_MIN)),
                   dtype=dtype)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    def rotations(self) -> torch.Tensor:
        return quat_to_rotmat(self.quat)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def albedo(self) -> torch.Tensor:
        return torch.sigmoid(self.albedo_logit)

    def roughness(self) -> torch.Tensor:
        return ROUGHNESS_MIN + (1 - ROUGHNESS_MIN) * torch.sigmoid(self.roughness_logit)

    def geometry_params(self) -> list[torch.nn.Parameter]:
        return [self.mu, self.quat, self.log_scale, self.opacity_logit]

    def material_params(self) -> list[torch.nn.Parameter]:
        return [self.albedo_logit, self.roughness_logit]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-primitive axis-aligned boxes of the 3-sigma disks."""
        with torch.no_grad():
            R = self.rotations()
            s = self.scales()
            half = math.sqrt(CUTOFF_SQ) * (R[..., :, 0].abs() * s[:, :1] + R[..., :, 1].abs() * s[:, 1:])
            mu = self.mu
            lo = (mu - half).cpu().numpy().astype(np.float64)
            hi = (mu + half).cpu().numpy().astype(np.float64)
        pad = 1e-9 * (1.0 + np.abs(lo) + np.abs(hi))
        return lo - pad, hi + pad

    # ---- checkpoint -----------------------------------------------------

    def save(self, path) -> None:
        """Text table, one row per primitive; see ``column_names``."""
        cols = self.column_names(self.sh_degree)
        with torch.no_grad():
            table = torch.cat([self.mu, self.quat, self.log_scale, self.opacity_logit[:, None],
                               self.sh.reshape(len(self), -1), self.albedo_logit, self.roughness_logit[:, None]], 1)
        header = f"rotinv-gaussians 1\nsh_degree {self.sh_degree}\ncount {len(self)}\ncolumns {' '.join(cols)}"
        np.savetxt(path, table.cpu().numpy().astype(np.float64), fmt="%.17g", header=header)

    @staticmethod
    def column_names(sh_degree: int) -> list[str]:
        n_sh = (sh_degree + 1) ** 2
        return (["mu_x", "mu_y", "mu_z", "q_w", "q_x", "q_y", "q_z", "log_su", "log_sv", "opacity_logit"]
                + [f"sh{i}_{c}" for i in range(n_sh) for c in "rgb"]
                + ["albedo_logit_r", "albedo_logit_g", "albedo_logit_b", "roughness_logit"])

    @classmethod
    def load(cls, path, dtype=torch.float64) -> "Gaussians":
        meta = {}
        with open(path) as f:
            for line in f:
                if not line.startswith("#"):
                    break
                k, *v = line[1:].split()
                meta[k] = v
        if meta.get("rotinv-gaussians") != ["1"]:
            raise ValueError(f"{path}: unsupported gaussian checkpoint version")
        deg = int(meta["sh_degree"][0])
        n_sh = (deg + 1) ** 2
        data = np.loadtxt(path, ndmin=2).reshape(-1, 14 + 3 * n_sh)
        i = 10 + 3 * n_sh
        return cls(data[:, 0:3], data[:, 3:7], data[:, 7:9], data[:, 9], data[:, 10:i].reshape(-1, n_sh, 3),
                   data[:, i : i + 3], data[:, i + 3], dtype=dtype)

    def clone_detached(self) -> "Gaussians":
        return Gaussians(*(getattr(self, f).detach().cpu().numpy() for f in self.FIELDS), dtype=self.mu.dtype)


# --------------------------------------------------------------------------
# ray evaluation


@dataclass
class RayBlend:
    """Composited per-ray quantities. ``valid`` is False where alpha == 0."""

    color: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    albedo: torch.Tensor
    roughness: torch.Tensor
    valid: torch.Tensor
    weights: torch.Tensor  # (R, M) compositing weight per sorted slot
    gidx: torch.Tensor  # (R, M) primitive index per slot (-1 = empty)


def _candidates(o: np.ndarray, d: np.ndarray, tmin: np.ndarray, tmax: np.ndarray, g: Gaussians):
    n_r, n_g = len(o), len(g)
    if n_g == 0 or n_r == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e
    if n_g <= _ALL_PAIRS_MAX:
        ray = np.repeat(np.arange(n_r), n_g)
        gi = np.tile(np.arange(n_g), n_r)
        return ray, gi
    lo, hi = g.bounds()
    tree = _bvh.build(lo, hi)
    offsets, flat = _bvh.overlapping_prims(o, d, tmin, np.where(np.isfinite(tmax), tmax, 1e300), tree.bmin,
                                           tree.bmax, tree.left, tree.right, tree.start, tree.count, tree.order)
    ray = np.repeat(np.arange(n_r), np.diff(offsets))
    return ray, flat


def _pair_hits(o: torch.Tensor, d: torch.Tensor, g: Gaussians, ray: torch.Tensor, gi: torch.Tensor):
    """Differentiable ray/disk intersection for candidate pairs."""
    R = g.rotations()[gi]
    s = g.scales()[gi]
    mu = g.mu[gi]
    n = R[..., :, 2]
    oo, dd = o[ray], d[ray]
    denom = (dd * n).sum(-1)
    ok_den = denom.detach().abs() >= PARALLEL_EPS
    safe = torch.where(ok_den, denom, torch.ones_like(denom))
    t = ((mu - oo) * n).sum(-1) / safe
    p = oo + t[:, None] * dd
    local = p - mu
    u = (local * R[..., :, 0]).sum(-1) / s[:, 0]
    v = (local * R[..., :, 1]).sum(-1) / s[:, 1]
    w = g.opacity()[gi] * gauss_value(u, v)
    return t, u, v, w, ok_den, n


def ray_gaussian_hit(ray, g: Gaussians, index: int):
    """Single ray against primitive ``index``: ``(t, u, v, weight)`` or None."""
    o = torch.as_tensor(ray.origin, dtype=g.mu.dtype)[None]
    d = torch.as_tensor(ray.dir, dtype=g.mu.dtype)[None]
    with torch.no_grad():
        t, u, v, w, ok, _ = _pair_hits(o, d, g, torch.zeros(1, dtype=torch.long), torch.tensor([index]))
    t, u, v, w = float(t[0]), float(u[0]), float(v[0]), float(w[0])
    if not bool(ok[0]) or not t > ray.t_min or t > ray.t_max or w < WEIGHT_FLOOR:
        return None
    return t, u, v, w


def blend_along_ray(origins, dirs, g: Gaussians, t_min=0.0, t_max=math.inf, view_dirs=None,
                    with_color: bool = True) -> RayBlend:
    """Front-to-back composite of every disk hit along each ray.

    ``origins``/``dirs`` are ``(R, 3)`` tensors or arrays; ``t_min``/``t_max``
    scalars or per-ray. SH colour is evaluated along ``view_dirs`` (default
    ``dirs``). Gradients flow to all Gaussian parameters through the hit
    weights and attributes; the hit ordering itself is piecewise constant.
    """
    dtype = g.mu.dtype
    o = torch.as_tensor(origins, dtype=dtype).reshape(-1, 3)
    d = torch.as_tensor(dirs, dtype=dtype).reshape(-1, 3)
    n_r = d.shape[0]
    if o.shape[0] == 1 and n_r > 1:
        o = o.expand(n_r, 3)
    o_np = o.detach().cpu().numpy().astype(np.float64)
    d_np = d.detach().cpu().numpy().astype(np.float64)
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n_r,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n_r,)))
    ray_np, gi_np = _candidates(np.ascontiguousarray(o_np), np.ascontiguousarray(d_np), tmin, tmax, g)

    ray = torch.from_numpy(ray_np)
    gi = torch.from_numpy(gi_np)
    t, u, v, w, ok, nrm = _pair_hits(o, d, g, ray, gi)
    t_d = t.detach().cpu().numpy().astype(np.float64)
    w_d = w.detach().cpu().numpy().astype(np.float64)
    keep = ok.cpu().numpy() & (t_d > tmin[ray_np]) & (t_d <= tmax[ray_np]) & (w_d >= WEIGHT_FLOOR)
    sel = np.nonzero(keep)[0]
    # canonical order: by ray, then distance, then primitive index
    sel = sel[np.lexsort((gi_np[sel], t_d[sel], ray_np[sel]))]
    r_sel = ray_np[sel]
    counts = np.bincount(r_sel, minlength=n_r)
    m = int(counts.max()) if n_r and len(sel) else 0
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(sel)) - starts[r_sel]

    sel_t = torch.from_numpy(sel)
    idx = (torch.from_numpy(r_sel), torch.from_numpy(slot))

    def pack(x, fill=0.0):
        shape = (n_r, m) + tuple(x.shape[1:])
        out = torch.full(shape, fill, dtype=x.dtype)
        return out.index_put(idx, x[sel_t])

    a = pack(w)
    td = pack(t)
    gidx = pack(gi, -1)
    occupied = pack(torch.ones(len(gi), dtype=torch.bool), False)
    # orient each disk normal towards the ray origin
    facing = torch.where(((nrm * d[ray]).sum(-1, keepdim=True) > 0), -nrm, nrm)
    nrm_p = pack(facing)
    gsafe = gidx.clamp_min(0)
    alb_p = g.albedo()[gsafe]
    rough_p = g.roughness()[gsafe]

    T = torch.ones(n_r, dtype=dtype)
    weights = []
    for j in range(m):
        alive = occupied[:, j] & (T.detach() >= T_EPS)
        wj = torch.where(alive, a[:, j] * T, torch.zeros_like(T))
        T = torch.where(alive, T * (1.0 - a[:, j]), T)
        weights.append(wj)
    W = torch.stack(weights, 1) if m else torch.zeros((n_r, 0), dtype=dtype)

    alpha = _accumulate(W, torch.ones_like(W)[..., None])[:, 0] if m else torch.zeros(n_r, dtype=dtype)
    valid = alpha.detach() > 0
    safe_alpha = torch.where(valid, alpha, torch.ones_like(alpha))
    if with_color and m:
        vd = d if view_dirs is None else torch.as_tensor(view_dirs, dtype=dtype).reshape(-1, 3)
        col_p = sh_eval(g.sh[gsafe], vd[:, None, :].expand(n_r, m, 3))
        color = _accumulate(W, col_p)
    else:
        color = torch.zeros((n_r, 3), dtype=dtype)
    if m:
        depth = _accumulate(W, td[..., None])[:, 0] / safe_alpha
        nsum = _accumulate(W, nrm_p)
        albedo = _accumulate(W, alb_p) / safe_alpha[:, None]
        rough = _accumulate(W, rough_p[..., None])[:, 0] / safe_alpha
    else:
        depth = torch.zeros(n_r, dtype=dtype)
        nsum = torch.zeros((n_r, 3), dtype=dtype)
        albedo = torch.zeros((n_r, 3), dtype=dtype)
        rough = torch.zeros(n_r, dtype=dtype)
    nlen = torch.linalg.norm(nsum, dim=-1, keepdim=True)
    nvalid = valid & (nlen[:, 0].detach() > 0)
    normal = torch.where(nvalid[:, None], nsum / torch.where(nvalid[:, None], nlen, torch.ones_like(nlen)),
                         torch.zeros_like(nsum))
    normal = torch.where(((normal * d).sum(-1, keepdim=True) > 0), -normal, normal)
    inf = torch.full_like(depth, math.inf)
    depth = torch.where(valid, depth, inf)
    zero1 = torch.zeros_like(rough)
    return RayBlend(color, alpha, depth, normal, torch.where(valid[:, None], albedo, torch.zeros_like(albedo)),
                    torch.where(valid, rough, zero1), valid, W, gidx)


def _accumulate(W: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Sum over slots in front-to-back order: ``sum_j W[:, j] * values[:, j]``."""
    acc = W[:, 0, None] * values[:, 0]
    for j in range(1, W.shape[1]):
        acc = acc + W[:, j, None] * values[:, j]
    return acc


def composite_material(W: torch.Tensor, gidx: torch.Tensor, g: Gaussians):
    """Albedo/roughness for precomputed slot weights (frozen geometry)."""
    alpha = _accumulate(W, torch.ones_like(W)[..., None])[:, 0]
    valid = alpha.detach() > 0
    safe = torch.where(valid, alpha, torch.ones_like(alpha))
    gs = gidx.clamp_min(0)
    albedo = _accumulate(W, g.albedo()[gs]) / safe[:, None]
    rough = _accumulate(W, g.roughness()[gs][..., None])[:, 0] / safe
    return albedo, rough


def trace_gaussians(origins, dirs, offset_factor: float, scene_extent: float, g: Gaussians):
    """Ray-trace operator for incident queries: ``(c_rt, alpha_rt, depth)``.

    The origin is skipped forward by ``offset_factor * scene_extent``.
    """
    if offset_factor < 0:
        raise ValueError("offset_factor must be non-negative")
    b = blend_along_ray(origins, dirs, g, t_min=offset_factor * scene_extent)
    return b.color, b.alpha, b.depth


def render_maps(camera: Camera, g: Gaussians, chunk: int = 4096, grad: bool = False) -> dict[str, torch.Tensor]:
    """Per-pixel colour/alpha/depth/normal/albedo/roughness maps at pixel centres."""
    o, d = camera.pixel_rays()
    parts = []
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        for s in range(0, len(d), chunk):
            b = blend_along_ray(o[s : s + chunk], d[s : s + chunk], g)
            parts.append(b)
        out = {}
        for name in ("color", "alpha", "depth", "normal", "albedo", "roughness", "valid"):
            x = torch.cat([getattr(b, name) for b in parts], 0)
            out[name] = x.reshape((camera.height, camera.width) + tuple(x.shape[1:]))
    return out
