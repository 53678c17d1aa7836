"""Shared math primitives, counter-based random numbers, images and cameras.

Conventions used throughout the package:

* right-handed world, ``+y`` is up;
* a camera looks down its local ``-z`` axis with ``+y`` up in the image
  (the NeRF/Blender synthetic-data layout); pixel rows grow downwards;
* image data is linear radiometric RGB unless a function says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class InvalidCameraError(ValueError):
    pass


# --------------------------------------------------------------------------
# vectors


def normalize(v, eps: float = 0.0):
    """Normalize the last axis of a numpy array or torch tensor.

    Raises ``ValueError`` for zero-length input when ``eps`` is 0.
    """
    if isinstance(v, torch.Tensor):
        n = torch.linalg.norm(v, dim=-1, keepdim=True)
        if eps > 0:
            return v / n.clamp_min(eps)
        return v / n
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if eps > 0:
        return v / np.maximum(n, eps)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-length vector")
    return v / n


def unit(x: float, y: float, z: float) -> np.ndarray:
    return normalize(np.array([x, y, z], dtype=np.float64))


def orthonormal_basis(n):
    """Tangent frame ``(t, b)`` with ``t x b = n`` for unit normals ``n``.

    Branchless construction of Duff et al. (2017). Works on numpy arrays and
    torch tensors of shape ``(..., 3)``; the sign of ``n.z`` (including -0.0)
    selects the branch so ``n = (0, 0, -1)`` has no singularity.
    """
    xp = torch if isinstance(n, torch.Tensor) else np
    if xp is np:
        n = np.asarray(n, dtype=np.float64)
        sign = np.copysign(1.0, n[..., 2])
    else:
        sign = torch.copysign(torch.ones_like(n[..., 2]), n[..., 2])
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    a = -1.0 / (sign + z)
    b = x * y * a
    t = xp.stack([1.0 + sign * x * x * a, sign * b, -sign * x], -1)
    bt = xp.stack([b, sign + y * y * a, -y], -1)
    return t, bt


# --------------------------------------------------------------------------
# colour transfer


def srgb_to_linear(v):
    """sRGB electro-optical transfer. Accepts bytes (ints 0..255) or floats in [0, 1]."""
    v = np.asarray(v)
    if np.issubdtype(v.dtype, np.integer):
        v = v.astype(np.float64) / 255.0
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1.0 / 2.4) - 0.055)


def linear_to_srgb8(v) -> np.ndarray:
    return np.round(linear_to_srgb(v) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# counter-based RNG

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class DetRng:
    """Stateless random numbers addressed by an integer key tuple.

    ``uniform(a, b, c, ...)`` hashes ``(seed, a, b, c, ...)`` and returns a
    double in ``[0, 1)``. Arguments broadcast like numpy arrays. The output
    for a key never depends on which other keys are evaluated, or in what
    order, so work can be split across threads or batches freely.
    """

    seed: int = 0

    def bits(self, *keys) -> np.ndarray:
        with np.errstate(over="ignore"):
            h = _mix64(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
            for k in keys:
                k = np.asarray(k)
                if np.issubdtype(k.dtype, np.signedinteger) and np.any(k < 0):
                    raise ValueError("rng keys must be non-negative")
                h = _mix64(h ^ (k.astype(np.uint64) * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
            return _mix64(h)

    def uniform(self, *keys) -> np.ndarray:
        return (self.bits(*keys) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def integers(self, high: int, *keys) -> np.ndarray:
        u = self.uniform(*keys)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def child(self, tag: int) -> "DetRng":
        """Independent stream for a sub-task (e.g. one pipeline stage)."""
        return DetRng(int(self.bits(tag)))


# --------------------------------------------------------------------------
# images


@dataclass
class ImageBuffer:
    """Row-major float image of shape ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[2] not in (1, 3, 4):
            raise ValueError(f"unsupported image shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3] if self.channels >= 3 else np.repeat(self.data, 3, axis=2)

    @property
    def alpha(self) -> np.ndarray:
        if self.channels == 4:
            return self.data[..., 3]
        return np.ones(self.data.shape[:2])


def write_pfm(path, image) -> None:
    """Write a 1- or 3-channel float image as little-endian PFM."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        c = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(w * h * c * 4), dtype=dtype)
    data = data.reshape(h, w, c)[::-1].astype(np.float64)
    return data


def write_png(path, linear, alpha=None) -> None:
    """Save linear values as an 8-bit sRGB PNG (optionally with alpha)."""
    from PIL import Image

    rgb = np.asarray(linear, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    out = linear_to_srgb8(rgb[..., :3])
    if alpha is not None:
        a = np.round(np.clip(alpha, 0, 1) * 255).astype(np.uint8)
        out = np.concatenate([out, a[..., None]], axis=2)
    Image.fromarray(out).save(path)


def read_png(path) -> ImageBuffer:
    """Load an 8-bit PNG, decode sRGB to linear; alpha stays linear."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGBA"))
    rgb = srgb_to_linear(arr[..., :3])
    a = arr[..., 3].astype(np.float64) / 255.0
    return ImageBuffer(np.concatenate([rgb, a[..., None]], axis=2))


def read_image(path) -> ImageBuffer:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return ImageBuffer(read_pfm(path))
    if path.suffix.lower() == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format: {path.suffix}")


# --------------------------------------------------------------------------
# rays and cameras


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        if not (math.isfinite(self.t_min) and self.t_min >= 0):
            raise ValueError("t_min must be finite and non-negative")
        d = np.asarray(self.dir, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "dir", d)

    def point_at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.dir


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``c2w`` is a 4x4 rigid camera-to-world transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals) or self.fx <= 0 or self.fy <= 0:
            raise InvalidCameraError(f"invalid intrinsics {vals}")
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
            raise InvalidCameraError("c2w must be a finite 4x4 matrix")
        r = c2w[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise InvalidCameraError("camera rotation is not orthonormal")
        object.__setattr__(self, "c2w", c2w)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, c2w) -> "Camera":
        fx = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, np.asarray(c2w, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    def directions(self, px, py) -> np.ndarray:
        """World-space unit directions through (sub)pixel positions."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        d = np.stack([(px - self.cx) / self.fx, -(py - self.cy) / self.fy, -np.ones_like(px)], -1)
        return normalize(d @ self.c2w[:3, :3].T)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and directions through every pixel centre, row-major ``(H*W, 3)``."""
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = self.directions(jj.ravel() + 0.5, ii.ravel() + 0.5)
        return np.broadcast_to(self.center, d.shape).copy(), d

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points to ``(px, py, depth)`` where depth is along ``-z``."""
        p = np.asarray(points, dtype=np.float64)
        r = self.c2w[:3, :3]
        local = (p - self.c2w[:3, 3]) @ r
        z = -local[..., 2]
        px = self.cx + self.fx * local[..., 0] / z
        py = self.cy - self.fy * local[..., 1] / z
        return px, py, z


def ray_for_pixel(camera: Camera, px: float, py: float) -> Ray:
    return Ray(camera.center, camera.directions(px, py))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` at ``target`` (camera -z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = normalize(np.asarray(target, dtype=np.float64) - eye)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 0.0, 1.0))
    right = normalize(right)
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
    return m
