"""Optimizable equirectangular environment light with rotated lookups."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import read_pfm, write_pfm


def rot_y(phi: float) -> np.ndarray:
    """Rotation about the up (+y) axis by ``phi`` radians."""
    if not math.isfinite(phi):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class LightAngleTable:
    angles: tuple[float, ...]

    def __post_init__(self):
        if len(self.angles) < 1:
            raise ValueError("need at least one light angle")
        for a in self.angles:
            if not (0.0 <= a < 2 * math.pi):
                raise ValueError(f"light angle {a} outside [0, 2pi)")

    @classmethod
    def from_degrees(cls, degrees) -> "LightAngleTable":
        return cls(tuple(math.radians(d % 360.0) for d in degrees))

    @property
    def K(self) -> int:
        return len(self.angles)

    def matrix(self, k: int) -> np.ndarray:
        if not 0 <= k < self.K:
            raise IndexError(f"light index {k} out of range for K={self.K}")
        return rot_y(self.angles[k])

    def matrices(self) -> np.ndarray:
        return np.stack([rot_y(a) for a in self.angles])


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20, y, np.log(np.expm1(np.maximum(y, 1e-12))))


def direction_to_uv(d):
    """Equirectangular coordinates in [0, 1] for unit directions (torch)."""
    u = 0.5 + torch.atan2(d[..., 0], -d[..., 2]) / (2 * math.pi)
    v = torch.acos(d[..., 1].clamp(-1.0, 1.0)) / math.pi
    return u, v


def uv_to_direction(u, v):
    """Inverse of :func:`direction_to_uv` (numpy)."""
    theta = np.asarray(v) * math.pi
    phi = (np.asarray(u) - 0.5) * 2 * math.pi
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], -1)


def bilinear_equirect(tex: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Bilinear texture lookup with horizontal wrap and vertical clamp.

    Within half a texel of a pole the result blends linearly towards the
    mean of the pole row, reaching it exactly at ``d.y = +-1``.
    """
    H, W, _ = tex.shape
    u, v = direction_to_uv(d)
    fx = u * W - 0.5
    fy = v * H - 0.5
    x0 = torch.floor(fx)
    y0 = torch.floor(fy)
    wx = (fx - x0).unsqueeze(-1)
    wy = (fy - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    xa = torch.remainder(x0, W)
    xb = torch.remainder(x0 + 1, W)
    ya = y0.clamp(0, H - 1)
    yb = (y0 + 1).clamp(0, H - 1)
    c = (tex[ya, xa] * (1 - wx) + tex[ya, xb] * wx) * (1 - wy) + (tex[yb, xa] * (1 - wx) + tex[yb, xb] * wx) * wy
    # pole caps
    top = tex[0].mean(0)
    bottom = tex[H - 1].mean(0)
    wt = (-fy / 0.5).clamp(0.0, 1.0).unsqueeze(-1)
    wb = ((fy - (H - 1)) / 0.5).clamp(0.0, 1.0).unsqueeze(-1)
    c = c * (1 - wt) + top * wt
    c = c * (1 - wb) + bottom * wb
    return c


class EnvironmentMap(torch.nn.Module):
    """Equirectangular radiance map ``E`` with ``W = 2H``; radiance = softplus(raw)."""

    def __init__(self, height: int = 16, init_radiance=0.5, dtype=torch.float64):
        super().__init__()
        if height < 1:
            raise ValueError("env height must be positive")
        init = np.broadcast_to(np.asarray(init_radiance, dtype=np.float64), (height, 2 * height, 3))
        self.raw = torch.nn.Parameter(torch.tensor(softplus_inverse(init), dtype=dtype))

    @classmethod
    def from_radiance(cls, radiance, dtype=torch.float64) -> "EnvironmentMap":
        radiance = np.asarray(radiance, dtype=np.float64)
        h, w = radiance.shape[:2]
        if w != 2 * h:
            raise ValueError("environment map must have width = 2 * height")
        return cls(h, radiance, dtype=dtype)

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]

    def radiance(self) -> torch.Tensor:
        return F.softplus(self.raw)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        return bilinear_equirect(self.radiance(), d)

    def save(self, path) -> None:
        write_pfm(path, self.radiance().detach().cpu().numpy())

    @classmethod
    def load(cls, path, dtype=torch.float64) -> "EnvironmentMap":
        return cls.from_radiance(np.maximum(read_pfm(path), 0.0), dtype=dtype)


def env_lookup(env: EnvironmentMap, d) -> torch.Tensor:
    d = torch.as_tensor(d, dtype=env.raw.dtype)
    return env(d)


def rotate_dirs(d: torch.Tensor, k, table: LightAngleTable) -> torch.Tensor:
    """Apply ``R_{phi_k}`` to directions; ``k`` is an int or a per-direction index tensor.

    Each output component is the row dot product evaluated left to right,
    ``m0*x + m1*y + m2*z``, so it reproduces a plain scalar evaluation exactly.
    """
    mats = torch.as_tensor(table.matrices(), dtype=d.dtype)
    if isinstance(k, (int, np.integer)):
        if not 0 <= k < table.K:
            raise IndexError(f"light index {k} out of range for K={table.K}")
        m = mats[int(k)]
    else:
        k = torch.as_tensor(k, dtype=torch.long)
        if k.numel() and (int(k.min()) < 0 or int(k.max()) >= table.K):
            raise IndexError(f"light index out of range for K={table.K}")
        m = mats[k]
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rows = [m[..., i, 0] * x + m[..., i, 1] * y + m[..., i, 2] * z for i in range(3)]
    return torch.stack(rows, -1)


def env_lookup_rotated(env: EnvironmentMap, d, k, table: LightAngleTable) -> torch.Tensor:
    d = torch.as_tensor(d, dtype=env.raw.dtype)
    return env(rotate_dirs(d, k, table))
