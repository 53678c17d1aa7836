"""Per-light-angle neural radiance caches ``R_k(x, d)``.

Each cache is a multiresolution hash grid over the scene box plus a sinusoidal
direction encoding, followed by a small ReLU MLP with a softplus output.
Caches for different light indices are independent modules.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import DetRng

_PRIMES = (1, 2654435761, 805459861)
_MAGIC = b"RCACHE01"
INIT_RADIANCE = 0.1


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.5

    def __post_init__(self):
        if self.levels < 1 or self.features < 1 or self.base_resolution < 1:
            raise ValueError("hash grid needs levels, features and base resolution >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("hash table size must be a power of two")
        if self.growth < 1.0:
            raise ValueError("growth factor must be >= 1")

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth**level))

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


@dataclass(frozen=True)
class CacheConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    n_freq: int = 4
    hidden: int = 256

    @property
    def in_dim(self) -> int:
        return self.grid.out_dim + 6 * self.n_freq


def hash_index(ix: torch.Tensor, iy: torch.Tensor, iz: torch.Tensor, table_size: int) -> torch.Tensor:
    h = (ix * _PRIMES[0]) ^ (iy * _PRIMES[1]) ^ (iz * _PRIMES[2])
    return h & (table_size - 1)


def encode_position(cfg: HashGridConfig, tables: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Trilinear hash-grid features for ``x`` in the unit cube (clamped), shape ``(N, L*F)``."""
    x = x.clamp(0.0, 1.0)
    feats = []
    for lvl in range(cfg.levels):
        pos = x * cfg.resolution(lvl)
        p0 = torch.floor(pos)
        w = pos - p0
        i0 = p0.long()
        acc = 0.0
        for corner in range(8):
            bits = [(corner >> a) & 1 for a in range(3)]
            idx = hash_index(i0[:, 0] + bits[0], i0[:, 1] + bits[1], i0[:, 2] + bits[2], cfg.table_size)
            wc = 1.0
            for a in range(3):
                wc = wc * (w[:, a] if bits[a] else 1.0 - w[:, a])
            acc = acc + wc[:, None] * tables[lvl, idx]
        feats.append(acc)
    return torch.cat(feats, -1)


def encode_direction(d: torch.Tensor, n_freq: int) -> torch.Tensor:
    """``[sin(2^j pi d), cos(2^j pi d)]`` per frequency ``j``, dimension ``6 * n_freq``."""
    out = []
    for j in range(n_freq):
        a = (2.0**j * math.pi) * d
        out += [torch.sin(a), torch.cos(a)]
    return torch.cat(out, -1)


class RadianceCache(torch.nn.Module):
    """Cache for light index ``k``; positions are normalized by the scene box."""

    def __init__(self, k: int, box_min, box_max, cfg: CacheConfig = CacheConfig(), seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.k = int(k)
        self.cfg = cfg
        self.seed = int(seed)
        self.register_buffer("box_min", torch.as_tensor(np.asarray(box_min, dtype=np.float64), dtype=dtype))
        self.register_buffer("box_max", torch.as_tensor(np.asarray(box_max, dtype=np.float64), dtype=dtype))
        gen = torch.Generator().manual_seed(int(DetRng(seed).bits(k, 0xCAC4E) >> np.uint64(1)))
        g = cfg.grid
        self.tables = torch.nn.Parameter(
            (torch.rand((g.levels, g.table_size, g.features), generator=gen, dtype=torch.float64) * 2e-4 - 1e-4).to(dtype))
        dims = [cfg.in_dim, cfg.hidden, cfg.hidden, 3]
        layers = []
        for i in range(3):
            lin = torch.nn.Linear(dims[i], dims[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(dims[i])
            with torch.no_grad():
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                lin.bias.copy_((torch.rand(lin.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            layers.append(lin)
        with torch.no_grad():
            layers[-1].weight.zero_()
            layers[-1].bias.fill_(math.log(math.expm1(INIT_RADIANCE)))
        self.layers = torch.nn.ModuleList(layers)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.box_min) / (self.box_max - self.box_min)

    def forward(self, x, d) -> torch.Tensor:
        dtype = self.tables.dtype
        x = torch.as_tensor(x, dtype=dtype).reshape(-1, 3)
        d = torch.as_tensor(d, dtype=dtype).reshape(-1, 3)
        h = torch.cat([encode_position(self.cfg.grid, self.tables, self.normalize(x)),
                       encode_direction(d, self.cfg.n_freq)], -1)
        h = F.relu(self.layers[0](h))
        h = F.relu(self.layers[1](h))
        return F.softplus(self.layers[2](h))

    # ---- checkpoint -----------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = {"k": self.k, "seed": self.seed, "n_freq": self.cfg.n_freq, "hidden": self.cfg.hidden,
                "grid": asdict(self.cfg.grid), "dtype": str(self.tables.dtype).replace("torch.", ""),
                "box_min": self.box_min.tolist(), "box_max": self.box_max.tolist()}
        blob = json.dumps(meta, sort_keys=True).encode()
        flat = torch.nn.utils.parameters_to_vector(self.parameters()).detach().to(torch.float64).numpy()
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
        buf.write(flat.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RadianceCache":
        if data[:8] != _MAGIC:
            raise ValueError("not a radiance cache checkpoint")
        (n,) = struct.unpack("<Q", data[8:16])
        meta = json.loads(data[16 : 16 + n])
        cfg = CacheConfig(HashGridConfig(**meta["grid"]), meta["n_freq"], meta["hidden"])
        c = cls(meta["k"], meta["box_min"], meta["box_max"], cfg, meta["seed"], dtype=getattr(torch, meta["dtype"]))
        flat = np.frombuffer(data[16 + n :], dtype="<f8")
        torch.nn.utils.vector_to_parameters(torch.as_tensor(flat.copy(), dtype=c.tables.dtype), c.parameters())
        return c

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RadianceCache":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def make_caches(K: int, box_min, box_max, cfg: CacheConfig = CacheConfig(), seed: int = 0,
                dtype=torch.float32) -> list[RadianceCache]:
    return [RadianceCache(k, box_min, box_max, cfg, seed, dtype) for k in range(K)]


def query_caches(caches, x: torch.Tensor, d: torch.Tensor, k) -> torch.Tensor:
    """Evaluate ``R_k(x, d)`` with a per-row light index ``k`` (int or long tensor)."""
    dtype = x.dtype
    if isinstance(k, (int, np.integer)):
        return caches[int(k)](x, d).to(dtype)
    k = torch.as_tensor(k, dtype=torch.long)
    out = torch.zeros((x.shape[0], 3), dtype=dtype)
    for kk in range(len(caches)):
        sel = torch.nonzero(k == kk)[:, 0]
        if len(sel):
            out = out.index_put((sel,), caches[kk](x[sel], d[sel]).to(dtype))
    return out


@dataclass
class PretrainView:
    """Camera-ray hits of one training view: points, toward-camera dirs, targets."""

    k: int
    point: np.ndarray  # (P, 3) hit points y
    dir: np.ndarray  # (P, 3) unit direction from y toward the camera
    target: np.ndarray  # (P, 3) ground-truth linear radiance


def pretrain_caches(caches, views: list[PretrainView], steps: int = 20000, rng: DetRng = DetRng(0),
                    batch: int = 4096, lr: float = 1e-3, log=None) -> list[float]:
    """Fit each cache to the radiance seen along camera rays at its light angle.

    Each step draws one view, samples ``batch`` of its hit pixels, and takes
    an Adam step on that view's cache with an MSE loss. Returns per-step losses.
    """
    views = [v for v in views if len(v.point)]
    if not views:
        raise ValueError("no camera ray hits the geometry; cannot pretrain caches")
    opts = [torch.optim.Adam(c.parameters(), lr=lr) for c in caches]
    losses = []
    for step in range(steps):
        v = views[int(rng.integers(len(views), step, 0))]
        idx = rng.integers(len(v.point), step, 1, np.arange(min(batch, len(v.point))))
        c = caches[v.k]
        dtype = c.tables.dtype
        pred = c(torch.as_tensor(v.point[idx], dtype=dtype), torch.as_tensor(v.dir[idx], dtype=dtype))
        loss = ((pred - torch.as_tensor(v.target[idx], dtype=dtype)) ** 2).mean()
        opts[v.k].zero_grad(set_to_none=True)
        loss.backward()
        opts[v.k].step()
        losses.append(loss.item())
        if log is not None and (step % 500 == 0 or step == steps - 1):
            log(step, losses[-1])
    return losses
