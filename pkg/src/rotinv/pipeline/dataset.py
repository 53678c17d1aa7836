"""Light-angle tagged multi-view datasets in the NeRF-Blender layout.

``transforms_{split}.json`` holds ``camera_angle_x`` and a list of frames
with ``file_path`` (no extension), a 4x4 ``transform_matrix`` and an optional
``light_angle_deg``. Images are read from ``<file_path>.pfm`` (linear) when
present, otherwise ``<file_path>.png`` (sRGB). The object mask is the PNG
alpha channel. Test frames may carry ground-truth maps next to the image:
``_albedo``, ``_roughness``, ``_normal`` and ``_ao`` PFMs.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Camera, read_pfm, read_png
from ..envlight import LightAngleTable


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    name: str
    rgb: np.ndarray  # (H, W, 3) linear
    mask: np.ndarray  # (H, W) in [0, 1]
    camera: Camera
    k: int
    angle_deg: float
    gt: dict = field(default_factory=dict)


@dataclass
class Dataset:
    frames: list[Frame]
    table: LightAngleTable
    split: str
    root: Path | None = None
    angles_deg: tuple = ()

    @property
    def K(self) -> int:
        return self.table.K

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].rgb.shape[:2]

    def restrict(self, light_indices) -> "Dataset":
        """Keep frames of the given light indices, renumbered ``0..len-1`` in the given order."""
        light_indices = list(light_indices)
        for k in light_indices:
            if not 0 <= k < self.K:
                raise DatasetError(f"light index {k} out of range for K={self.K}")
        remap = {k: i for i, k in enumerate(light_indices)}
        frames = [Frame(f.name, f.rgb, f.mask, f.camera, remap[f.k], f.angle_deg, f.gt)
                  for f in self.frames if f.k in remap]
        angles = tuple(self.angles_deg[k] for k in light_indices)
        return Dataset(frames, LightAngleTable.from_degrees(angles), self.split, self.root, angles)

    def with_table(self, angles_deg) -> "Dataset":
        """Re-index frames against an externally given angle list (e.g. the training table)."""
        angles_deg = tuple(float(a) for a in angles_deg)
        frames = []
        for f in self.frames:
            k = _angle_index(angles_deg, f.angle_deg)
            if k is None:
                raise DatasetError(f"frame {f.name}: light angle {f.angle_deg} not in {angles_deg}")
            frames.append(Frame(f.name, f.rgb, f.mask, f.camera, k, f.angle_deg, f.gt))
        return Dataset(frames, LightAngleTable.from_degrees(angles_deg), self.split, self.root, angles_deg)


def _angle_index(angles, a) -> int | None:
    for i, b in enumerate(angles):
        if abs(((a - b + 180.0) % 360.0) - 180.0) < 1e-6:
            return i
    return None


def _read_frame_image(base: Path):
    pfm, png = base.with_suffix(".pfm"), base.with_suffix(".png")
    mask = None
    if png.exists():
        img = read_png(png)
        mask = img.alpha
        rgb = img.rgb
    if pfm.exists():
        rgb = read_pfm(pfm)
        if rgb.shape[2] == 1:
            rgb = np.repeat(rgb, 3, axis=2)
    elif not png.exists():
        raise DatasetError(f"missing image for {base}")
    if mask is None:
        mask = np.ones(rgb.shape[:2])
    return rgb, mask


def load_dataset(root, split: str = "train", load_gt: bool = True) -> Dataset:
    root = Path(root)
    path = root / f"transforms_{split}.json"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    try:
        meta = json.loads(path.read_text())
        fov = float(meta["camera_angle_x"])
        raw_frames = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed {path}: {e}") from e
    if not raw_frames:
        raise DatasetError(f"{path} lists no frames")
    angles: list[float] = []
    missing = 0
    parsed = []
    for fr in raw_frames:
        a = fr.get("light_angle_deg")
        if a is None:
            missing += 1
            a = 0.0
        a = float(a) % 360.0
        if _angle_index(angles, a) is None:
            angles.append(a)
        parsed.append((fr, a))
    if missing:
        warnings.warn(f"{missing} frame(s) in {path.name} have no light_angle_deg; assuming 0", stacklevel=2)
    frames = []
    shape = None
    for fr, a in parsed:
        try:
            base = (root / fr["file_path"]).resolve()
            c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed frame in {path}: {e}") from e
        rgb, mask = _read_frame_image(base)
        if shape is None:
            shape = rgb.shape[:2]
        elif rgb.shape[:2] != shape:
            raise DatasetError(f"inconsistent resolution: {base.name} is {rgb.shape[:2]}, expected {shape}")
        h, w = shape
        cam = Camera.from_fov(w, h, fov, c2w)
        gt = {}
        if load_gt:
            for key in ("albedo", "roughness", "normal", "ao"):
                p = base.parent / f"{base.name}_{key}.pfm"
                if p.exists():
                    m = read_pfm(p)
                    gt[key] = m[..., 0] if m.shape[2] == 1 else m
        frames.append(Frame(base.name, rgb, mask, cam, _angle_index(angles, a), a, gt))
    return Dataset(frames, LightAngleTable.from_degrees(angles), split, root, tuple(angles))


def load_scene_info(root) -> dict:
    p = Path(root) / "scene.json"
    return json.loads(p.read_text()) if p.exists() else {}
