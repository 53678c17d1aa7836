"""Synthetic light-rotation dataset generator (NeRF-Blender directory layout)."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..core import Camera, write_pfm, write_png
from ..meshproxy import save_obj
from .scenes import fibonacci_poses, make_scene
from .tracer import ao_reference, gbuffer, path_trace


def scene_cameras(scene, n: int, resolution: int, phase: float = 0.0) -> list[Camera]:
    fov = math.radians(scene.fov_deg)
    return [Camera.from_fov(resolution, resolution, fov, m)
            for m in fibonacci_poses(n, scene.cam_radius, scene.target, phase=phase)]


def _frame(path: str, cam: Camera, angle_deg: float) -> dict:
    return {"file_path": path, "transform_matrix": cam.c2w.tolist(), "light_angle_deg": float(angle_deg)}


def gen_dataset(scene_name: str, angles_deg=(0.0, 120.0, 240.0), n_train: int = 32, n_test: int = 8,
                resolution: int = 128, spp: int = 256, out_dir="data", seed: int = 0, max_bounces: int = 4,
                ao_samples: int = 256, env_height: int = 16, test_angle_deg: float | None = None, log=None) -> Path:
    """Render a dataset: ``n_train`` poses per light angle, ``n_test`` held-out poses.

    Training poses are shared across angles, so the ``K=1`` subset (first
    angle) of a ``K=3`` dataset has the same views as a plain capture.
    Test views are rendered at ``test_angle_deg`` (default: the first angle)
    with ground-truth albedo, roughness, normal and AO maps.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    scene = make_scene(scene_name, env_height)
    fov = math.radians(scene.fov_deg)
    train_cams = scene_cameras(scene, n_train, resolution)
    test_cams = scene_cameras(scene, n_test, resolution, phase=0.5)
    frames = []
    idx = 0
    for ai, ang in enumerate(angles_deg):
        for ci, cam in enumerate(train_cams):
            name = f"r_{idx:03d}"
            rgb, alpha, _ = path_trace(scene, cam, math.radians(ang), spp, max_bounces, seed=seed * 7919 + idx)
            write_pfm(out / "train" / f"{name}.pfm", rgb)
            write_png(out / "train" / f"{name}.png", rgb, alpha)
            frames.append(_frame(f"./train/{name}", cam, ang))
            idx += 1
            if log:
                log(f"train {idx}/{len(angles_deg) * n_train}")
    meta = {"camera_angle_x": fov, "frames": frames}
    (out / "transforms_train.json").write_text(json.dumps(meta, indent=1))

    tang = angles_deg[0] if test_angle_deg is None else test_angle_deg
    mesh = scene.mesh()
    tframes = []
    for ti, cam in enumerate(test_cams):
        name = f"r_{ti:03d}"
        rgb, alpha, _ = path_trace(scene, cam, math.radians(tang), spp, max_bounces, seed=seed * 7919 + 100000 + ti)
        g = gbuffer(scene, cam)
        write_pfm(out / "test" / f"{name}.pfm", rgb)
        write_png(out / "test" / f"{name}.png", rgb, alpha)
        write_pfm(out / "test" / f"{name}_albedo.pfm", g["albedo"])
        write_pfm(out / "test" / f"{name}_roughness.pfm", g["roughness"])
        write_pfm(out / "test" / f"{name}_normal.pfm", g["normal"])
        hit = g["alpha"] > 0
        ao = np.zeros(g["alpha"].shape)
        if hit.any():
            ao[hit] = ao_reference(scene, g["point"][hit], g["normal"][hit], ao_samples, seed=seed + ti)
        write_pfm(out / "test" / f"{name}_ao.pfm", ao)
        tframes.append(_frame(f"./test/{name}", cam, tang))
        if log:
            log(f"test {ti + 1}/{n_test}")
    (out / "transforms_test.json").write_text(json.dumps({"camera_angle_x": fov, "frames": tframes}, indent=1))
    save_obj(mesh, out / "gt_mesh.obj")
    write_pfm(out / "env.pfm", scene.env)
    lo, hi = scene.bounds()
    info = {"scene": scene_name, "angles_deg": list(map(float, angles_deg)), "seed": seed, "spp": spp,
            "max_bounces": max_bounces, "resolution": resolution, "extent": scene.extent,
            "bounds": [lo.tolist(), hi.tolist()], "regions": {k: [list(a), list(b)] for k, (a, b) in scene.regions.items()}}
    (out / "scene.json").write_text(json.dumps(info, indent=1))
    return out
