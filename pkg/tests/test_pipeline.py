import json
import math
import warnings

import numpy as np
import pytest

from rotinv.core import DetRng, look_at, write_pfm, write_png
from rotinv.meshproxy import ConfigError, TriangleMesh, load_obj
from rotinv.pipeline import cli
from rotinv.pipeline.config import RunConfig, config_from_dict, load_config
from rotinv.pipeline.dataset import DatasetError, load_dataset
from rotinv.pipeline.metrics import (PSNR_CAP, EmptyMaskError, compute_metrics, masked_mse, masked_psnr,
                                     masked_ssim, psnr_from_mse, region_mask, scale_align)
from rotinv.pipeline.run import Run
from rotinv.pipeline.stage1 import seed_on_mesh


# ---- dataset -------------------------------------------------------------


def write_toy_dataset(root, angles, n=2, size=6, missing_angle=False):
    (root / "train").mkdir(parents=True)
    frames = []
    i = 0
    for a in angles:
        for j in range(n):
            name = f"r_{i:03d}"
            rgb = np.full((size, size, 3), 0.1 * (i + 1))
            alpha = np.zeros((size, size))
            alpha[1:-1, 1:-1] = 1.0
            write_pfm(root / "train" / f"{name}.pfm", rgb)
            write_png(root / "train" / f"{name}.png", rgb, alpha)
            fr = {"file_path": f"./train/{name}", "transform_matrix": look_at((0, 0, 3 + j), (0, 0, 0)).tolist()}
            if not missing_angle:
                fr["light_angle_deg"] = a
            frames.append(fr)
            i += 1
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.7, "frames": frames}))
    return root


def test_dataset_groups_frames_by_angle(tmp_path):
    ds = load_dataset(write_toy_dataset(tmp_path, [0.0, 120.0, 240.0]), "train")
    assert ds.K == 3 and len(ds.frames) == 6
    assert [f.k for f in ds.frames] == [0, 0, 1, 1, 2, 2]
    np.testing.assert_allclose(ds.table.angles, np.radians([0, 120, 240]))
    # linear PFM wins over the sRGB PNG; the mask is the PNG alpha
    np.testing.assert_allclose(ds.frames[0].rgb, 0.1, atol=1e-6)
    assert ds.frames[0].mask[0, 0] == 0 and ds.frames[0].mask[2, 2] == 1


def test_restrict_and_with_table(tmp_path):
    ds = load_dataset(write_toy_dataset(tmp_path, [0.0, 120.0, 240.0]), "train")
    sub = ds.restrict([2, 0])
    assert sub.K == 2 and sorted(f.k for f in sub.frames) == [0, 0, 1, 1]
    assert all((f.k == 0) == (f.angle_deg == 240.0) for f in sub.frames)
    with pytest.raises(DatasetError):
        ds.restrict([3])
    re = sub.with_table([240.0, 0.0, 120.0])
    assert [f.k for f in re.frames if f.angle_deg == 0.0] == [1, 1]
    with pytest.raises(DatasetError):
        ds.with_table([0.0])


def test_missing_light_angle_defaults_to_zero(tmp_path):
    write_toy_dataset(tmp_path, [0.0], missing_angle=True)
    with pytest.warns(UserWarning):
        ds = load_dataset(tmp_path, "train")
    assert ds.K == 1 and ds.angles_deg == (0.0,)


def test_angles_are_wrapped(tmp_path):
    ds = load_dataset(write_toy_dataset(tmp_path, [-120.0, 240.0, 360.0]), "train")
    assert ds.K == 2 and ds.angles_deg == (240.0, 0.0)


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5, "frames": []}))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text(json.dumps(
        {"camera_angle_x": 0.5, "frames": [{"file_path": "./nothing", "transform_matrix": np.eye(4).tolist()}]}))
    with pytest.raises(DatasetError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        load_dataset(tmp_path, "train")


# ---- config --------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=3)
    cfg.stage2.lambda_residual = 2.5
    cfg.save(tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="stage2.bogus"):
        config_from_dict({"stage2": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"steps": "many"}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"backend": "voxels"}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"n_samples": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({"cache": {"table_size": 1000}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage1": {"known_geometry": 1}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("[")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_config_coerces_integers_to_float():
    cfg = config_from_dict({"stage2": {"lambda_residual": 10}, "lights": [0, 2]})
    assert cfg.stage2.lambda_residual == 10.0 and isinstance(cfg.stage2.lambda_residual, float)
    assert cfg.lights == [0, 2]


# ---- metrics -------------------------------------------------------------


def test_psnr_values():
    assert psnr_from_mse(0.01) == pytest.approx(20.0)
    assert psnr_from_mse(0.0) == PSNR_CAP
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    m = np.ones((4, 4))
    assert masked_mse(a, b, m) == pytest.approx(0.01)
    assert masked_psnr(a, b, m) == pytest.approx(20.0)


def test_metrics_ignore_pixels_outside_the_mask():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[0] = 1.0
    m = np.ones((8, 8))
    m[0] = 0
    assert masked_psnr(a, b, m) == PSNR_CAP
    with pytest.raises(EmptyMaskError):
        masked_mse(a, b, np.zeros((8, 8)))
    with pytest.raises(ValueError):
        masked_mse(a, b, np.ones((4, 4)))


def test_ssim_identity_and_sensitivity():
    rng = np.random.default_rng(0)
    a = rng.random((24, 24, 3))
    m = np.ones((24, 24))
    assert masked_ssim(a, a, m) == pytest.approx(1.0)
    assert masked_ssim(a, np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1), m) < 0.9


def test_scale_alignment_recovers_global_scale():
    rng = np.random.default_rng(1)
    gts = [rng.uniform(0.1, 0.5, (12, 12, 3)) for _ in range(3)]
    preds = [g / np.array([2.0, 0.5, 1.25]) for g in gts]
    masks = [np.ones((12, 12))] * 3
    np.testing.assert_allclose(scale_align(preds, gts, masks), [2.0, 0.5, 1.25])
    rep = compute_metrics(preds, gts, [np.zeros((12, 12))] * 3, [np.zeros((12, 12))] * 3, masks)
    assert rep.aggregate()["albedo_psnr_aligned"] == PSNR_CAP
    assert rep.aggregate()["albedo_psnr"] < 20


def test_metrics_csv_is_full_precision(tmp_path):
    a = np.full((12, 12, 3), 0.3)
    rep = compute_metrics([a], [a + 1e-3], [a[..., 0]], [a[..., 0]], [np.ones((12, 12))], ["v"])
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("view,albedo_psnr") and lines[-1].startswith("mean,")
    assert float(lines[1].split(",")[1]) == rep.views[0].albedo_psnr


def test_region_mask():
    p = np.array([[[0, 0, 0], [2, 0, 0]]], dtype=float)
    assert region_mask(p, (-1, -1, -1), (1, 1, 1)).tolist() == [[True, False]]


# ---- stage 1 -------------------------------------------------------------


def test_seed_on_mesh_places_disks_on_faces():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1], [0, 1, 0], [1, 1, 0], [0, 1, 1.0]])
    mesh = TriangleMesh(v, [[0, 2, 1], [3, 5, 4]])
    g = seed_on_mesh(mesh, 200, DetRng(0), scale_factor=0.9)
    mu = g.mu.detach().numpy()
    assert np.all(np.isclose(mu[:, 1], 0) | np.isclose(mu[:, 1], 1))
    nrm = g.rotations()[:, :, 2].detach().numpy()
    np.testing.assert_allclose(np.abs(nrm[:, 1]), 1.0, atol=1e-12)
    s = g.scales().detach().numpy()
    np.testing.assert_allclose(s, 0.9 * math.sqrt(1.0 / 200), rtol=1e-12)


# ---- CLI -----------------------------------------------------------------


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["stage2", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "c.json").write_text(json.dumps({"stage2": {"oops": 1}}))
    assert cli.main(["stage2", "--config", str(tmp_path / "c.json")]) == 2
    assert "oops" in capsys.readouterr().err
    assert cli.main(["stage2", "--lights", "a,b", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["stage1", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "o")]) == 2


TINY = {
    "seed": 1,
    "gen": {"scene": "sphere-plane", "angles_deg": [0.0, 120.0], "n_train": 8, "n_test": 2, "resolution": 16,
            "spp": 4, "max_bounces": 2, "ao_samples": 16},
    "stage1": {"steps": 10, "known_geometry": True, "batch_rays": 256, "n_gaussians": 300},
    "cache": {"steps": 10, "batch": 256, "hidden": 16, "levels": 2, "table_size": 256},
    "stage2": {"steps": 3, "patch": 8, "n_samples": 4, "n_residual": 32, "n_residual_inner": 4, "env_height": 4},
    "render": {"n_samples": 4, "relight_bounce_samples": 2, "ao_samples": 8},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = config_from_dict({**TINY, "data": str(root / "data"), "out": str(root / "run")})
    rep = Run(cfg).all()
    return cfg, rep, root


def test_end_to_end_outputs(tiny_run):
    cfg, rep, root = tiny_run
    out = root / "run"
    for name in ("config.json", "gaussians_s1.txt", "proxy_mesh.obj", "cache_0.bin", "cache_1.bin", "losses.csv",
                 "metrics.csv", "manifest.json", "stage2/env.pfm", "stage2/gaussians.txt"):
        assert (out / name).exists(), name
    assert len((out / "losses.csv").read_text().splitlines()) == 1 + cfg.stage2.steps
    assert np.isfinite(list(rep.aggregate().values())).all()
    # known geometry: the proxy is the ground-truth mesh
    assert np.array_equal(load_obj(out / "proxy_mesh.obj").vertices, load_obj(root / "data" / "gt_mesh.obj").vertices)


def test_stage2_keeps_geometry_frozen(tiny_run):
    _, _, root = tiny_run
    a = (root / "run" / "gaussians_s1.txt").read_text().splitlines()
    b = (root / "run" / "stage2" / "gaussians.txt").read_text().splitlines()
    a_rows = np.loadtxt(a[4:], ndmin=2)
    b_rows = np.loadtxt(b[4:], ndmin=2)
    # columns 0..9 are position, rotation, scale and opacity
    assert np.array_equal(a_rows[:, :10], b_rows[:, :10])
    assert not np.array_equal(a_rows[:, -4:], b_rows[:, -4:])


def test_cli_stages_reproduce_metrics_bitwise(tiny_run, tmp_path):
    cfg, _, root = tiny_run
    c = config_from_dict({**TINY, "data": str(root / "data"), "out": str(tmp_path / "again")})
    c.save(tmp_path / "cfg.json")
    for cmd in ("stage1", "pretrain-cache", "stage2", "metrics"):
        assert cli.main([cmd, "--config", str(tmp_path / "cfg.json"), "--quiet"]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (root / "run" / "metrics.csv").read_bytes()


def test_render_relight_and_ao_commands(tiny_run):
    cfg, _, root = tiny_run
    r = Run(cfg)
    imgs = r.render(n_samples=2, frames=[0])
    assert next(iter(imgs.values())).shape == (16, 16, 3)
    rl = r.relight(n_samples=2, frames=[0])
    assert np.isfinite(next(iter(rl.values()))).all()
    ao = r.ao("mesh", n_samples=4, frames=[0])
    a = next(iter(ao.values()))
    assert a.min() >= 0 and a.max() <= 1
    aog = r.ao("gaussian", 0.05, n_samples=4, frames=[0])
    assert next(iter(aog.values())).shape == (16, 16)


def test_cli_exit_code_for_numeric_failure(tiny_run, tmp_path, monkeypatch):
    from rotinv.optim import NumericError
    from rotinv.pipeline import run as run_mod

    cfg, _, root = tiny_run

    def boom(self):
        raise NumericError("data", 0)

    monkeypatch.setattr(run_mod.Run, "stage2", boom)
    assert cli.main(["stage2", "--data", str(root / "data"), "--out", str(tmp_path), "--quiet"]) == 3
