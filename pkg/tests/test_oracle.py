import json
import math

import numpy as np
import pytest

from rotinv.core import Camera, look_at, read_pfm
from rotinv.envlight import rot_y
from rotinv.meshproxy import load_obj
from rotinv.oracle import SCENES, ao_reference, gbuffer, gen_dataset, make_scene, path_trace
from rotinv.oracle.scenes import MaterialDef, SceneDescription, fibonacci_poses, floor_albedo, floor_quad, make_env


def flat_scene(albedo=0.5, env_value=1.5):
    env = np.full((8, 16, 3), env_value)
    return SceneDescription("flat", [MaterialDef((albedo,) * 3, 0.8)], [floor_quad(50.0, 0)], env=env)


def test_lambert_floor_under_constant_sky():
    scene = flat_scene()
    cam = Camera.from_fov(8, 8, math.radians(20), look_at((0, 3, 0.01), (0, 0, 0)))
    rgb, alpha, var = path_trace(scene, cam, spp=256, max_bounces=1, specular=False)
    assert np.all(alpha == 1)
    z = (rgb - 0.75) / np.sqrt(var + 1e-30)
    assert np.abs(z).max() < 5
    assert rgb.mean() == pytest.approx(0.75, abs=0.01)


def test_gbuffer_on_the_floor():
    scene = flat_scene()
    cam = Camera.from_fov(5, 5, math.radians(30), look_at((0, 2, 0.0001), (0, 0, 0)))
    g = gbuffer(scene, cam)
    assert g["alpha"][2, 2] == 1.0
    assert g["depth"][2, 2] == pytest.approx(2.0, abs=1e-6)
    np.testing.assert_allclose(g["normal"][2, 2], [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(g["albedo"][2, 2], 0.5)
    np.testing.assert_allclose(g["point"][..., 1], 0.0, atol=1e-9)


def test_patterned_albedo_in_gbuffer():
    scene = make_scene("shadow-box")
    cam = Camera.from_fov(16, 16, math.radians(30), look_at((1.2, 2.5, 1.2), (1.0, 0, 1.0)))
    g = gbuffer(scene, cam)
    hit = (g["alpha"] > 0) & (np.abs(g["point"][..., 1]) < 1e-9)
    p = g["point"][hit]
    np.testing.assert_allclose(g["albedo"][hit], floor_albedo(scene.materials[0].albedo, p[:, 0], p[:, 2]), atol=1e-9)


def test_light_rotation_equals_counter_rotated_camera():
    # floor square plus centred sphere is symmetric under quarter turns about +y
    scene = make_scene("sphere-plane")
    c2w = look_at((1.5, 1.8, 2.0), (0, 0.2, 0))
    cam = Camera.from_fov(12, 12, math.radians(40), c2w)
    phi = math.pi / 2
    R = np.eye(4)
    R[:3, :3] = rot_y(-phi)
    cam_r = Camera.from_fov(12, 12, math.radians(40), R @ c2w)
    a = path_trace(scene, cam, 0.0, spp=1024, seed=3)[0]
    noise = np.abs(a - path_trace(scene, cam, 0.0, spp=1024, seed=4)[0]).mean()
    b = path_trace(scene, cam_r, phi, spp=1024, seed=3)[0]
    c = path_trace(scene, cam, phi, spp=1024, seed=3)[0]
    # the rotated pair differs only by Monte Carlo noise; the unrotated camera does not
    assert np.abs(a - b).mean() < 1.5 * noise
    assert np.abs(a - c).mean() > 2 * noise


def test_path_trace_is_seeded():
    scene = make_scene("sphere-plane")
    cam = Camera.from_fov(6, 6, math.radians(40), look_at((1.5, 1.8, 2.0), (0, 0.2, 0)))
    a = path_trace(scene, cam, spp=4, seed=1)[0]
    assert np.array_equal(a, path_trace(scene, cam, spp=4, seed=1)[0])
    assert not np.array_equal(a, path_trace(scene, cam, spp=4, seed=2)[0])


def test_path_trace_argument_checks():
    with pytest.raises(ValueError):
        path_trace(flat_scene(), Camera.from_fov(2, 2, 1.0, look_at((0, 1, 0.1), (0, 0, 0))), spp=0)


def test_ao_below_a_sphere_matches_cone_angle():
    scene = make_scene("sphere-plane")
    sp = scene.spheres[0]
    h = sp.center[1]
    ao = ao_reference(scene, [[0.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]], n_samples=200_000)
    # uniform hemisphere: the sphere blocks directions within asin(r / h) of the normal
    assert ao[0] == pytest.approx(math.sqrt(1 - (sp.radius / h) ** 2), abs=3e-3)


def test_ao_open_floor_is_one():
    ao = ao_reference(flat_scene(), [[0.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]], n_samples=1000)
    assert ao[0] == 1.0


def test_scene_registry_and_meshes():
    assert set(SCENES) == {"shadow-box", "sphere-plane", "two-box-cavity", "textured-cube"}
    for name in SCENES:
        s = make_scene(name)
        m = s.mesh()
        lo, hi = s.bounds()
        assert m.n_triangles > 0
        assert np.all(m.vertices >= lo - 1e-9) and np.all(m.vertices <= hi + 1e-9)
    with pytest.raises(KeyError):
        make_scene("nope")


def test_mesh_matches_analytic_intersections():
    scene = make_scene("two-box-cavity")
    cam = Camera.from_fov(16, 16, math.radians(45), look_at((1.5, 2.0, 2.5), scene.target))
    from rotinv.meshproxy import MeshProxy

    g = gbuffer(scene, cam)
    o, d = cam.pixel_rays()
    h = MeshProxy(scene.mesh()).intersect(o, d, t_min=0.0)
    hit = g["alpha"].reshape(-1) > 0
    assert np.array_equal(h.hit, hit)
    np.testing.assert_allclose(h.t[hit], g["depth"].reshape(-1)[hit], atol=1e-9)


def test_env_has_a_sun():
    env = make_env(16)
    assert env.shape == (16, 32, 3) and env.max() > 5 * np.median(env)


def test_fibonacci_poses_look_at_target():
    for m in fibonacci_poses(10, 3.0, (0, 0.5, 0)):
        eye = m[:3, 3]
        assert np.linalg.norm(eye - [0, 0.5, 0]) == pytest.approx(3.0)
        fwd = -m[:3, 2]
        np.testing.assert_allclose(fwd, ([0, 0.5, 0] - eye) / 3.0, atol=1e-12)
        assert eye[1] > 0.5


def test_gen_dataset_layout(tmp_path):
    out = gen_dataset("sphere-plane", (0.0, 90.0), n_train=2, n_test=1, resolution=8, spp=2, out_dir=tmp_path,
                      ao_samples=8)
    meta = json.loads((out / "transforms_train.json").read_text())
    assert [f["light_angle_deg"] for f in meta["frames"]] == [0.0, 0.0, 90.0, 90.0]
    # poses are shared across angles
    assert meta["frames"][0]["transform_matrix"] == meta["frames"][2]["transform_matrix"]
    for suffix in ("", "_albedo", "_roughness", "_normal", "_ao"):
        assert (out / "test" / f"r_000{suffix}.pfm").exists()
    assert read_pfm(out / "train" / "r_003.pfm").shape == (8, 8, 3)
    info = json.loads((out / "scene.json").read_text())
    assert info["angles_deg"] == [0.0, 90.0] and info["extent"] > 0
    assert load_obj(out / "gt_mesh.obj").n_triangles > 0
