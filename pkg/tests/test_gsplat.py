import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rotinv import gsplat
from rotinv.core import Camera, Ray, look_at, normalize
from rotinv.gsplat import (Gaussians, blend_along_ray, composite_material, quat_to_rotmat, ray_gaussian_hit,
                           render_maps, rotmat_to_quat, sh_eval, trace_gaussians)


def facing_disks(zs, opacity=0.5, scale=0.3):
    """Disks centred on the z axis, normals along +z."""
    mu = np.array([[0.0, 0.0, z] for z in zs])
    return Gaussians.create(mu, normals=np.tile([0.0, 0.0, 1.0], (len(zs), 1)), scales=scale, opacity=opacity)


def random_scene(n, seed=0, sh_degree=1):
    rng = np.random.default_rng(seed)
    g = Gaussians.create(rng.uniform(-0.5, 0.5, (n, 3)), normals=normalize(rng.normal(size=(n, 3))),
                         scales=rng.uniform(0.05, 0.2, (n, 2)), opacity=0.7, sh_degree=sh_degree)
    with torch.no_grad():
        g.sh.copy_(torch.tensor(rng.normal(0, 0.3, tuple(g.sh.shape))))
        g.albedo_logit.copy_(torch.tensor(rng.normal(size=(n, 3))))
        g.roughness_logit.copy_(torch.tensor(rng.normal(size=n)))
    return g


def test_single_disk_centre_hit():
    g = facing_disks([0.0], opacity=0.6)
    with torch.no_grad():
        b = blend_along_ray([[0.0, 0.0, 2.0]], [[0.0, 0.0, -1.0]], g)
    assert float(b.alpha[0]) == pytest.approx(0.6, abs=1e-12)
    assert float(b.depth[0]) == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(b.normal[0].detach().numpy(), [0, 0, 1], atol=1e-12)


def test_off_centre_weight_is_gaussian():
    g = facing_disks([0.0], opacity=0.8, scale=0.2)
    hit = ray_gaussian_hit(Ray(np.array([0.3, 0.1, 1.0]), np.array([0.0, 0.0, -1.0])), g, 0)
    t, u, v, w = hit
    assert t == pytest.approx(1.0)
    assert u * u + v * v == pytest.approx((0.3 ** 2 + 0.1 ** 2) / 0.04)
    assert w == pytest.approx(0.8 * math.exp(-0.5 * (0.1 / 0.04)))


def test_hit_outside_three_sigma_is_dropped():
    g = facing_disks([0.0], opacity=1.0, scale=0.1)
    assert ray_gaussian_hit(Ray(np.array([0.31, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])), g, 0) is None


def test_parallel_ray_misses():
    g = facing_disks([0.0])
    b = blend_along_ray([[-1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], g)
    assert not bool(b.valid[0]) and float(b.alpha[0]) == 0.0 and math.isinf(float(b.depth[0]))


def test_two_disks_composite_front_to_back():
    g = facing_disks([0.0, 0.5], opacity=0.4)
    with torch.no_grad():
        g.albedo_logit.copy_(torch.tensor([[10.0, -10, -10], [-10, 10.0, -10]]))
    b = blend_along_ray([[0.0, 0.0, 2.0]], [[0.0, 0.0, -1.0]], g)
    a = 0.4
    assert float(b.alpha[0]) == pytest.approx(1 - (1 - a) ** 2, abs=1e-12)
    # nearer disk (index 1, z=0.5) weighs a, the far one a(1-a)
    np.testing.assert_allclose(b.weights[0].detach().numpy(), [a, a * (1 - a)], atol=1e-12)
    assert list(b.gidx[0].numpy()) == [1, 0]
    expected_depth = (a * 1.5 + a * (1 - a) * 2.0) / (1 - (1 - a) ** 2)
    assert float(b.depth[0]) == pytest.approx(expected_depth, abs=1e-12)


def test_transmittance_cutoff_stops_compositing():
    g = facing_disks(np.linspace(0, 1, 20), opacity=0.999)
    b = blend_along_ray([[0.0, 0.0, 3.0]], [[0.0, 0.0, -1.0]], g)
    w = b.weights[0].detach().numpy()
    assert w[0] == pytest.approx(0.999)
    assert np.all(w[3:] == 0.0)


def test_t_range_excludes_hits():
    g = facing_disks([0.0, 1.0], opacity=0.5)
    b = blend_along_ray([[0.0, 0.0, 2.0]], [[0.0, 0.0, -1.0]], g, t_min=1.5)
    assert list(b.gidx[0].numpy()) == [0]
    b = blend_along_ray([[0.0, 0.0, 2.0]], [[0.0, 0.0, -1.0]], g, t_max=1.5)
    assert list(b.gidx[0].numpy()) == [1]


def test_trace_gaussians_offset_skips_nearby_disks():
    g = facing_disks([0.0, -1.0], opacity=0.5)
    _, a0, d0 = trace_gaussians([[0.0, 0.0, 0.01]], [[0.0, 0.0, -1.0]], 0.0, 1.0, g)
    _, a1, d1 = trace_gaussians([[0.0, 0.0, 0.01]], [[0.0, 0.0, -1.0]], 0.05, 1.0, g)
    assert float(a0[0]) == pytest.approx(0.75) and float(a1[0]) == pytest.approx(0.5)
    assert float(d1[0]) == pytest.approx(1.01)
    with pytest.raises(ValueError):
        trace_gaussians([[0.0, 0.0, 0.0]], [[0.0, 0.0, -1.0]], -0.1, 1.0, g)


def test_bvh_candidates_match_all_pairs(monkeypatch):
    g = random_scene(150, seed=1)
    rng = np.random.default_rng(2)
    o = rng.uniform(-1.5, 1.5, (300, 3))
    d = normalize(rng.normal(size=(300, 3)))
    with torch.no_grad():
        via_bvh = blend_along_ray(o, d, g)
        monkeypatch.setattr(gsplat, "_ALL_PAIRS_MAX", 10_000)
        brute = blend_along_ray(o, d, g)
    for name in ("color", "alpha", "depth", "normal", "albedo", "roughness"):
        assert torch.equal(getattr(via_bvh, name), getattr(brute, name)), name


def test_primitive_order_does_not_change_the_image():
    g = random_scene(40, seed=3)
    perm = np.random.default_rng(4).permutation(40)
    h = Gaussians(*(getattr(g, f).detach().numpy()[perm] for f in Gaussians.FIELDS))
    cam = Camera.from_fov(12, 12, math.radians(50), look_at((0.3, 0.4, 2.5), (0, 0, 0)))
    a, b = render_maps(cam, g), render_maps(cam, h)
    for name in ("color", "alpha", "albedo"):
        np.testing.assert_allclose(a[name].numpy(), b[name].numpy(), atol=1e-12)


def test_composite_material_matches_blend():
    g = random_scene(30, seed=5)
    rng = np.random.default_rng(6)
    o = np.tile([0.0, 0.0, 2.0], (100, 1))
    d = normalize(np.c_[rng.uniform(-0.3, 0.3, (100, 2)), -np.ones(100)])
    b = blend_along_ray(o, d, g)
    alb, rough = composite_material(b.weights, b.gidx, g)
    v = b.valid
    torch.testing.assert_close(alb[v], b.albedo[v])
    torch.testing.assert_close(rough[v], b.roughness[v])


def test_blend_gradients_match_finite_differences():
    g = random_scene(4, seed=7, sh_degree=1)
    rng = np.random.default_rng(8)
    o = np.tile([0.0, 0.0, 2.0], (16, 1))
    d = normalize(np.c_[rng.uniform(-0.25, 0.25, (16, 2)), -np.ones(16)])
    inputs = tuple(getattr(g, f).detach().clone().requires_grad_(True) for f in Gaussians.FIELDS)

    def fn(*xs):
        h = Gaussians(*(x.detach().numpy() for x in xs))
        for name, x in zip(Gaussians.FIELDS, xs):
            h._parameters[name] = x
        b = blend_along_ray(o, d, h)
        return torch.cat([b.color.reshape(-1), b.albedo.reshape(-1), b.roughness, b.alpha, b.depth[b.valid]])

    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-5)


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-2))
def test_quaternion_round_trip(q):
    R = quat_to_rotmat(torch.tensor([q], dtype=torch.float64)).numpy()
    np.testing.assert_allclose(R[0] @ R[0].T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R[0]) == pytest.approx(1.0, abs=1e-12)
    R2 = quat_to_rotmat(torch.tensor(rotmat_to_quat(R))).numpy()
    np.testing.assert_allclose(R2, R, atol=1e-12)


def test_create_sets_normal_column():
    n = normalize(np.array([[1.0, 2.0, -0.5]]))
    g = Gaussians.create([[0.0, 0.0, 0.0]], normals=n)
    np.testing.assert_allclose(g.rotations()[0, :, 2].detach().numpy(), n[0], atol=1e-12)


def sh_basis(d, deg):
    n = (deg + 1) ** 2
    eye = torch.eye(n, dtype=torch.float64)
    # coefficient e_i on the red channel; undo the DC offset and clamp by shifting far positive
    c = torch.zeros((n, n, 3), dtype=torch.float64)
    c[:, :, 0] = eye
    c[:, 0, 0] += 100.0
    d = torch.as_tensor(d)
    out = sh_eval(c[None].expand(len(d), n, n, 3), d[:, None, :].expand(len(d), n, 3))[..., 0]
    out = out - 0.5 - 100.0 * gsplat.SH_C0
    return out.numpy()


def test_sh_basis_is_orthonormal():
    deg = 3
    # tensor-product Gauss-Legendre grid; exact for these polynomial degrees
    xs, ws = np.polynomial.legendre.leggauss(12)
    phis = np.arange(24) * (2 * math.pi / 24)
    ct, ph = np.meshgrid(xs, phis, indexing="ij")
    st_ = np.sqrt(1 - ct ** 2)
    d = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], -1).reshape(-1, 3)
    w = (ws[:, None] * np.full_like(ph, 2 * math.pi / 24)).reshape(-1)
    Y = sh_basis(d, deg)
    gram = (Y * w[:, None]).T @ Y
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-10)


def test_sh_dc_only_is_constant():
    c = torch.zeros((1, 4, 3), dtype=torch.float64)
    c[0, 0] = torch.tensor([0.2, 0.0, -2.0])
    out = sh_eval(c.expand(5, 4, 3), torch.tensor(normalize(np.random.default_rng(0).normal(size=(5, 3)))))
    np.testing.assert_allclose(out.numpy(), np.tile([0.5 + 0.2 * gsplat.SH_C0, 0.5, 0.0], (5, 1)), atol=1e-15)


def test_sh_rejects_bad_count():
    with pytest.raises(ValueError):
        sh_eval(torch.zeros((1, 5, 3)), torch.zeros((1, 3)))


def test_checkpoint_round_trip_is_exact(tmp_path):
    g = random_scene(7, seed=9, sh_degree=2)
    g.save(tmp_path / "g.txt")
    h = Gaussians.load(tmp_path / "g.txt")
    for f in Gaussians.FIELDS:
        assert torch.equal(getattr(g, f), getattr(h, f)), f


def test_checkpoint_rejects_unknown_version(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# something-else 2\n0 0 0\n")
    with pytest.raises(ValueError):
        Gaussians.load(p)


def test_render_maps_shapes_and_background():
    g = facing_disks([0.0], opacity=0.9, scale=0.1)
    cam = Camera.from_fov(9, 7, math.radians(60), look_at((0, 0, 2), (0, 0, 0)))
    m = render_maps(cam, g)
    assert m["color"].shape == (7, 9, 3) and m["alpha"].shape == (7, 9)
    assert float(m["alpha"][0, 0]) == 0.0 and float(m["alpha"][3, 4]) > 0.8


def test_derived_quantities_in_range():
    g = random_scene(50, seed=10)
    with torch.no_grad():
        assert torch.all((g.albedo() > 0) & (g.albedo() < 1))
        assert torch.all((g.roughness() >= gsplat.ROUGHNESS_MIN) & (g.roughness() <= 1))
        assert torch.all((g.opacity() > 0) & (g.opacity() < 1))
