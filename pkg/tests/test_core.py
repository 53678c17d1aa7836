import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rotinv.core import (Camera, DetRng, ImageBuffer, InvalidCameraError, Ray, linear_to_srgb, look_at, normalize,
                         orthonormal_basis, ray_for_pixel, read_pfm, read_png, srgb_to_linear, unit, write_pfm,
                         write_png)

unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: normalize(np.array(v)))


def test_principal_point_ray_is_optical_axis():
    cam = Camera(64, 64, 50.0, 50.0, 32.0, 32.0)
    r = ray_for_pixel(cam, 32, 32)
    np.testing.assert_allclose(r.dir, [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(r.origin, 0.0)


def test_equal_focal_lengths_give_symmetric_rays():
    cam = Camera(64, 64, 40.0, 40.0, 32.0, 32.0, look_at((1, 2, 3), (0, 0, 0)))
    axis = ray_for_pixel(cam, 32, 32).dir
    for k in (1.0, 7.5, 20.0):
        a = ray_for_pixel(cam, 32 + k, 32).dir @ axis
        b = ray_for_pixel(cam, 32, 32 + k).dir @ axis
        assert a == pytest.approx(b, abs=1e-12)


@given(st.floats(0, 63.999), st.floats(0, 47.999))
def test_pixel_ray_projection_round_trip(px, py):
    cam = Camera(64, 48, 55.0, 52.0, 31.0, 25.0, look_at((2.0, 1.0, -3.0), (0.1, 0.2, 0.0)))
    r = ray_for_pixel(cam, px, py)
    qx, qy, z = cam.project(r.point_at(5.0))
    assert qx == pytest.approx(px, abs=1e-6)
    assert qy == pytest.approx(py, abs=1e-6)
    assert z > 0


def test_invalid_intrinsics_rejected():
    with pytest.raises(InvalidCameraError):
        Camera(8, 8, float("nan"), 1.0, 4, 4)
    with pytest.raises(InvalidCameraError):
        Camera(8, 8, -1.0, 1.0, 4, 4)
    with pytest.raises(InvalidCameraError):
        Camera(8, 8, 1.0, 1.0, 4, 4, np.diag([2.0, 1, 1, 1]))


def test_pixel_rays_are_pixel_centres_row_major():
    cam = Camera.from_fov(5, 3, 1.0, look_at((0, 0, 4), (0, 0, 0)))
    o, d = cam.pixel_rays()
    assert d.shape == (15, 3)
    np.testing.assert_allclose(d[7], ray_for_pixel(cam, 2.5, 1.5).dir, atol=1e-15)
    np.testing.assert_allclose(o[0], cam.center)


def test_ray_contract():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]))
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), t_min=-1.0)


def test_basis_for_plus_z():
    t, b = orthonormal_basis(np.array([0.0, 0.0, 1.0]))
    n = np.array([0.0, 0.0, 1.0])
    assert t @ n == 0 and b @ n == 0
    np.testing.assert_allclose(np.cross(t, b), n, atol=1e-15)


def test_basis_at_the_singular_direction():
    n = np.array([0.0, 0.0, -1.0])
    t, b = orthonormal_basis(n)
    assert np.all(np.isfinite(t)) and np.all(np.isfinite(b))
    np.testing.assert_allclose(np.cross(t, b), n, atol=1e-15)


@given(unit_vectors)
def test_basis_is_right_handed_orthonormal(n):
    t, b = orthonormal_basis(n)
    assert np.linalg.norm(t) == pytest.approx(1.0, abs=1e-6)
    assert np.linalg.norm(b) == pytest.approx(1.0, abs=1e-6)
    assert abs(t @ n) < 1e-6 and abs(b @ n) < 1e-6 and abs(t @ b) < 1e-6
    np.testing.assert_allclose(np.cross(t, b), n, atol=1e-6)
    t2, b2 = orthonormal_basis(n.copy())
    assert np.array_equal(t, t2) and np.array_equal(b, b2)


def test_zero_length_rejected():
    with pytest.raises(ValueError):
        normalize(np.zeros(3))
    with pytest.raises(ValueError):
        unit(0, 0, 0)


def test_srgb_endpoints_and_midpoint():
    assert srgb_to_linear(np.uint8(0)) == 0.0
    assert srgb_to_linear(np.uint8(255)) == 1.0
    # closed-form transfer evaluated at 30 digits
    assert float(srgb_to_linear(np.uint8(128))) == pytest.approx(0.215860500113899, abs=1e-12)


def test_srgb_round_trip():
    v = np.arange(256, dtype=np.uint8)
    back = linear_to_srgb(srgb_to_linear(v))
    assert np.abs(back - v / 255.0).max() < 1 / 512


def test_detrng_reproducible_and_order_independent():
    r = DetRng(42)
    keys = np.arange(1000)
    a = r.uniform(keys, 3, 7)
    b = r.uniform(keys[::-1], 3, 7)[::-1]
    c = np.array([r.uniform(int(k), 3, 7) for k in keys[:50]])
    assert np.array_equal(a, b)
    assert np.array_equal(a[:50], c)
    assert np.array_equal(a, DetRng(42).uniform(keys, 3, 7))
    assert not np.array_equal(a, DetRng(43).uniform(keys, 3, 7))


def test_detrng_uniformity_chi_square():
    u = DetRng(7).uniform(np.arange(100_000), 0, 0)
    assert u.min() >= 0.0 and u.max() < 1.0
    counts = np.bincount((u * 100).astype(int), minlength=100)
    assert stats.chisquare(counts).pvalue > 0.01


def test_detrng_rejects_negative_keys():
    with pytest.raises(ValueError):
        DetRng(0).uniform(-1)


def test_detrng_children_are_distinct_streams():
    r = DetRng(1)
    a = r.child(1).uniform(np.arange(100))
    b = r.child(2).uniform(np.arange(100))
    assert np.corrcoef(a, b)[0, 1] ** 2 < 0.1


def test_image_buffer_contract():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4, 2)))
    with pytest.raises(ValueError):
        ImageBuffer(np.full((2, 2, 3), np.inf))
    im = ImageBuffer(np.zeros((2, 3)))
    assert (im.height, im.width, im.channels) == (2, 3, 1)
    assert np.array_equal(im.alpha, np.ones((2, 3)))


def test_pfm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
    g = img[..., 0]
    write_pfm(tmp_path / "g.pfm", g)
    np.testing.assert_array_equal(read_pfm(tmp_path / "g.pfm")[..., 0], g)


def test_png_decodes_to_linear_with_alpha(tmp_path):
    lin = np.full((2, 2, 3), 0.2158605)
    alpha = np.array([[0.0, 1.0], [1.0, 0.0]])
    write_png(tmp_path / "a.png", lin, alpha)
    im = read_png(tmp_path / "a.png")
    np.testing.assert_allclose(im.rgb, lin, atol=1e-3)
    np.testing.assert_array_equal(im.alpha, alpha)


def test_look_at_points_camera_at_target():
    c2w = look_at((0, 0, 5), (0, 0, 0))
    cam = Camera.from_fov(32, 32, math.radians(40), c2w)
    np.testing.assert_allclose(ray_for_pixel(cam, 16, 16).dir, [0, 0, -1], atol=1e-12)
