"""Tests for cameras, ray sampling and volume compositing."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from uvdnerf.coords import DistanceSquash, IntrinsicMapper
from uvdnerf.mesh import TriangleMesh, validate_sequence
from uvdnerf.render import (
    Camera,
    Ray,
    composite,
    composite_backward,
    composite_rays,
    generate_rays,
    image_pixels,
    ray_box_intervals,
    ray_proxy_interval,
    read_image,
    render_image,
    render_rays,
    sample_points,
    shell_box,
    to_uint8,
    write_image,
)

from .helpers import finite_difference, relative_error

LN2 = float(np.log(2.0))


def identity_camera(size: int = 5) -> Camera:
    return Camera(1.0, 1.0, size / 2.0, size / 2.0, np.eye(4), size, size)


def ball_query(points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense unit ball colored by position."""
    inside = np.linalg.norm(points, axis=1) < 1.0
    return np.where(inside, 10.0, 0.0), np.clip(0.5 + 0.5 * points, 0.0, 1.0)


def empty_query(points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros(len(points)), np.ones((len(points), 3))


def explicit_composite(sigma: np.ndarray, color: np.ndarray, spacing: np.ndarray) -> tuple[np.ndarray, float]:
    """Front-to-back sum written out with explicit products."""
    out = np.zeros(3)
    total = 0.0
    for i in range(len(sigma)):
        transmittance = 1.0
        for j in range(i):
            transmittance *= np.exp(-sigma[j] * spacing[j])
        w = transmittance * (1.0 - np.exp(-sigma[i] * spacing[i]))
        out += w * color[i]
        total += w
    return out, total


class TestCamera:
    """Tests for camera construction and ray generation."""

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"fx": 0.0},
            {"fy": -1.0},
            {"width": 0},
            {"near": 2.0, "far": 1.0},
            {"near": -1.0},
            {"world_to_camera": np.diag([2.0, 1.0, 1.0, 1.0])},
            {"world_to_camera": np.eye(3)},
        ],
    )
    def test_rejects_invalid(self, kwargs: dict[str, object]) -> None:
        settings: dict[str, object] = dict(fx=1.0, fy=1.0, cx=2.0, cy=2.0, world_to_camera=np.eye(4), width=4, height=4)
        settings.update(kwargs)
        with pytest.raises(ValueError):
            Camera(**settings)  # type: ignore[arg-type]

    def test_principal_ray(self) -> None:
        rays = generate_rays(identity_camera(), np.array([[2, 2]]))
        np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(rays.origins[0], [0.0, 0.0, 0.0])
        assert rays[0].pixel == (2, 2)

    def test_directions_are_unit(self) -> None:
        cam = identity_camera(7)
        rays = generate_rays(cam, image_pixels(cam))
        assert len(rays) == 49
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0)

    def test_pixel_out_of_range(self) -> None:
        with pytest.raises(ValueError):
            generate_rays(identity_camera(), np.array([[5, 0]]))
        with pytest.raises(ValueError):
            generate_rays(identity_camera(), np.array([[0, -1]]))

    def test_look_at(self) -> None:
        eye = np.array([0.0, 0.0, 5.0])
        cam = Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), 10.0, 10.0, 5, 5)
        np.testing.assert_allclose(cam.center, eye, atol=1e-12)
        rays = generate_rays(cam, np.array([[2, 2], [2, 0]]))
        np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, -1.0], atol=1e-12)
        assert rays.directions[1, 1] > 0.0

    def test_look_at_degenerate_up(self) -> None:
        with pytest.raises(ValueError):
            Camera.look_at(np.zeros(3), np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]), 1.0, 1.0, 4, 4)

    def test_dict_form(self) -> None:
        cam = Camera.look_at(np.array([1.0, 2.0, 3.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]), 5.0, 6.0, 8, 6, 0.5, 20.0)
        again = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(again.world_to_camera, cam.world_to_camera)
        assert (again.fx, again.fy, again.near, again.far) == (5.0, 6.0, 0.5, 20.0)
        data = cam.to_dict()
        del data["cx"]
        with pytest.raises(ValueError, match="cx"):
            Camera.from_dict(data)


class TestIntervals:
    """Tests for ray culling against the proxy box."""

    def test_box_chord(self) -> None:
        t_near, t_far, hit = ray_box_intervals(
            np.array([[0.0, 0.0, -5.0]]), np.array([[0.0, 0.0, 1.0]]), -np.ones(3), np.ones(3)
        )
        assert hit[0]
        assert (t_near[0], t_far[0]) == pytest.approx((4.0, 6.0))

    def test_miss(self) -> None:
        _, _, hit = ray_box_intervals(np.array([[5.0, 5.0, -5.0]]), np.array([[0.0, 0.0, 1.0]]), -np.ones(3), np.ones(3))
        assert not hit[0]

    def test_origin_inside_clips_to_near(self) -> None:
        t_near, t_far, hit = ray_box_intervals(
            np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), -np.ones(3), np.ones(3), near=0.1
        )
        assert hit[0]
        assert (t_near[0], t_far[0]) == pytest.approx((0.1, 1.0))

    def test_proxy_chord_includes_shell(self, cube: TriangleMesh) -> None:
        ray = Ray(np.array([0.5, 0.5, -3.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
        interval = ray_proxy_interval(ray, cube, 0.25)
        assert interval is not None
        t_near, t_far = interval
        assert t_near == pytest.approx(2.75)
        assert t_far - t_near == pytest.approx(1.5)

    def test_grazing_ray_within_shell(self, cube: TriangleMesh) -> None:
        graze = Ray(np.array([1.1, 0.5, -3.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
        beyond = Ray(np.array([1.3, 0.5, -3.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
        assert ray_proxy_interval(graze, cube, 0.25) is not None
        assert ray_proxy_interval(beyond, cube, 0.25) is None

    def test_shell_must_be_positive(self, cube: TriangleMesh) -> None:
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), (0, 0))
        with pytest.raises(ValueError):
            ray_proxy_interval(ray, cube, 0.0)

    def test_shell_box(self, cube: TriangleMesh) -> None:
        lo, hi = shell_box(cube, 0.1)
        np.testing.assert_allclose(lo, -0.1 * np.sqrt(3.0))
        np.testing.assert_allclose(hi, 1.0 + 0.1 * np.sqrt(3.0))


class TestSamplePoints:
    """Tests for stratified sampling."""

    def test_single_sample_at_midpoint(self) -> None:
        batch = sample_points(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), np.array([2.0]), np.array([4.0]), 1)
        assert batch.depths[0, 0] == pytest.approx(3.0)
        assert batch.spacings[0, 0] == pytest.approx(1.0)
        np.testing.assert_allclose(batch.positions[0, 0], [3.0, 0.0, 0.0])

    def test_deterministic_offsets(self) -> None:
        batch = sample_points(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), np.array([0.0]), np.array([1.0]), 4)
        np.testing.assert_allclose(batch.depths[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(batch.spacings[0], [0.25, 0.25, 0.25, 0.125])

    def test_jittered_strata(self) -> None:
        rays = 1000
        batch = sample_points(
            np.zeros((rays, 3)),
            np.tile([0.0, 0.0, 1.0], (rays, 1)),
            np.zeros(rays),
            np.full(rays, 2.0),
            4,
            np.random.default_rng(0),
        )
        strata = np.floor(batch.depths / 0.5)
        np.testing.assert_array_equal(strata, np.tile(np.arange(4), (rays, 1)))
        assert np.all(np.diff(batch.depths, axis=1) > 0.0)
        assert np.all(batch.spacings > 0.0)
        assert batch.depths[:, 0].mean() == pytest.approx(0.25, abs=0.02)

    def test_needs_a_sample(self) -> None:
        with pytest.raises(ValueError):
            sample_points(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), np.array([0.0]), np.array([1.0]), 0)


class TestComposite:
    """Tests for front-to-back compositing."""

    def test_half_opaque_sample(self) -> None:
        pixel = composite(np.array([LN2]), np.array([[1.0, 0.5, 0.0]]), np.array([1.0]))
        np.testing.assert_allclose(pixel.color, [0.5, 0.25, 0.0])
        assert pixel.weight == pytest.approx(0.5)

    def test_two_samples(self) -> None:
        pixel = composite(np.array([LN2, LN2]), np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.ones(2))
        np.testing.assert_allclose(pixel.color, [0.5, 0.25, 0.0])
        assert pixel.weight == pytest.approx(0.75)

    def test_empty_space(self) -> None:
        pixel = composite(np.zeros(3), np.ones((3, 3)), np.ones(3))
        np.testing.assert_array_equal(pixel.color, np.zeros(3))
        assert pixel.weight == 0.0

    def test_opaque_front_sample_hides_the_rest(self) -> None:
        pixel = composite(np.array([1e4, 1.0]), np.array([[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]]), np.ones(2))
        np.testing.assert_allclose(pixel.color, [0.2, 0.4, 0.6])
        assert pixel.weight == pytest.approx(1.0)

    def test_infinite_density_is_opaque(self) -> None:
        pixel = composite(np.array([np.inf]), np.array([[0.2, 0.4, 0.6]]), np.array([1.0]))
        np.testing.assert_allclose(pixel.color, [0.2, 0.4, 0.6])
        assert pixel.weight == 1.0

    def test_infinite_density_mid_ray(self) -> None:
        sigma = np.array([[LN2, np.inf, 3.0]])
        color = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
        spacing = np.ones((1, 3))
        comp = composite_rays(sigma, color, spacing)
        np.testing.assert_allclose(comp.color[0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(comp.weights[0], [0.5, 0.5, 0.0])
        grad_sigma, grad_sample_color = composite_backward(comp, color, spacing, np.ones((1, 3)), np.ones(1))
        assert np.isfinite(grad_sigma).all()
        assert np.isfinite(grad_sample_color).all()
        assert grad_sigma[0, 2] == 0.0

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_matches_explicit_products(self, n: int) -> None:
        rng = np.random.default_rng(n)
        sigma = rng.uniform(0.0, 3.0, size=n)
        color = rng.uniform(size=(n, 3))
        spacing = rng.uniform(0.05, 0.5, size=n)
        pixel = composite(sigma, color, spacing)
        expected_color, expected_weight = explicit_composite(sigma, color, spacing)
        np.testing.assert_allclose(pixel.color, expected_color, atol=1e-12)
        assert pixel.weight == pytest.approx(expected_weight, abs=1e-12)

    def test_weight_grows_with_density(self) -> None:
        rng = np.random.default_rng(7)
        sigma = rng.uniform(0.0, 2.0, size=(20, 8))
        spacing = rng.uniform(0.05, 0.3, size=(20, 8))
        color = rng.uniform(size=(20, 8, 3))
        thin = composite_rays(sigma, color, spacing).weight
        thick = composite_rays(2.0 * sigma, color, spacing).weight
        assert np.all(thick >= thin)
        assert np.all((thick >= 0.0) & (thick <= 1.0))

    def test_backward_matches_finite_differences(self) -> None:
        rng = np.random.default_rng(8)
        sigma = rng.uniform(0.1, 3.0, size=(3, 8))
        color = rng.uniform(size=(3, 8, 3))
        spacing = rng.uniform(0.05, 0.4, size=(3, 8))
        grad_color = rng.normal(size=(3, 3))
        grad_weight = rng.normal(size=3)

        def loss() -> float:
            comp = composite_rays(sigma, color, spacing)
            return float(np.sum(grad_color * comp.color) + np.sum(grad_weight * comp.weight))

        comp = composite_rays(sigma, color, spacing)
        grad_sigma, grad_sample_color = composite_backward(comp, color, spacing, grad_color, grad_weight)
        for index in np.ndindex(sigma.shape):
            numeric = finite_difference(loss, sigma, index, 1e-5)
            assert relative_error(float(grad_sigma[index]), numeric, floor=1e-3) < 1e-6
        for index in [(0, 0, 0), (1, 4, 2), (2, 7, 1)]:
            numeric = finite_difference(loss, color, index, 1e-7)
            assert relative_error(float(grad_sample_color[index]), numeric, floor=1e-3) < 1e-6


class TestRenderImage:
    """Tests for full-image rendering."""

    @pytest.fixture
    def front_camera(self) -> Camera:
        return Camera.look_at(np.array([0.0, 0.0, 4.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]), 12.0, 12.0, 16, 16)

    def test_empty_field_is_black(self, front_camera: Camera) -> None:
        box = (-np.ones(3), np.ones(3))
        image, weight = render_image(front_camera, 0, empty_query, box, 8)
        assert image.shape == (16, 16, 3)
        assert not image.any() and not weight.any()

    def test_culled_rays_are_black(self, front_camera: Camera) -> None:
        rays = generate_rays(front_camera, image_pixels(front_camera))
        far_box = (np.full(3, 50.0), np.full(3, 51.0))
        result = render_rays(rays, 0, ball_query, far_box, 8)
        assert not result.hit.any()
        assert not result.color.any() and not result.weight.any()

    def test_ball_silhouette(self, front_camera: Camera) -> None:
        image, weight = render_image(front_camera, 0, ball_query, (-np.ones(3), np.ones(3)), 32)
        assert weight[8, 8] > 0.99
        assert weight[0, 0] == 0.0
        assert image.max() <= 1.0

    def test_chunking_does_not_change_pixels(self, front_camera: Camera) -> None:
        box = (-np.ones(3), np.ones(3))
        whole, _ = render_image(front_camera, 0, ball_query, box, 16)
        pieces, _ = render_image(front_camera, 0, ball_query, box, 16, chunk=7)
        np.testing.assert_allclose(pieces, whole, atol=1e-12)

    def test_scaled_proxy_scales_silhouette(self, sphere: TriangleMesh) -> None:
        """Rendering through larger proxies grows the occupied area by the squared scale."""
        seq = validate_sequence([sphere])
        mapper = IntrinsicMapper(seq, DistanceSquash.for_mesh(sphere))
        scaled = validate_sequence([sphere.with_vertices(1.2 * sphere.vertices)])
        edited = mapper.with_sequence(scaled)

        def occupancy(m: IntrinsicMapper) -> Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]:
            def query(points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
                s = m.query(points, frame).coords[:, 2]
                return np.where(s < 0.5, 1e3, 0.0), np.ones((len(points), 3))

            return query

        cam = Camera.look_at(np.array([0.0, 0.0, 10.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]), 120.0, 120.0, 40, 40)
        _, before = render_image(cam, 0, occupancy(mapper), shell_box(seq[0], 0.15), 32)
        _, after = render_image(cam, 0, occupancy(edited), shell_box(scaled[0], 0.15), 32)
        ratio = np.count_nonzero(after > 0.5) / np.count_nonzero(before > 0.5)
        assert ratio == pytest.approx(1.44, rel=0.1)


class TestImageIo:
    """Tests for 8-bit quantization and PNG files."""

    def test_quantization(self) -> None:
        np.testing.assert_array_equal(to_uint8(np.array([0.0, 0.5, 1.0, 1.2, -0.1])), [0, 128, 255, 255, 0])

    def test_png_within_one_level(self, tmp_path: Path) -> None:
        image = np.random.default_rng(9).uniform(size=(6, 5, 3))
        write_image(tmp_path / "x.png", image)
        back = read_image(tmp_path / "x.png")
        assert back.shape == (6, 5, 3)
        assert np.abs(back - image).max() <= 0.5 / 255 + 1e-12
