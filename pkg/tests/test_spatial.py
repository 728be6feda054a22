"""Tests for the BVH, closest points and signed distances."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uvdnerf.mesh import ProxySequence, TriangleMesh
from uvdnerf.spatial import (
    build_bvh,
    closest_barycentric,
    closest_point,
    closest_points,
    closest_points_brute,
    signed_distance,
    signed_distances,
    surface_uv,
    surface_uvs,
    transfer_point,
    transfer_points,
)
from uvdnerf.synth import uv_sphere


@pytest.fixture(scope="module")
def dense_sphere() -> TriangleMesh:
    """UV sphere with exactly 1000 faces."""
    mesh = uv_sphere(21, 25)
    assert mesh.face_count == 1000
    return mesh


class TestBuildBvh:
    """Tests for hierarchy construction."""

    def test_single_face_is_one_leaf(self, triangle: TriangleMesh) -> None:
        bvh = build_bvh(triangle)
        assert bvh.node_count == 1
        assert bvh.depth() == 1
        np.testing.assert_array_equal(bvh.leaves(), [0])

    def test_empty_mesh_rejected(self) -> None:
        with pytest.raises(ValueError):
            build_bvh(TriangleMesh(np.eye(3), np.zeros((0, 3), dtype=np.int64)))

    def test_depth_is_logarithmic(self, dense_sphere: TriangleMesh) -> None:
        bvh = build_bvh(dense_sphere)
        assert bvh.depth() <= 2 * np.log2(1000 / 8) + 2

    def test_leaves_partition_faces(self, dense_sphere: TriangleMesh) -> None:
        bvh = build_bvh(dense_sphere)
        covered = np.concatenate(
            [bvh.face_order[bvh.start[leaf] : bvh.start[leaf] + bvh.count[leaf]] for leaf in bvh.leaves()]
        )
        np.testing.assert_array_equal(np.sort(covered), np.arange(dense_sphere.face_count))
        assert bvh.count[bvh.leaves()].max() <= bvh.leaf_size

    def test_boxes_contain_their_faces(self, dense_sphere: TriangleMesh) -> None:
        bvh = build_bvh(dense_sphere)
        tri = dense_sphere.triangles()
        for node in range(bvh.node_count):
            faces = bvh.face_order[bvh.start[node] : bvh.start[node] + bvh.count[node]]
            corners = tri[faces].reshape(-1, 3)
            assert np.all(corners >= bvh.node_min[node])
            assert np.all(corners <= bvh.node_max[node])


class TestClosestPoint:
    """Tests for nearest-point queries."""

    def test_above_triangle_interior(self, triangle: TriangleMesh) -> None:
        hit = closest_point(np.array([0.2, 0.2, 1.0]), triangle, build_bvh(triangle))
        assert hit.face_index == 0
        np.testing.assert_allclose(hit.position, [0.2, 0.2, 0.0], atol=1e-15)
        np.testing.assert_allclose(hit.barycentric, [0.6, 0.2, 0.2], atol=1e-15)
        assert hit.unsigned_distance == pytest.approx(1.0)

    def test_vertex_region(self, triangle: TriangleMesh) -> None:
        hit = closest_point(np.array([2.0, -0.5, 0.0]), triangle, build_bvh(triangle))
        np.testing.assert_array_equal(hit.barycentric, [0.0, 1.0, 0.0])
        assert hit.unsigned_distance == pytest.approx(np.hypot(1.0, 0.5))

    def test_tie_goes_to_lowest_face(self) -> None:
        quad = TriangleMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]),
            np.array([[0, 1, 2], [0, 2, 3]]),
        )
        hit = closest_point(np.array([0.5, 0.5, 1.0]), quad, build_bvh(quad))
        assert hit.face_index == 0
        np.testing.assert_allclose(hit.position, [0.5, 0.5, 0.0], atol=1e-15)

    def test_matches_brute_force(self, dense_sphere: TriangleMesh) -> None:
        rng = np.random.default_rng(0)
        points = rng.uniform(-1.5, 1.5, size=(100, 3))
        fast = closest_points(points, dense_sphere, build_bvh(dense_sphere))
        slow = closest_points_brute(points, dense_sphere)
        np.testing.assert_array_equal(fast.face_index, slow.face_index)
        np.testing.assert_allclose(fast.unsigned_distance, slow.unsigned_distance, rtol=1e-12)
        np.testing.assert_allclose(fast.position, slow.position, atol=1e-12)

    def test_small_leaves_match_brute_force(self, sphere: TriangleMesh) -> None:
        rng = np.random.default_rng(1)
        points = rng.normal(size=(64, 3))
        fast = closest_points(points, sphere, build_bvh(sphere, leaf_size=1))
        slow = closest_points_brute(points, sphere)
        np.testing.assert_array_equal(fast.face_index, slow.face_index)

    def test_empty_query(self, triangle: TriangleMesh) -> None:
        assert len(closest_points(np.zeros((0, 3)), triangle, build_bvh(triangle))) == 0

    @given(st.tuples(*(st.floats(-3.0, 3.0) for _ in range(3))))
    @settings(max_examples=200, deadline=None)
    def test_barycentric_weights_are_convex(self, point: tuple[float, float, float]) -> None:
        tri = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.2, 0.9, 0.1]]])
        p = np.array([point])
        bary = closest_barycentric(tri, p)[0]
        assert bary.min() >= -1e-12
        assert bary.sum() == pytest.approx(1.0)
        nearest = bary @ tri[0]
        best = np.linalg.norm(nearest - p[0])
        for candidate in (*tri[0], tri[0].mean(axis=0)):
            assert best <= np.linalg.norm(candidate - p[0]) + 1e-12


class TestSignedDistance:
    """Tests for the pseudo-normal sign test."""

    def test_cube_center_is_inside(self, cube: TriangleMesh) -> None:
        assert signed_distance(np.array([0.5, 0.5, 0.5]), cube, build_bvh(cube)).value == pytest.approx(-0.5)

    def test_outside_near_vertex(self, cube: TriangleMesh) -> None:
        sd = signed_distance(np.array([1.1, 1.1, 1.1]), cube, build_bvh(cube))
        assert sd.value == pytest.approx(np.sqrt(0.03))

    def test_outside_near_edge(self, cube: TriangleMesh) -> None:
        sd = signed_distance(np.array([1.2, 1.2, 0.5]), cube, build_bvh(cube))
        assert sd.value == pytest.approx(0.2 * np.sqrt(2.0))

    def test_inside_near_edge(self, cube: TriangleMesh) -> None:
        sd = signed_distance(np.array([0.95, 0.95, 0.5]), cube, build_bvh(cube))
        assert sd.value == pytest.approx(-0.05)

    def test_sphere_shells(self, sphere: TriangleMesh) -> None:
        rng = np.random.default_rng(2)
        directions = rng.normal(size=(200, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        bvh = build_bvh(sphere)
        inside, _ = signed_distances(0.5 * directions, sphere, bvh)
        outside, _ = signed_distances(1.5 * directions, sphere, bvh)
        assert np.all(inside < 0)
        assert np.all(outside > 0)

    def test_reuses_precomputed_hits(self, cube: TriangleMesh) -> None:
        bvh = build_bvh(cube)
        points = np.array([[0.5, 0.5, 0.5], [1.2, 1.2, 0.5]])
        hits = closest_points(points, cube, bvh)
        values, returned = signed_distances(points, cube, bvh, hits)
        assert returned is hits
        np.testing.assert_allclose(values, [-0.5, 0.2 * np.sqrt(2.0)])


class TestTransfer:
    """Tests for moving surface points between frames."""

    def test_rigid_frames(self, rigid_sequence: ProxySequence) -> None:
        template = rigid_sequence[0]
        rng = np.random.default_rng(3)
        points = rng.normal(size=(50, 3))
        hits = closest_points(points, template, build_bvh(template))
        moved = transfer_points(hits.face_index, hits.barycentric, rigid_sequence[1])
        # Fit the rigid map from the vertices and check the transferred points follow it.
        src = template.vertices - template.vertices.mean(axis=0)
        dst = rigid_sequence[1].vertices - rigid_sequence[1].vertices.mean(axis=0)
        u, _, vt = np.linalg.svd(src.T @ dst)
        rotation = (u @ vt).T
        shift = rigid_sequence[1].vertices.mean(axis=0) - template.vertices.mean(axis=0) @ rotation.T
        np.testing.assert_allclose(moved, hits.position @ rotation.T + shift, atol=1e-9)

    def test_single_point(self, triangle: TriangleMesh) -> None:
        hit = closest_point(np.array([0.2, 0.2, 1.0]), triangle, build_bvh(triangle))
        shifted = triangle.with_vertices(triangle.vertices + np.array([0.0, 0.0, 2.0]))
        np.testing.assert_allclose(transfer_point(hit, shifted), [0.2, 0.2, 2.0])

    def test_face_out_of_range(self, triangle: TriangleMesh) -> None:
        with pytest.raises(IndexError):
            transfer_points(np.array([1]), np.array([[1.0, 0.0, 0.0]]), triangle)


class TestSurfaceUv:
    """Tests for UV interpolation."""

    def test_vertex_uv(self, triangle: TriangleMesh) -> None:
        hit = closest_point(np.array([2.0, -0.5, 0.0]), triangle, build_bvh(triangle))
        np.testing.assert_allclose(surface_uv(hit, triangle), [1.0, 0.0])

    def test_interior_uv(self, triangle: TriangleMesh) -> None:
        uv = surface_uvs(np.array([0]), np.array([[0.6, 0.2, 0.2]]), triangle)
        np.testing.assert_allclose(uv, [[0.2, 0.2]])

    def test_no_atlas(self, cube: TriangleMesh) -> None:
        with pytest.raises(ValueError):
            surface_uvs(np.array([0]), np.array([[1.0, 0.0, 0.0]]), cube)
