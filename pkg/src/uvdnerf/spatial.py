"""Closest-point, signed-distance and UV queries against proxy meshes.

Queries are batched: every function takes an ``(N, 3)`` array of points and
returns per-point arrays. The single-point wrappers (:func:`closest_point`,
:func:`signed_distance`, ...) exist for convenience and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh, compute_normals

DEFAULT_LEAF_SIZE = 8

# Candidates within this relative squared distance of the best are ties.
TIE_RELATIVE = 1e-10
TIE_ABSOLUTE = 1e-24

QUERY_CHUNK = 8192


@dataclass(frozen=True)
class SurfacePoint:
    """Nearest point on a mesh surface.

    Attributes:
        face_index: Face containing the point
        barycentric: (3,) non-negative weights summing to 1
        position: (3,) point in scene units
        unsigned_distance: Distance from the query point
    """

    face_index: int
    barycentric: np.ndarray
    position: np.ndarray
    unsigned_distance: float


@dataclass(frozen=True)
class SurfaceHits:
    """Batched nearest points, one row per query."""

    face_index: np.ndarray
    barycentric: np.ndarray
    position: np.ndarray
    unsigned_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.face_index)

    def __getitem__(self, i: int) -> SurfacePoint:
        return SurfacePoint(
            face_index=int(self.face_index[i]),
            barycentric=self.barycentric[i].copy(),
            position=self.position[i].copy(),
            unsigned_distance=float(self.unsigned_distance[i]),
        )


@dataclass(frozen=True)
class SignedDistance:
    """Signed distance to a surface; positive outside, negative inside."""

    value: float


@dataclass(frozen=True, eq=False)
class Bvh:
    """Median-split bounding-volume hierarchy over a mesh's faces.

    Node ``i`` covers ``face_order[start[i]:start[i] + count[i]]``; interior
    nodes have ``left``/``right`` children, leaves have ``left == -1``. The
    pseudo-normals used for sign tests are stored alongside.
    """

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    face_order: np.ndarray
    leaf_size: int
    face_normals: np.ndarray
    edge_normals: np.ndarray
    vertex_normals: np.ndarray
    centroid_tree: cKDTree

    @property
    def node_count(self) -> int:
        return len(self.left)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box of the root node, which contains every vertex."""
        return self.node_min[0], self.node_max[0]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def depth(self) -> int:
        """Number of nodes on the longest root-to-leaf path."""
        depth = np.zeros(self.node_count, dtype=np.int64)
        depth[0] = 1
        # Children are always allocated after their parent.
        for node in range(self.node_count):
            if self.left[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())


def _edge_pseudo_normals(mesh: TriangleMesh) -> np.ndarray:
    """(F, 3, 3) normals of the edge opposite each corner.

    The area-weighted average of the (one or two) faces sharing the edge,
    i.e. the normalized sum of their unnormalized cross products.
    """
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    a = mesh.faces[:, [1, 2, 0]]
    b = mesh.faces[:, [2, 0, 1]]
    keys = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=-1).reshape(-1, 2)
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    summed = np.zeros((len(unique), 3))
    np.add.at(summed, inverse, np.repeat(cross, 3, axis=0))
    summed /= np.linalg.norm(summed, axis=1, keepdims=True)
    return summed[inverse].reshape(-1, 3, 3)


def build_bvh(mesh: TriangleMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> Bvh:
    """Build a BVH by median split along the longest centroid axis."""
    if mesh.face_count == 0:
        raise ValueError("Cannot build a BVH over a mesh without faces")
    if not mesh.has_normals:
        mesh = compute_normals(mesh)
    tri = mesh.triangles()
    centroids = tri.mean(axis=1)
    tri_min = tri.min(axis=1)
    tri_max = tri.max(axis=1)

    order = np.arange(mesh.face_count)
    node_min: list[np.ndarray] = []
    node_max: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []

    def new_node(lo: int, hi: int) -> int:
        faces = order[lo:hi]
        node_min.append(tri_min[faces].min(axis=0))
        node_max.append(tri_max[faces].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    stack = [new_node(0, mesh.face_count)]
    while stack:
        node = stack.pop()
        lo, n = start[node], count[node]
        if n <= leaf_size:
            continue
        faces = order[lo : lo + n]
        spread = np.ptp(centroids[faces], axis=0)
        axis = int(np.argmax(spread))
        ranked = faces[np.argsort(centroids[faces, axis], kind="stable")]
        order[lo : lo + n] = ranked
        mid = lo + n // 2
        left[node] = new_node(lo, mid)
        right[node] = new_node(mid, lo + n)
        stack.extend((left[node], right[node]))

    assert mesh.face_normals is not None and mesh.vertex_normals is not None
    return Bvh(
        node_min=np.asarray(node_min),
        node_max=np.asarray(node_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        face_order=order,
        leaf_size=leaf_size,
        face_normals=mesh.face_normals,
        edge_normals=_edge_pseudo_normals(mesh),
        vertex_normals=mesh.vertex_normals,
        centroid_tree=cKDTree(centroids),
    )


def closest_barycentric(triangles: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric weights of the closest point on each triangle to each point.

    Vectorized region classification from "Real-Time Collision Detection"
    (ClosestPtPointTriangle). Vertex and edge regions yield weights with exact
    zeros, which the sign test relies on.

    Args:
        triangles: (M, 3, 3) corner positions
        points: (M, 3) query points, paired row by row

    Returns:
        (M, 3) barycentric weights
    """
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    ab = b - a
    ac = c - a
    ap = points - a
    bp = points - b
    cp = points - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.zeros((len(points), 3))
    remain = np.ones(len(points), dtype=bool)

    def assign(mask: np.ndarray, weights: np.ndarray) -> None:
        bary[mask] = weights[mask]
        remain[mask] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        is_a = remain & (d1 <= 0) & (d2 <= 0)
        assign(is_a, np.tile([1.0, 0.0, 0.0], (len(points), 1)))

        is_b = remain & (d3 >= 0) & (d4 <= d3)
        assign(is_b, np.tile([0.0, 1.0, 0.0], (len(points), 1)))

        is_ab = remain & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = d1 / (d1 - d3)
        assign(is_ab, np.stack([1.0 - v, v, np.zeros_like(v)], axis=1))

        is_c = remain & (d6 >= 0) & (d5 <= d6)
        assign(is_c, np.tile([0.0, 0.0, 1.0], (len(points), 1)))

        is_ac = remain & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w = d2 / (d2 - d6)
        assign(is_ac, np.stack([1.0 - w, np.zeros_like(w), w], axis=1))

        is_bc = remain & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign(is_bc, np.stack([np.zeros_like(w), 1.0 - w, w], axis=1))

        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        assign(remain.copy(), np.stack([1.0 - v - w, v, w], axis=1))
    return bary


def _combine(triangles: np.ndarray, bary: np.ndarray) -> np.ndarray:
    return (
        bary[:, 0:1] * triangles[:, 0]
        + bary[:, 1:2] * triangles[:, 1]
        + bary[:, 2:3] * triangles[:, 2]
    )


def _select(
    query: np.ndarray,
    face: np.ndarray,
    bary: np.ndarray,
    d2: np.ndarray,
    n_queries: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick one candidate per query: nearest, ties by lowest face index.

    Candidates within the tie tolerance of the minimum count as equidistant;
    a single face yields a single candidate, so the barycentric tie-break
    never has to act.
    """
    best = np.full(n_queries, np.inf)
    np.minimum.at(best, query, d2)
    tied = d2 <= best[query] * (1.0 + TIE_RELATIVE) + TIE_ABSOLUTE
    order = np.lexsort((face[tied], query[tied]))
    q_sorted = query[tied][order]
    first = np.ones(len(q_sorted), dtype=bool)
    first[1:] = q_sorted[1:] != q_sorted[:-1]
    chosen = np.flatnonzero(tied)[order[first]]
    out_face = np.empty(n_queries, dtype=np.int64)
    out_bary = np.empty((n_queries, 3))
    out_d2 = np.empty(n_queries)
    out_face[q_sorted[first]] = face[chosen]
    out_bary[q_sorted[first]] = bary[chosen]
    out_d2[q_sorted[first]] = d2[chosen]
    return out_face, out_bary, out_d2


def _box_distance2(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.einsum("ij,ij->i", gap, gap)


def _closest_chunk(points: np.ndarray, mesh: TriangleMesh, bvh: Bvh) -> SurfaceHits:
    n = len(points)
    tri_all = mesh.triangles()

    # Seed an upper bound from the face with the nearest centroid.
    _, seed_face = bvh.centroid_tree.query(points)
    seed_face = np.asarray(seed_face, dtype=np.int64)
    seed_bary = closest_barycentric(tri_all[seed_face], points)
    seed_gap = _combine(tri_all[seed_face], seed_bary) - points
    bound = np.einsum("ij,ij->i", seed_gap, seed_gap)
    slack = bound * TIE_RELATIVE + TIE_ABSOLUTE

    cand_q: list[np.ndarray] = []
    cand_f: list[np.ndarray] = []
    cand_bary: list[np.ndarray] = []
    cand_d2: list[np.ndarray] = []
    q = np.arange(n)
    node = np.zeros(n, dtype=np.int64)
    while len(q):
        d2 = _box_distance2(points[q], bvh.node_min[node], bvh.node_max[node])
        keep = d2 <= bound[q] * (1.0 + TIE_RELATIVE) + slack[q]
        q, node = q[keep], node[keep]
        is_leaf = bvh.left[node] < 0

        leaf_q, leaf_node = q[is_leaf], node[is_leaf]
        if len(leaf_q):
            counts = bvh.count[leaf_node]
            pair_q = np.repeat(leaf_q, counts)
            base = np.repeat(bvh.start[leaf_node] - np.cumsum(counts) + counts, counts)
            pair_f = bvh.face_order[base + np.arange(counts.sum())]
            bary = closest_barycentric(tri_all[pair_f], points[pair_q])
            gap = _combine(tri_all[pair_f], bary) - points[pair_q]
            d2_pairs = np.einsum("ij,ij->i", gap, gap)
            np.minimum.at(bound, pair_q, d2_pairs)
            cand_q.append(pair_q)
            cand_f.append(pair_f)
            cand_bary.append(bary)
            cand_d2.append(d2_pairs)

        inner_q, inner_node = q[~is_leaf], node[~is_leaf]
        q = np.concatenate([inner_q, inner_q])
        node = np.concatenate([bvh.left[inner_node], bvh.right[inner_node]])

    face, bary_sel, d2_sel = _select(
        np.concatenate(cand_q),
        np.concatenate(cand_f),
        np.concatenate(cand_bary),
        np.concatenate(cand_d2),
        n,
    )
    position = _combine(tri_all[face], bary_sel)
    return SurfaceHits(face, bary_sel, position, np.sqrt(d2_sel))


def _concat_hits(parts: list[SurfaceHits]) -> SurfaceHits:
    return SurfaceHits(
        face_index=np.concatenate([p.face_index for p in parts]),
        barycentric=np.concatenate([p.barycentric for p in parts]),
        position=np.concatenate([p.position for p in parts]),
        unsigned_distance=np.concatenate([p.unsigned_distance for p in parts]),
    )


def closest_points(points: np.ndarray, mesh: TriangleMesh, bvh: Bvh) -> SurfaceHits:
    """Nearest surface points for a batch of queries through the BVH.

    Ties between equidistant faces go to the lowest face index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return SurfaceHits(
            np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty((0, 3)), np.empty(0)
        )
    parts = [
        _closest_chunk(points[i : i + QUERY_CHUNK], mesh, bvh)
        for i in range(0, len(points), QUERY_CHUNK)
    ]
    return parts[0] if len(parts) == 1 else _concat_hits(parts)


def closest_points_brute(points: np.ndarray, mesh: TriangleMesh) -> SurfaceHits:
    """Reference nearest points computed against every face."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n, f = len(points), mesh.face_count
    tri_all = mesh.triangles()
    pair_q = np.repeat(np.arange(n), f)
    pair_f = np.tile(np.arange(f), n)
    bary = closest_barycentric(tri_all[pair_f], points[pair_q])
    gap = _combine(tri_all[pair_f], bary) - points[pair_q]
    d2 = np.einsum("ij,ij->i", gap, gap)
    face, bary_sel, d2_sel = _select(pair_q, pair_f, bary, d2, n)
    return SurfaceHits(face, bary_sel, _combine(tri_all[face], bary_sel), np.sqrt(d2_sel))


def pseudo_normals(hits: SurfaceHits, mesh: TriangleMesh, bvh: Bvh) -> np.ndarray:
    """Pseudo-normal at each hit: face, edge or vertex depending on the region."""
    zeros = hits.barycentric == 0.0
    n_zero = zeros.sum(axis=1)
    normals = bvh.face_normals[hits.face_index].copy()

    on_edge = n_zero == 1
    if on_edge.any():
        corner = np.argmax(zeros[on_edge], axis=1)
        normals[on_edge] = bvh.edge_normals[hits.face_index[on_edge], corner]

    on_vertex = n_zero >= 2
    if on_vertex.any():
        corner = np.argmax(hits.barycentric[on_vertex], axis=1)
        vertex = mesh.faces[hits.face_index[on_vertex], corner]
        normals[on_vertex] = bvh.vertex_normals[vertex]
    return normals


def signed_distances(
    points: np.ndarray, mesh: TriangleMesh, bvh: Bvh, hits: SurfaceHits | None = None
) -> tuple[np.ndarray, SurfaceHits]:
    """Signed distances (positive outside) and the nearest-point hits."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if hits is None:
        hits = closest_points(points, mesh, bvh)
    normals = pseudo_normals(hits, mesh, bvh)
    side = np.einsum("ij,ij->i", points - hits.position, normals)
    sign = np.where(side < 0.0, -1.0, 1.0)
    return sign * hits.unsigned_distance, hits


def closest_point(x: np.ndarray, mesh: TriangleMesh, bvh: Bvh) -> SurfacePoint:
    """Nearest surface point to a single query."""
    return closest_points(np.asarray(x, dtype=np.float64).reshape(1, 3), mesh, bvh)[0]


def signed_distance(x: np.ndarray, mesh: TriangleMesh, bvh: Bvh) -> SignedDistance:
    """Signed distance of a single query (positive outside)."""
    values, _ = signed_distances(np.asarray(x, dtype=np.float64).reshape(1, 3), mesh, bvh)
    return SignedDistance(float(values[0]))


def transfer_points(face_index: np.ndarray, barycentric: np.ndarray, target: TriangleMesh) -> np.ndarray:
    """Re-evaluate barycentric surface points on a same-topology mesh."""
    face_index = np.asarray(face_index, dtype=np.int64)
    if face_index.size and (face_index.min() < 0 or face_index.max() >= target.face_count):
        raise IndexError(f"Face index out of range for a mesh with {target.face_count} faces")
    return _combine(target.vertices[target.faces[face_index]], np.asarray(barycentric).reshape(-1, 3))


def transfer_point(sp: SurfacePoint, target: TriangleMesh) -> np.ndarray:
    """Position of ``sp`` on ``target`` using its face index and weights."""
    return transfer_points(np.array([sp.face_index]), sp.barycentric[None, :], target)[0]


def surface_uvs(face_index: np.ndarray, barycentric: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Barycentric interpolation of the corner UVs."""
    if mesh.uv_per_corner is None:
        raise ValueError("Mesh has no UV atlas")
    corners = mesh.uv_per_corner[np.asarray(face_index, dtype=np.int64)]
    return np.einsum("ij,ijk->ik", np.asarray(barycentric).reshape(-1, 3), corners)


def surface_uv(sp: SurfacePoint, mesh: TriangleMesh) -> np.ndarray:
    """UV of a single surface point."""
    return surface_uvs(np.array([sp.face_index]), sp.barycentric[None, :], mesh)[0]
