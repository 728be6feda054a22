"""Triangle-mesh proxies: OBJ parsing, normals, and shared-topology sequences."""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional

import numpy as np

from .errors import (
    DegenerateFaceError,
    MeshError,
    ObjIndexError,
    ObjInconsistencyError,
    ObjParseError,
    TopologyMismatchError,
    UvMismatchError,
)

logger = logging.getLogger(__name__)

# Statements that are accepted and skipped.
IGNORED_STATEMENTS = frozenset({"vn", "o", "g", "s", "usemtl", "mtllib", "l"})

UV_TOLERANCE = 1e-9
FRAME_PATTERN = "frame_{:04d}.obj"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh with per-corner UVs.

    Attributes:
        vertices: (V, 3) float64 positions in scene units
        faces: (F, 3) int64 vertex indices
        uv_per_corner: (F, 3, 2) float64 UVs in [0, 1]^2, or None
        vertex_normals: (V, 3) unit angle-weighted normals, or None until computed
        face_normals: (F, 3) unit normals, or None until computed
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_per_corner: Optional[np.ndarray] = None
    vertex_normals: Optional[np.ndarray] = None
    face_normals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError(
                f"Face index out of range for {len(vertices)} vertices"
            )
        object.__setattr__(self, "vertices", _frozen(vertices))
        object.__setattr__(self, "faces", _frozen(faces))

        if self.uv_per_corner is not None:
            uv = np.array(self.uv_per_corner, dtype=np.float64).reshape(-1, 3, 2)
            if len(uv) != len(faces):
                raise MeshError(f"Expected UVs for {len(faces)} faces, got {len(uv)}")
            if uv.size and (uv.min() < 0.0 or uv.max() > 1.0):
                raise MeshError("UV coordinates must lie in [0, 1]^2")
            object.__setattr__(self, "uv_per_corner", _frozen(uv))

        for name, count in (("vertex_normals", len(vertices)), ("face_normals", len(faces))):
            value = getattr(self, name)
            if value is not None:
                normals = np.array(value, dtype=np.float64).reshape(count, 3)
                object.__setattr__(self, name, _frozen(normals))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def has_uvs(self) -> bool:
        return self.uv_per_corner is not None

    @property
    def has_normals(self) -> bool:
        return self.vertex_normals is not None and self.face_normals is not None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (min corner, max corner)."""
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self) -> float:
        """Length of the bounding-box diagonal."""
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions of every face."""
        return self.vertices[self.faces]

    def with_vertices(self, vertices: np.ndarray) -> TriangleMesh:
        """Same topology and UV atlas at new positions (normals recomputed lazily)."""
        return TriangleMesh(vertices=vertices, faces=self.faces, uv_per_corner=self.uv_per_corner)


def _resolve_index(token: str, count: int, line: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ObjParseError(f"Invalid {what} index {token!r}", line) from None
    if value == 0:
        raise ObjIndexError(f"{what} index 0 is not valid (indices are 1-based)", line)
    resolved = value - 1 if value > 0 else count + value
    if not 0 <= resolved < count:
        raise ObjIndexError(f"{what} index {value} out of range ({count} defined)", line)
    return resolved


def parse_obj(text: str) -> TriangleMesh:
    """Parse the supported OBJ subset into a TriangleMesh.

    Supports ``v``, ``vt`` and ``f`` statements with ``v``, ``v/vt``,
    ``v//vn`` and ``v/vt/vn`` corners, 1-based and negative indices. Polygons
    are fan-triangulated. Vertex indices are resolved against the vertices
    defined so far, as OBJ requires.

    Raises:
        ObjParseError: Malformed statement (carries the line number)
        ObjIndexError: Index out of range
        ObjInconsistencyError: Some faces have texture coordinates and others not
    """
    positions: list[tuple[float, float, float]] = []
    texcoords: list[tuple[float, float]] = []
    faces: list[tuple[int, int, int]] = []
    corner_uvs: list[tuple[int, int, int]] = []
    uv_line: int | None = None
    bare_line: int | None = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        tokens = body.split()
        keyword, args = tokens[0], tokens[1:]

        if keyword == "v":
            if len(args) not in (3, 4, 6, 7):
                raise ObjParseError(f"Vertex needs 3 coordinates, got {len(args)}", line_no)
            try:
                x, y, z = (float(a) for a in args[:3])
            except ValueError:
                raise ObjParseError(f"Invalid vertex coordinates {args[:3]}", line_no) from None
            positions.append((x, y, z))
        elif keyword == "vt":
            if len(args) not in (2, 3):
                raise ObjParseError(f"Texture coordinate needs 2 values, got {len(args)}", line_no)
            try:
                u, v = float(args[0]), float(args[1])
            except ValueError:
                raise ObjParseError(f"Invalid texture coordinates {args[:2]}", line_no) from None
            texcoords.append((u, v))
        elif keyword == "f":
            if len(args) < 3:
                raise ObjParseError(f"Face needs at least 3 corners, got {len(args)}", line_no)
            vids: list[int] = []
            tids: list[int] = []
            for corner in args:
                parts = corner.split("/")
                if len(parts) > 3 or not parts[0]:
                    raise ObjParseError(f"Malformed face corner {corner!r}", line_no)
                vids.append(_resolve_index(parts[0], len(positions), line_no, "vertex"))
                if len(parts) > 1 and parts[1]:
                    tids.append(_resolve_index(parts[1], len(texcoords), line_no, "texture"))
            if tids and len(tids) != len(vids):
                raise ObjInconsistencyError("Face mixes corners with and without texture coordinates", line_no)
            if tids:
                uv_line = uv_line or line_no
            else:
                bare_line = bare_line or line_no
            if uv_line is not None and bare_line is not None:
                raise ObjInconsistencyError(
                    "Face without texture coordinates in a file whose other faces have them",
                    max(uv_line, bare_line),
                )
            # Fan triangulation around the first corner.
            for i in range(1, len(vids) - 1):
                faces.append((vids[0], vids[i], vids[i + 1]))
                if tids:
                    corner_uvs.append((tids[0], tids[i], tids[i + 1]))
        elif keyword in IGNORED_STATEMENTS:
            continue
        else:
            raise ObjParseError(f"Unsupported statement {keyword!r}", line_no)

    if not positions:
        raise MeshError("OBJ document defines no vertices")

    uv_array = None
    if corner_uvs:
        uv_array = np.asarray(texcoords, dtype=np.float64)[np.asarray(corner_uvs, dtype=np.int64)]
    return TriangleMesh(
        vertices=np.asarray(positions, dtype=np.float64),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        uv_per_corner=uv_array,
    )


def load_obj(path: str | Path | IO[str]) -> TriangleMesh:
    """Parse an OBJ file from a path or file-like object."""
    if hasattr(path, "read"):
        return parse_obj(path.read())  # type: ignore[union-attr]
    return parse_obj(Path(path).read_text(encoding="utf-8"))  # type: ignore[arg-type]


def serialize_obj(mesh: TriangleMesh) -> str:
    """Write a mesh as OBJ text with 9 significant digits.

    Identical UVs are shared between corners so seams stay representable.
    """
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uv_per_corner is not None:
        unique, inverse = np.unique(mesh.uv_per_corner.reshape(-1, 2), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1, 3)
        lines.extend(f"vt {u:.9g} {v:.9g}" for u, v in unique)
        for face, tex in zip(mesh.faces, inverse):
            lines.append("f " + " ".join(f"{vi + 1}/{ti + 1}" for vi, ti in zip(face, tex)))
    else:
        lines.extend("f " + " ".join(str(vi + 1) for vi in face) for face in mesh.faces)
    return "\n".join(lines) + "\n"


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    """Write a mesh to an OBJ file."""
    Path(path).write_text(serialize_obj(mesh), encoding="utf-8")


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.where(lengths > 0.0, lengths, 1.0)


def compute_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Compute face normals and angle-weighted vertex normals.

    Face normals follow counter-clockwise winding. Each vertex normal is the
    sum of its incident face normals weighted by the corner angle at that
    vertex, normalized.

    Raises:
        MeshError: Mesh has no faces
        DegenerateFaceError: Some faces have zero area
    """
    if mesh.face_count == 0:
        raise MeshError("Cannot compute normals of a mesh without faces")

    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(cross, axis=1)
    edge_scale = np.max(np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2), axis=1)
    degenerate = np.flatnonzero(area2 <= 1e-12 * edge_scale**2)
    if degenerate.size:
        raise DegenerateFaceError(degenerate.tolist())
    face_normals = cross / area2[:, None]

    vertex_sum = np.zeros_like(mesh.vertices)
    for corner in range(3):
        e1 = tri[:, (corner + 1) % 3] - tri[:, corner]
        e2 = tri[:, (corner + 2) % 3] - tri[:, corner]
        cos = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        angle = np.arccos(np.clip(cos, -1.0, 1.0))
        np.add.at(vertex_sum, mesh.faces[:, corner], angle[:, None] * face_normals)
    vertex_normals = _normalize_rows(vertex_sum)

    return dataclasses.replace(mesh, vertex_normals=vertex_normals, face_normals=face_normals)


@dataclass(frozen=True, eq=False)
class ProxySequence:
    """Per-frame proxy meshes sharing one topology and one UV atlas.

    Attributes:
        frames: Meshes in frame order
        template_index: Frame whose surface acts as the template
    """

    frames: tuple[TriangleMesh, ...]
    template_index: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> TriangleMesh:
        return self.frames[index]

    @property
    def template(self) -> TriangleMesh:
        return self.frames[self.template_index]

    @property
    def faces(self) -> np.ndarray:
        return self.frames[0].faces

    @property
    def uv_per_corner(self) -> np.ndarray | None:
        return self.frames[0].uv_per_corner

    @classmethod
    def load_dir(cls, directory: str | Path) -> ProxySequence:
        """Load ``frame_%04d.obj`` files from a directory, starting at 0."""
        directory = Path(directory)
        frames: list[TriangleMesh] = []
        while (directory / FRAME_PATTERN.format(len(frames))).exists():
            frames.append(load_obj(directory / FRAME_PATTERN.format(len(frames))))
        if not frames:
            raise MeshError(f"No {FRAME_PATTERN.format(0)} in {directory}")
        logger.debug("Loaded %d proxy frames from %s", len(frames), directory)
        return validate_sequence(frames)

    def save_dir(self, directory: str | Path) -> None:
        """Write every frame as ``frame_%04d.obj``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for index, mesh in enumerate(self.frames):
            save_obj(mesh, directory / FRAME_PATTERN.format(index))


def validate_sequence(frames: Sequence[TriangleMesh]) -> ProxySequence:
    """Check that all frames share connectivity and UV atlas.

    Vertex positions may differ freely between frames.

    Raises:
        MeshError: Empty sequence
        TopologyMismatchError: Vertex count or face list differs (names the first offending frame)
        UvMismatchError: UVs differ by more than 1e-9
    """
    if not frames:
        raise MeshError("A proxy sequence needs at least one frame")
    first = frames[0]
    for index, mesh in enumerate(frames[1:], start=1):
        if mesh.vertex_count != first.vertex_count:
            raise TopologyMismatchError(
                index, f"{mesh.vertex_count} vertices, expected {first.vertex_count}"
            )
        if mesh.faces.shape != first.faces.shape or not np.array_equal(mesh.faces, first.faces):
            raise TopologyMismatchError(index, "face lists differ")
        if (mesh.uv_per_corner is None) != (first.uv_per_corner is None):
            raise UvMismatchError(index, float("inf"))
        if mesh.uv_per_corner is not None and first.uv_per_corner is not None:
            deviation = float(np.max(np.abs(mesh.uv_per_corner - first.uv_per_corner), initial=0.0))
            if deviation > UV_TOLERANCE:
                raise UvMismatchError(index, deviation)
    return ProxySequence(frames=tuple(frames))
