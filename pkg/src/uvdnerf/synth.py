"""Synthetic deforming scenes with analytically known appearance.

A scene is a UV sphere that rotates and stretches over the sequence. The
proxy meshes are the smooth deformed sphere; the true surface adds a bump
field defined on the UV atlas, displaced along the proxy normal. Ground
truth is rendered by sphere tracing that implicit surface, independently of
the volume renderer.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import imageio.v2 as imageio
import numpy as np
from tqdm import tqdm

from .config import ConfigNote, OnNote, build_document, document_text, loads_config, parse_overrides
from .errors import ConfigError, DatasetError
from .mesh import FRAME_PATTERN, ProxySequence, TriangleMesh, validate_sequence
from .render import Camera, FieldQuery
from .spatial import Bvh, build_bvh, signed_distances, surface_uvs

logger = logging.getLogger(__name__)

TEXTURES = ("checker", "gradient")
CHECKER_COLORS = np.array([[0.9, 0.85, 0.3], [0.15, 0.3, 0.7]])

CAMERAS_FILE = "cameras.json"
SPLIT_FILE = "split.json"
SCENE_FILE = "scene.txt"
IMAGE_PATTERN = "cam{:02d}/" + FRAME_PATTERN.replace(".obj", ".png")

# Sphere-tracing step is this fraction of the implicit value.
TRACE_SAFETY = 0.5
TRACE_MAX_STEPS = 400
BISECT_STEPS = 40


@dataclass(frozen=True)
class SceneSpec:
    """Declarative description of a synthetic scene.

    Attributes:
        rings, segments: Latitude bands and longitude segments of the sphere
        radius: Sphere radius
        frames: Number of frames N_t
        rotation_degrees: Rotation about +y reached at the last frame
        scale_end: Per-axis scale reached at the last frame (linear from 1)
        bump_amplitude, bump_frequency: Displacement A*R*sin(2*pi*k*u + phi)*sin(pi*k*v),
            with the amplitude A a fraction of the radius R
        texture: "checker" or "gradient"
        checker_u, checker_v: Checker squares across the u and v ranges
        cameras: Orbit camera count
        orbit_radius, camera_height: Orbit geometry
        image_width, image_height, focal: Image size and focal length in pixels
        near, far: Camera depth range
        train_cameras: Cameras used for training; the rest are held out. Empty
            holds out every fourth camera, or the last one on smaller rigs
        shell_factor: Culling shell as a fraction of the proxy diagonal
    """

    rings: int = 24
    segments: int = 48
    radius: float = 1.0
    frames: int = 20
    rotation_degrees: float = 30.0
    scale_end: tuple[float, ...] = (1.0, 1.15, 1.0)
    bump_amplitude: float = 0.03
    bump_frequency: int = 3
    texture: str = "checker"
    checker_u: int = 8
    checker_v: int = 4
    cameras: int = 8
    orbit_radius: float = 3.5
    camera_height: float = 0.5
    image_width: int = 64
    image_height: int = 64
    focal: float = 80.0
    near: float = 0.1
    far: float = 10.0
    train_cameras: tuple[int, ...] = ()
    shell_factor: float = 0.15

    def __post_init__(self) -> None:
        for key in ("rings", "segments", "frames", "cameras", "image_width", "image_height", "checker_u", "checker_v"):
            if getattr(self, key) < 1:
                raise ConfigError(f"'{key}' must be at least 1", key=key)
        if self.rings < 2 or self.segments < 3:
            raise ConfigError("Sphere needs at least 2 rings and 3 segments", key="rings")
        for key in ("radius", "focal", "orbit_radius", "shell_factor"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"'{key}' must be positive", key=key)
        if len(self.scale_end) != 3 or min(self.scale_end) <= 0:
            raise ConfigError("'scale_end' needs three positive factors", key="scale_end")
        if self.texture not in TEXTURES:
            raise ConfigError(f"'texture' must be one of {', '.join(TEXTURES)}", key="texture")
        if self.bump_frequency < 0:
            raise ConfigError("'bump_frequency' must be non-negative", key="bump_frequency")
        if not 0.0 <= self.near < self.far:
            raise ConfigError("Need 0 <= near < far", key="near")
        if self.orbit_radius <= self.radius * max(self.scale_end):
            raise ConfigError("Cameras must orbit outside the subject", key="orbit_radius")
        for cam in self.train_cameras:
            if not 0 <= cam < self.cameras:
                raise ConfigError(f"Training camera {cam} does not exist", key="train_cameras")
        bump_height = abs(self.bump_amplitude) * self.radius
        if bump_height >= self.shell_radius:
            raise ConfigError(
                f"Bump height {bump_height:.4g} must stay below the shell radius {self.shell_radius:.4g}",
                key="bump_amplitude",
            )

    @property
    def shell_radius(self) -> float:
        """Culling shell of the undeformed sphere."""
        return self.shell_factor * 2.0 * math.sqrt(3.0) * self.radius

    @property
    def training_cameras(self) -> tuple[int, ...]:
        if self.train_cameras:
            return self.train_cameras
        held_out = [c for c in range(self.cameras) if c % 4 == 3] or [self.cameras - 1]
        return tuple(c for c in range(self.cameras) if c not in held_out) or (0,)

    @property
    def eval_cameras(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.cameras) if c not in self.training_cameras)

    @classmethod
    def from_text(
        cls, text: str, *, note_log: list[ConfigNote] | None = None, on_note: OnNote = "ignore"
    ) -> SceneSpec:
        return build_document(cls, loads_config(text, note_log=note_log, on_note=on_note))

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> SceneSpec:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **kwargs)

    def with_overrides(self, overrides: Iterable[str]) -> SceneSpec:
        return build_document(SceneSpec, parse_overrides(list(overrides)), base=self)

    def to_text(self, seed: int | None = None) -> str:
        header = "uvdnerf scene" if seed is None else f"uvdnerf scene, generated with seed {seed}"
        return document_text(self, header=header)


def uv_sphere(rings: int, segments: int, radius: float = 1.0) -> TriangleMesh:
    """Closed UV sphere with a seam at u = 0/1 and per-corner UVs.

    ``v`` runs from 0 at the +y pole to 1 at the -y pole; faces wind
    counter-clockwise seen from outside.
    """
    theta = np.pi * np.arange(1, rings) / rings
    phi = 2.0 * np.pi * np.arange(segments) / segments
    ring_points = np.stack(
        [
            np.outer(np.sin(theta), np.cos(phi)),
            np.repeat(np.cos(theta)[:, None], segments, axis=1),
            np.outer(np.sin(theta), np.sin(phi)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    vertices = radius * np.concatenate([[[0.0, 1.0, 0.0]], ring_points, [[0.0, -1.0, 0.0]]])
    north = 0
    south = len(vertices) - 1

    def ring_vertex(i: int, j: int) -> int:
        return 1 + (i - 1) * segments + j % segments

    faces: list[tuple[int, int, int]] = []
    uvs: list[list[tuple[float, float]]] = []
    for j in range(segments):
        u0, u1 = j / segments, (j + 1) / segments
        faces.append((north, ring_vertex(1, j + 1), ring_vertex(1, j)))
        uvs.append([((j + 0.5) / segments, 0.0), (u1, 1.0 / rings), (u0, 1.0 / rings)])
        for i in range(1, rings - 1):
            v0, v1 = i / rings, (i + 1) / rings
            a, b = ring_vertex(i, j), ring_vertex(i, j + 1)
            c, d = ring_vertex(i + 1, j), ring_vertex(i + 1, j + 1)
            faces.append((a, b, c))
            uvs.append([(u0, v0), (u1, v0), (u0, v1)])
            faces.append((b, d, c))
            uvs.append([(u1, v0), (u1, v1), (u0, v1)])
        last = rings - 1
        faces.append((ring_vertex(last, j), ring_vertex(last, j + 1), south))
        uvs.append([(u0, last / rings), (u1, last / rings), ((j + 0.5) / segments, 1.0)])
    return TriangleMesh(vertices, np.array(faces, dtype=np.int64), np.array(uvs, dtype=np.float64))


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def frame_transform(spec: SceneSpec, frame: int) -> np.ndarray:
    """Linear map of the template sphere at ``frame``: scale, then rotate."""
    progress = frame / (spec.frames - 1) if spec.frames > 1 else 0.0
    scale = 1.0 + (np.asarray(spec.scale_end) - 1.0) * progress
    return rotation_y(math.radians(spec.rotation_degrees) * progress) @ np.diag(scale)


def texture_color(spec: SceneSpec, uv: np.ndarray) -> np.ndarray:
    """Procedural albedo on the UV atlas, shape (P, 3)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if spec.texture == "checker":
        iu = np.minimum(np.floor(uv[:, 0] * spec.checker_u), spec.checker_u - 1)
        iv = np.minimum(np.floor(uv[:, 1] * spec.checker_v), spec.checker_v - 1)
        parity = ((iu + iv) % 2).astype(np.int64)
        return CHECKER_COLORS[parity]
    return np.stack([uv[:, 0], uv[:, 1], 0.5 * (uv[:, 0] + uv[:, 1])], axis=1)


class TrueSurface:
    """Bumped surface ``sd_proxy(y) - b(uv(closest(y))) = 0`` of every frame."""

    def __init__(self, spec: SceneSpec, proxies: ProxySequence, phase: float) -> None:
        self.spec = spec
        self.proxies = proxies
        self.phase = phase
        self._bvhs: dict[int, Bvh] = {}

    def bvh(self, frame: int) -> Bvh:
        if frame not in self._bvhs:
            self._bvhs[frame] = build_bvh(self.proxies[frame])
        return self._bvhs[frame]

    def bump(self, uv: np.ndarray) -> np.ndarray:
        k = self.spec.bump_frequency
        return (
            self.spec.bump_amplitude
            * self.spec.radius
            * np.sin(2.0 * np.pi * k * uv[:, 0] + self.phase)
            * np.sin(np.pi * k * uv[:, 1])
        )

    def implicit(self, points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Implicit value (negative inside) and UV of the closest proxy point."""
        mesh = self.proxies[frame]
        d, hits = signed_distances(points, mesh, self.bvh(frame))
        uv = surface_uvs(hits.face_index, hits.barycentric, mesh)
        return d - self.bump(uv), uv

    def intersect(self, origins: np.ndarray, directions: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """First crossing of each ray with the surface.

        Returns:
            ``(hit (R,), depth (R,))``; depth is inf for misses
        """
        mesh = self.proxies[frame]
        lo, hi = mesh.bounds()
        margin = abs(self.spec.bump_amplitude) * self.spec.radius + 1e-3 * mesh.diagonal()
        t, t_end = _slab(origins, directions, lo - margin, hi + margin)
        tolerance = 1e-7 * mesh.diagonal()
        min_step = 1e-3 * mesh.diagonal()
        active = t < t_end
        depth = np.full(len(origins), np.inf)
        previous = t.copy()
        for _ in range(TRACE_MAX_STEPS):
            idx = np.flatnonzero(active)
            if not len(idx):
                break
            value, _ = self.implicit(origins[idx] + t[idx, None] * directions[idx], frame)
            crossed = value <= tolerance
            if crossed.any():
                done = idx[crossed]
                depth[done] = self._bisect(origins[done], directions[done], previous[done], t[done], frame)
                active[done] = False
            moving = idx[~crossed]
            previous[moving] = t[moving]
            t[moving] += np.maximum(TRACE_SAFETY * value[~crossed], min_step)
            active[moving[t[moving] > t_end[moving]]] = False
        return np.isfinite(depth), depth

    def _bisect(self, origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray, frame: int) -> np.ndarray:
        value, _ = self.implicit(origins + lo[:, None] * directions, frame)
        lo = lo.copy()
        hi = hi.copy()
        # Rays already on or inside the surface at their bracket start stop there.
        hi[value <= 0.0] = lo[value <= 0.0]
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            value, _ = self.implicit(origins + mid[:, None] * directions, frame)
            inside = value <= 0.0
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        return hi

    def query(self, sharp_density: float) -> FieldQuery:
        """Opaque-interior field usable with the volume renderer."""

        def field(points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
            value, uv = self.implicit(points, frame)
            return np.where(value <= 0.0, sharp_density, 0.0), texture_color(self.spec, uv)

        return field


def _slab(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (lo - origins) / directions
        t_b = (hi - origins) / directions
    t_a = np.nan_to_num(t_a, nan=-np.inf)
    t_b = np.nan_to_num(t_b, nan=np.inf)
    t_near = np.maximum(np.minimum(t_a, t_b).max(axis=1), 0.0)
    t_far = np.maximum(t_a, t_b).min(axis=1)
    return t_near, t_far


@dataclass
class Scene:
    """A generated scene: proxies, cameras and the true surface."""

    spec: SceneSpec
    proxies: ProxySequence
    cameras: list[Camera]
    surface: TrueSurface
    seed: int = 0


def orbit_cameras(spec: SceneSpec) -> list[Camera]:
    """Cameras evenly spaced on a horizontal circle, all looking at the origin."""
    cameras = []
    for c in range(spec.cameras):
        angle = 2.0 * np.pi * c / spec.cameras
        eye = np.array([spec.orbit_radius * math.sin(angle), spec.camera_height, spec.orbit_radius * math.cos(angle)])
        cameras.append(
            Camera.look_at(
                eye,
                np.zeros(3),
                np.array([0.0, 1.0, 0.0]),
                spec.focal,
                spec.focal,
                spec.image_width,
                spec.image_height,
                spec.near,
                spec.far,
            )
        )
    return cameras


def generate_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    """Proxy sequence, orbit cameras and true surface of ``spec``.

    The seed draws the bump phase.
    """
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    template = uv_sphere(spec.rings, spec.segments, spec.radius)
    frames = [
        template.with_vertices(template.vertices @ frame_transform(spec, f).T) for f in range(spec.frames)
    ]
    proxies = validate_sequence(frames)
    logger.info(
        "Generated %d-frame scene (%d faces, %d cameras)", spec.frames, template.face_count, spec.cameras
    )
    return Scene(spec, proxies, orbit_cameras(spec), TrueSurface(spec, proxies, phase), seed)


def _camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    local = np.stack(
        [(xs.ravel() + 0.5 - cam.cx) / cam.fx, (ys.ravel() + 0.5 - cam.cy) / cam.fy, np.ones(xs.size)],
        axis=1,
    )
    rotation = cam.world_to_camera[:3, :3]
    directions = local @ rotation
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origin = -rotation.T @ cam.world_to_camera[:3, 3]
    return np.broadcast_to(origin, directions.shape).copy(), directions


def oracle_render(scene: Scene, cam: Camera, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth image and mask of ``frame`` seen from ``cam``.

    Returns:
        ``(image (H, W, 3) in [0, 1], mask (H, W) bool)``; background is black
    """
    if not 0 <= frame < len(scene.proxies):
        raise IndexError(f"Frame {frame} out of range for {len(scene.proxies)} frames")
    origins, directions = _camera_rays(cam)
    hit, depth = scene.surface.intersect(origins, directions, frame)
    image = np.zeros((len(origins), 3))
    if hit.any():
        points = origins[hit] + depth[hit, None] * directions[hit]
        _, uv = scene.surface.implicit(points, frame)
        image[hit] = texture_color(scene.spec, uv)
    return image.reshape(cam.height, cam.width, 3), hit.reshape(cam.height, cam.width)


def camera_record(cam: Camera, cam_id: int) -> dict[str, Any]:
    return {
        "id": cam_id,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "world_to_cam": [float(v) for v in cam.world_to_camera.ravel()],
        "near": cam.near,
        "far": cam.far,
    }


def camera_from_record(record: dict[str, Any]) -> Camera:
    return Camera(
        fx=float(record["fx"]),
        fy=float(record["fy"]),
        cx=float(record["cx"]),
        cy=float(record["cy"]),
        world_to_camera=np.asarray(record["world_to_cam"], dtype=np.float64).reshape(4, 4),
        width=int(record["width"]),
        height=int(record["height"]),
        near=float(record["near"]),
        far=float(record["far"]),
    )


@dataclass
class Dataset:
    """A dataset directory: proxies, cameras, images, masks and split."""

    root: Path
    proxies: ProxySequence
    cameras: dict[int, Camera]
    train_cams: list[int]
    eval_cams: list[int]

    @property
    def frame_count(self) -> int:
        return len(self.proxies)

    def image_path(self, cam: int, frame: int) -> Path:
        return self.root / "images" / IMAGE_PATTERN.format(cam, frame)

    def mask_path(self, cam: int, frame: int) -> Path:
        return self.root / "masks" / IMAGE_PATTERN.format(cam, frame)

    def camera(self, cam: int) -> Camera:
        if cam not in self.cameras:
            raise DatasetError(f"Unknown camera id {cam}", str(self.root / CAMERAS_FILE))
        return self.cameras[cam]

    def load_image(self, cam: int, frame: int) -> np.ndarray:
        data = np.asarray(imageio.imread(self.image_path(cam, frame)))
        if data.ndim != 3 or data.shape[2] < 3:
            raise DatasetError("Expected an RGB image", str(self.image_path(cam, frame)))
        return data[..., :3].astype(np.float64) / 255.0

    def load_mask(self, cam: int, frame: int) -> np.ndarray:
        path = self.mask_path(cam, frame)
        data = np.asarray(imageio.imread(path))
        if data.ndim == 3:
            data = data[..., 0]
        if not np.isin(data, (0, 255)).all():
            raise DatasetError("Mask is not binary", str(path))
        return data == 255

    def manifest(self) -> dict[str, Any]:
        """Everything that identifies the dataset apart from pixel data."""
        pairs = [(c, f) for c in sorted(self.cameras) for f in range(self.frame_count)]
        return {
            "frames": self.frame_count,
            "faces": int(self.proxies.template.face_count),
            "cameras": [camera_record(self.cameras[c], c) for c in sorted(self.cameras)],
            "split": {"train_cams": list(self.train_cams), "eval_cams": list(self.eval_cams)},
            "images": [str(self.image_path(c, f).relative_to(self.root)) for c, f in pairs],
            "masks": [str(self.mask_path(c, f).relative_to(self.root)) for c, f in pairs],
        }


def export_dataset(scene: Scene, root: str | Path, progress: bool = False) -> Dataset:
    """Render every (camera, frame) pair with the oracle and write the dataset."""
    root = Path(root)
    scene.proxies.save_dir(root / "meshes")
    records = [camera_record(cam, c) for c, cam in enumerate(scene.cameras)]
    (root / CAMERAS_FILE).write_text(json.dumps(records, indent=2), encoding="utf-8")
    split = {"train_cams": list(scene.spec.training_cameras), "eval_cams": list(scene.spec.eval_cameras)}
    (root / SPLIT_FILE).write_text(json.dumps(split, indent=2), encoding="utf-8")
    (root / SCENE_FILE).write_text(scene.spec.to_text(scene.seed), encoding="utf-8")
    dataset = Dataset(
        root, scene.proxies, dict(enumerate(scene.cameras)), split["train_cams"], split["eval_cams"]
    )
    pairs = [(c, f) for c in range(len(scene.cameras)) for f in range(len(scene.proxies))]
    for c, f in tqdm(pairs, desc="oracle renders", disable=not progress):
        image, mask = oracle_render(scene, scene.cameras[c], f)
        for path, data in ((dataset.image_path(c, f), image), (dataset.mask_path(c, f), mask)):
            path.parent.mkdir(parents=True, exist_ok=True)
            imageio.imwrite(path, np.round(255.0 * np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)).astype(np.uint8))
    logger.info("Wrote dataset with %d renders to %s", len(pairs), root)
    return dataset


def _read_json(path: Path) -> Any:
    if not path.is_file():
        raise DatasetError("Missing dataset file", str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"Invalid JSON ({e.msg} at line {e.lineno})", str(path)) from e


def import_dataset(root: str | Path) -> Dataset:
    """Read a dataset directory and check that every file is present.

    Raises:
        DatasetError: A file is missing or malformed; the message names it
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("Dataset directory does not exist", str(root))
    mesh_dir = root / "meshes"
    if not mesh_dir.is_dir():
        raise DatasetError("Missing mesh directory", str(mesh_dir))
    proxies = ProxySequence.load_dir(mesh_dir)
    try:
        cameras = {int(r["id"]): camera_from_record(r) for r in _read_json(root / CAMERAS_FILE)}
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Invalid camera record ({e})", str(root / CAMERAS_FILE)) from e
    split = _read_json(root / SPLIT_FILE)
    try:
        train_cams = [int(c) for c in split["train_cams"]]
        eval_cams = [int(c) for c in split["eval_cams"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Invalid split declaration ({e})", str(root / SPLIT_FILE)) from e
    for cam in train_cams + eval_cams:
        if cam not in cameras:
            raise DatasetError(f"Split names unknown camera {cam}", str(root / SPLIT_FILE))
    dataset = Dataset(root, proxies, cameras, train_cams, eval_cams)
    for cam in sorted(cameras):
        for frame in range(len(proxies)):
            for path in (dataset.image_path(cam, frame), dataset.mask_path(cam, frame)):
                if not path.is_file():
                    raise DatasetError("Missing dataset file", str(path))
    logger.info("Loaded dataset %s: %d frames, %d cameras", root, len(proxies), len(cameras))
    return dataset
