"""Pinhole cameras, proxy-bounded ray sampling and volume compositing."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import imageio.v2 as imageio
import numpy as np

from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

# Maps (points (P, 3), frame) to (sigma (P,), color (P, 3)).
FieldQuery = Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]

ORTHONORMAL_TOLERANCE = 1e-6
DEFAULT_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera.

    Attributes:
        fx, fy, cx, cy: Intrinsics in pixels
        world_to_camera: 4x4 rigid transform
        width, height: Image size in pixels
        near, far: Depth range along the ray in scene units
    """

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float = 0.0
    far: float = 1e6

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}")
        if not 0.0 <= self.near < self.far:
            raise ValueError(f"Need 0 <= near < far, got {self.near}, {self.far}")
        pose = np.asarray(self.world_to_camera, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"Camera transform must be 4x4, got {pose.shape}")
        rotation = pose[:3, :3]
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("Camera rotation is not orthonormal")
        pose = pose.copy()
        pose.setflags(write=False)
        object.__setattr__(self, "world_to_camera", pose)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.world_to_camera[:3, 3]

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    @classmethod
    def look_at(
        cls,
        eye: np.ndarray,
        target: np.ndarray,
        up: np.ndarray,
        fx: float,
        fy: float,
        width: int,
        height: int,
        near: float = 0.0,
        far: float = 1e6,
    ) -> Camera:
        """Camera at ``eye`` looking at ``target``; image y runs against ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("Camera up vector is parallel to the viewing direction")
        right /= norm
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, :3] = np.stack([right, down, forward])
        pose[:3, 3] = -pose[:3, :3] @ eye
        return cls(fx, fy, width / 2.0, height / 2.0, pose, width, height, near, far)

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_to_camera": self.world_to_camera.tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Camera:
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                world_to_camera=np.asarray(data["world_to_camera"], dtype=np.float64),
                width=int(data["width"]),
                height=int(data["height"]),
                near=float(data.get("near", 0.0)),
                far=float(data.get("far", 1e6)),
            )
        except KeyError as e:
            raise ValueError(f"Camera description is missing {e.args[0]!r}") from e


@dataclass(frozen=True)
class Ray:
    """A single camera ray with its pixel."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


@dataclass(frozen=True)
class RayBatch:
    """Rays of one camera, stored as arrays.

    Attributes:
        origins: (R, 3) world positions
        directions: (R, 3) unit vectors
        pixels: (R, 2) integer (x, y) pixel coordinates
        near, far: Depth range shared by all rays
    """

    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray
    near: float = 0.0
    far: float = 1e6

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> Ray:
        px, py = self.pixels[i]
        return Ray(self.origins[i], self.directions[i], (int(px), int(py)))


def generate_rays(cam: Camera, pixels: np.ndarray) -> RayBatch:
    """Rays through the centers of ``pixels`` (rows of integer x, y)."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) and (
        pixels[:, 0].min() < 0
        or pixels[:, 1].min() < 0
        or pixels[:, 0].max() >= cam.width
        or pixels[:, 1].max() >= cam.height
    ):
        raise ValueError(f"Pixel outside the {cam.width}x{cam.height} image")
    local = np.stack(
        [
            (pixels[:, 0] + 0.5 - cam.cx) / cam.fx,
            (pixels[:, 1] + 0.5 - cam.cy) / cam.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    directions = local @ cam.rotation
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, directions.shape).copy()
    return RayBatch(origins, directions, pixels, cam.near, cam.far)


def image_pixels(cam: Camera) -> np.ndarray:
    """All pixels of the image in row-major order."""
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def shell_box(mesh: TriangleMesh, shell_factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of ``mesh`` dilated by ``shell_factor`` times its diagonal."""
    lo, hi = mesh.bounds()
    shell = shell_factor * mesh.diagonal()
    return lo - shell, hi + shell


def ray_box_intervals(
    origins: np.ndarray,
    directions: np.ndarray,
    box_min: np.ndarray,
    box_max: np.ndarray,
    near: float = 0.0,
    far: float = np.inf,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection of rays with a box, clipped to ``[near, far]``.

    Returns:
        ``(t_near, t_far, hit)``; entries of missed rays are meaningless
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    parallel = directions == 0.0
    safe = np.where(parallel, 1.0, directions)
    t_a = (box_min - origins) / safe
    t_b = (box_max - origins) / safe
    t_lo = np.minimum(t_a, t_b)
    t_hi = np.maximum(t_a, t_b)
    inside_slab = (origins >= box_min) & (origins <= box_max)
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_hi)
    t_near = np.maximum(t_lo.max(axis=1), near)
    t_far = np.minimum(t_hi.min(axis=1), far)
    return t_near, t_far, t_near < t_far


def ray_proxy_interval(
    ray: Ray,
    mesh: TriangleMesh,
    shell: float,
    near: float = 0.0,
    far: float = np.inf,
) -> tuple[float, float] | None:
    """Depth interval of ``ray`` inside the proxy box grown by ``shell``, or None."""
    if not shell > 0:
        raise ValueError(f"Shell must be positive, got {shell}")
    lo, hi = mesh.bounds()
    t_near, t_far, hit = ray_box_intervals(
        ray.origin[None], ray.direction[None], lo - shell, hi + shell, near, far
    )
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


@dataclass(frozen=True)
class SampleBatch:
    """Stratified samples along a batch of rays.

    Attributes:
        depths: (R, n) strictly increasing depths u_i
        spacings: (R, n) gaps to the next sample; the last runs to t_far
        positions: (R, n, 3) world positions
    """

    depths: np.ndarray
    spacings: np.ndarray
    positions: np.ndarray


def sample_points(
    origins: np.ndarray,
    directions: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    n: int,
    rng: np.random.Generator | None = None,
) -> SampleBatch:
    """Stratified samples ``u_i = t_near + (i + xi) * (t_far - t_near) / n``.

    ``xi`` is 0.5 without ``rng`` and uniform in [0, 1) with it.
    """
    if n < 1:
        raise ValueError(f"Need at least one sample per ray, got {n}")
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    xi = np.full((len(t_near), n), 0.5) if rng is None else rng.random((len(t_near), n))
    depths = t_near + (np.arange(n) + xi) * (t_far - t_near) / n
    spacings = np.empty_like(depths)
    spacings[:, :-1] = np.diff(depths, axis=1)
    spacings[:, -1] = t_far[:, 0] - depths[:, -1]
    positions = origins[:, None, :] + depths[..., None] * directions[:, None, :]
    return SampleBatch(depths, spacings, positions)


@dataclass(frozen=True)
class RenderedPixel:
    """Composited color and weight sum of one ray."""

    color: np.ndarray
    weight: float


@dataclass(frozen=True)
class Composite:
    """Compositing result of a batch of rays.

    Attributes:
        color: (R, 3) composited colors
        weight: (R,) weight sums in [0, 1]
        weights: (R, n) per-sample weights T_i * alpha_i
        transmittance: (R, n) transmittance before each sample
    """

    color: np.ndarray
    weight: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray


def composite_rays(sigma: np.ndarray, color: np.ndarray, spacing: np.ndarray) -> Composite:
    """Alpha-composite samples of shape (R, n) front to back."""
    optical = sigma * spacing
    alpha = -np.expm1(-optical)
    # exclusive sum, so an opaque sample never sees inf - inf
    accumulated = np.concatenate([np.zeros_like(optical[:, :1]), np.cumsum(optical[:, :-1], axis=1)], axis=1)
    transmittance = np.exp(-accumulated)
    weights = transmittance * alpha
    return Composite(
        color=np.einsum("rn,rnc->rc", weights, color),
        weight=weights.sum(axis=1),
        weights=weights,
        transmittance=transmittance,
    )


def composite_backward(
    comp: Composite,
    color: np.ndarray,
    spacing: np.ndarray,
    grad_color: np.ndarray,
    grad_weight: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. per-sample densities and colors.

    With ``v_k = grad_color . c_k + grad_weight`` the density gradient is
    ``delta_i * (T_{i+1} v_i - sum_{k>i} w_k v_k)``.

    Returns:
        ``(grad_sigma (R, n), grad_sample_color (R, n, 3))``
    """
    grad_weight = np.asarray(grad_weight).reshape(-1, 1)
    grad_sample_color = comp.weights[..., None] * grad_color[:, None, :]
    v = np.einsum("rnc,rc->rn", color, grad_color) + grad_weight
    wv = comp.weights * v
    behind = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1] - wv
    after = comp.transmittance - comp.weights
    grad_sigma = spacing * (after * v - behind)
    return grad_sigma, grad_sample_color


def composite(sigma: np.ndarray, color: np.ndarray, spacing: np.ndarray) -> RenderedPixel:
    """Composite the samples of a single ray."""
    comp = composite_rays(
        np.asarray(sigma, dtype=np.float64)[None],
        np.asarray(color, dtype=np.float64)[None],
        np.asarray(spacing, dtype=np.float64)[None],
    )
    return RenderedPixel(comp.color[0], float(comp.weight[0]))


@dataclass(frozen=True)
class RenderResult:
    """Forward render of a ray batch; culled rays are black with zero weight."""

    color: np.ndarray
    weight: np.ndarray
    hit: np.ndarray


def render_rays(
    rays: RayBatch,
    frame: int,
    query: FieldQuery,
    box: tuple[np.ndarray, np.ndarray],
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> RenderResult:
    """Render a ray batch through ``query`` inside the culling box."""
    t_near, t_far, hit = ray_box_intervals(rays.origins, rays.directions, box[0], box[1], rays.near, rays.far)
    color = np.zeros((len(rays), 3))
    weight = np.zeros(len(rays))
    if hit.any():
        samples = sample_points(rays.origins[hit], rays.directions[hit], t_near[hit], t_far[hit], n_samples, rng)
        sigma, sample_color = query(samples.positions.reshape(-1, 3), frame)
        shape = samples.depths.shape
        comp = composite_rays(
            np.asarray(sigma, dtype=np.float64).reshape(shape),
            np.asarray(sample_color, dtype=np.float64).reshape(*shape, 3),
            samples.spacings,
        )
        color[hit] = comp.color
        weight[hit] = comp.weight
    return RenderResult(color, weight, hit)


def render_image(
    cam: Camera,
    frame: int,
    query: FieldQuery,
    box: tuple[np.ndarray, np.ndarray],
    n_samples: int,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[np.ndarray, np.ndarray]:
    """Render a full image and its weight map deterministically.

    Returns:
        ``(image (H, W, 3), weight_map (H, W))``
    """
    pixels = image_pixels(cam)
    color = np.zeros((len(pixels), 3))
    weight = np.zeros(len(pixels))
    for start in range(0, len(pixels), chunk):
        rays = generate_rays(cam, pixels[start : start + chunk])
        result = render_rays(rays, frame, query, box, n_samples)
        color[start : start + chunk] = result.color
        weight[start : start + chunk] = result.weight
    logger.debug("Rendered %dx%d image of frame %d", cam.width, cam.height, frame)
    return color.reshape(cam.height, cam.width, 3), weight.reshape(cam.height, cam.width)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize linear values as ``round(255 * clamp(v, 0, 1))``."""
    return np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image as 8-bit PNG."""
    imageio.imwrite(str(path), to_uint8(image))


def write_weight_map(path: str | Path, weight: np.ndarray) -> None:
    """Write an (H, W) weight map as 8-bit grayscale PNG."""
    imageio.imwrite(str(path), to_uint8(weight))


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG as floats in [0, 1]; grayscale stays 2-D, RGBA drops alpha."""
    data = np.asarray(imageio.imread(str(path)))
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[..., :3]
    return data.astype(np.float64) / 255.0
