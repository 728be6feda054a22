"""uvdnerf - Radiance fields in intrinsic UV-D coordinates of deforming proxy meshes."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import ConfigNote, NoteKind, RunConfig
from .coords import CoordMode, DistanceSquash, IntrinsicMapper, TemplateNormalizer, apply_offset, uv_d, xyz_d
from .encoding import HashGridConfig, HashTables, encode, encode_backward, level_resolutions, spatial_hash
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DegenerateFaceError,
    MeshError,
    NumericalError,
    ObjParseError,
    TopologyMismatchError,
    UvMismatchError,
)
from .field import AdamState, FieldConfig, NeuralField, adam_step, field_at_point, learning_rate
from .mesh import ProxySequence, TriangleMesh, load_obj, parse_obj, save_obj, serialize_obj, validate_sequence
from .metrics import psnr, ssim
from .render import Camera, composite, generate_rays, render_image, sample_points
from .spatial import build_bvh, closest_point, signed_distance, transfer_point
from .synth import SceneSpec, export_dataset, generate_scene, import_dataset, oracle_render
from .training import Checkpoint, LossWeights, Model, load_checkpoint, save_checkpoint, train

__all__ = [
    "__version__",
    "AdamState",
    "Camera",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "ConfigNote",
    "CoordMode",
    "DatasetError",
    "DegenerateFaceError",
    "DistanceSquash",
    "FieldConfig",
    "HashGridConfig",
    "HashTables",
    "IntrinsicMapper",
    "LossWeights",
    "MeshError",
    "Model",
    "NeuralField",
    "NoteKind",
    "NumericalError",
    "ObjParseError",
    "ProxySequence",
    "RunConfig",
    "SceneSpec",
    "TemplateNormalizer",
    "TopologyMismatchError",
    "TriangleMesh",
    "UvMismatchError",
    "adam_step",
    "apply_offset",
    "build_bvh",
    "closest_point",
    "composite",
    "encode",
    "encode_backward",
    "export_dataset",
    "field_at_point",
    "generate_rays",
    "generate_scene",
    "import_dataset",
    "learning_rate",
    "level_resolutions",
    "load_checkpoint",
    "load_obj",
    "oracle_render",
    "parse_obj",
    "psnr",
    "render_image",
    "sample_points",
    "save_checkpoint",
    "save_obj",
    "serialize_obj",
    "signed_distance",
    "spatial_hash",
    "ssim",
    "train",
    "transfer_point",
    "uv_d",
    "validate_sequence",
    "xyz_d",
]
