"""Exception types for uvdnerf."""

from __future__ import annotations

from collections.abc import Sequence
from typing import Any


class MeshError(ValueError):
    """Error raised when proxy geometry is malformed or inconsistent."""

    pass


class ObjParseError(MeshError):
    """Malformed line in an OBJ document.

    Attributes:
        line: 1-indexed line number of the offending statement
    """

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"{message} at line {line}")
        self.line = line


class ObjIndexError(ObjParseError):
    """Face statement references a vertex or texture coordinate that does not exist."""

    pass


class ObjInconsistencyError(ObjParseError):
    """Faces disagree on whether they carry texture coordinates."""

    pass


class DegenerateFaceError(MeshError):
    """One or more faces have zero area.

    Attributes:
        faces: Indices of the degenerate faces
    """

    def __init__(self, faces: Sequence[int]) -> None:
        listed = ", ".join(str(f) for f in faces[:10])
        more = f" (+{len(faces) - 10} more)" if len(faces) > 10 else ""
        super().__init__(f"Degenerate (zero-area) faces: {listed}{more}")
        self.faces = list(faces)


class TopologyMismatchError(MeshError):
    """A frame's connectivity differs from the first frame.

    Attributes:
        frame: Index of the first offending frame
    """

    def __init__(self, frame: int, detail: str) -> None:
        super().__init__(f"Topology mismatch in frame {frame}: {detail}")
        self.frame = frame


class UvMismatchError(MeshError):
    """A frame's UV atlas differs from the first frame.

    Attributes:
        frame: Index of the first offending frame
    """

    def __init__(self, frame: int, deviation: float) -> None:
        super().__init__(
            f"UV atlas mismatch in frame {frame}: max deviation {deviation:.3g}"
        )
        self.frame = frame


class ConfigError(ValueError):
    """Invalid run configuration document or override.

    Attributes:
        line: 1-indexed line number, or None for command-line overrides
        key: Offending key when known
    """

    def __init__(self, message: str, line: int | None = None, key: str | None = None) -> None:
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.key = key


class DatasetError(ValueError):
    """Missing or invalid dataset file.

    Attributes:
        path: The file or directory at fault
    """

    def __init__(self, message: str, path: str | None = None) -> None:
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated, or of an unsupported version."""

    pass


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss.

    Attributes:
        diagnostic: Arrays and scalars describing the offending batch
    """

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}
