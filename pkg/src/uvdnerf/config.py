"""Flat key/value configuration documents for uvdnerf.

A document is a sequence of ``key = value`` lines. Parsing is relaxed the
same way throughout: ``#`` and ``//`` comments, smart quotes, quoted values,
``key: value`` separators and trailing ``,``/``;`` are accepted, and each
relaxation is recorded as a :class:`ConfigNote`.
"""

from __future__ import annotations

import dataclasses
import typing
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path
from typing import IO, Any, Literal, TypeVar

from .errors import ConfigError

T = TypeVar("T")

OnNote = Literal["ignore", "warn", "error"]


class NoteKind(Enum):
    """Relaxations applied while reading a configuration document."""

    COMMENT = auto()
    SMART_QUOTE = auto()
    QUOTED_VALUE = auto()
    COLON_SEPARATOR = auto()
    TRAILING_SEPARATOR = auto()
    DUPLICATE_KEY = auto()


@dataclass(frozen=True)
class ConfigNote:
    """Record of a single relaxation applied while parsing.

    Attributes:
        kind: The type of relaxation (from NoteKind enum)
        position: Character position in original string (0-indexed)
        line: Line number in original string (1-indexed)
        column: Column number in original string (1-indexed)
        original: The original text that was relaxed
        replacement: The replacement text (empty string if removed)
        message: Human-readable description
    """

    kind: NoteKind
    position: int
    line: int
    column: int
    original: str
    replacement: str
    message: str


SMART_QUOTES: dict[str, str] = {
    "“": '"',  # Left double quotation mark
    "”": '"',  # Right double quotation mark
    "„": '"',  # Double low-9 quotation mark
    "«": '"',  # Left-pointing double angle quotation mark
    "»": '"',  # Right-pointing double angle quotation mark
    "‘": "'",  # Left single quotation mark
    "’": "'",  # Right single quotation mark
    "‚": "'",  # Single low-9 quotation mark
}


def _calculate_line_column(text: str, position: int) -> tuple[int, int]:
    """Calculate 1-indexed line and column from an absolute position."""
    position = min(max(position, 0), len(text))
    lines = text[:position].split("\n")
    return len(lines), len(lines[-1]) + 1


def create_note(
    kind: NoteKind,
    text: str,
    position: int,
    original: str,
    replacement: str = "",
) -> ConfigNote:
    """Create a ConfigNote with calculated line/column and message."""
    line, column = _calculate_line_column(text, position)

    if kind == NoteKind.COMMENT:
        preview = original[:30] + "..." if len(original) > 30 else original
        message = f"Removed comment '{preview}'"
    elif kind == NoteKind.SMART_QUOTE:
        message = f"Replaced smart quote '{original}' with '{replacement}'"
    elif kind == NoteKind.QUOTED_VALUE:
        message = f"Unquoted value {original}"
    elif kind == NoteKind.COLON_SEPARATOR:
        message = "Accepted ':' as key/value separator"
    elif kind == NoteKind.TRAILING_SEPARATOR:
        message = f"Removed trailing '{original}'"
    elif kind == NoteKind.DUPLICATE_KEY:
        message = f"Duplicate key '{original}', last value wins"
    else:
        message = f"Relaxed: {original} -> {replacement}"

    return ConfigNote(
        kind=kind,
        position=position,
        line=line,
        column=column,
        original=original,
        replacement=replacement,
        message=message,
    )


def normalize_quotes(text: str, note_log: list[ConfigNote] | None = None) -> str:
    """Replace smart/curly quotes with their ASCII equivalents."""
    result: list[str] = []
    for i, char in enumerate(text):
        replacement = SMART_QUOTES.get(char)
        if replacement is None:
            result.append(char)
            continue
        result.append(replacement)
        if note_log is not None:
            note_log.append(create_note(NoteKind.SMART_QUOTE, text, i, char, replacement))
    return "".join(result)


def _strip_comment(text: str, start: int, end: int, note_log: list[ConfigNote] | None) -> str:
    """Strip a trailing ``#`` or ``//`` comment from ``text[start:end]``.

    Comment markers inside quoted values are preserved.
    """
    quote: str | None = None
    i = start
    while i < end:
        char = text[i]
        if quote is not None:
            if char == quote:
                quote = None
        elif char in ("'", '"'):
            quote = char
        elif char == "#" or (char == "/" and i + 1 < end and text[i + 1] == "/"):
            if note_log is not None:
                note_log.append(create_note(NoteKind.COMMENT, text, i, text[i:end]))
            return text[start:i]
        i += 1
    return text[start:end]


def loads_config(
    s: str,
    *,
    note_log: list[ConfigNote] | None = None,
    on_note: OnNote = "ignore",
) -> dict[str, tuple[str, int]]:
    """Parse a configuration document into raw string values.

    Args:
        s: Document text
        note_log: Optional list to collect ConfigNote objects
        on_note: Action when a relaxation is applied:
            - "ignore": Parse silently (default)
            - "warn": Emit warnings via warnings.warn()
            - "error": Raise ConfigError on the first relaxation

    Returns:
        Mapping of key to (raw value, 1-indexed line number)

    Raises:
        ConfigError: On malformed lines, or any relaxation when on_note="error"
    """
    if on_note not in ("ignore", "warn", "error"):
        raise ValueError(f"Invalid on_note value: {on_note!r}")

    local_notes: list[ConfigNote] = []
    actual_log = note_log if note_log is not None else local_notes
    first_note = len(actual_log)

    text = s[1:] if s.startswith("﻿") else s
    text = normalize_quotes(text, actual_log)

    values: dict[str, tuple[str, int]] = {}
    offset = 0
    for line_no, raw_line in enumerate(text.split("\n"), start=1):
        line_start = offset
        offset += len(raw_line) + 1
        body = _strip_comment(text, line_start, line_start + len(raw_line), actual_log).strip()
        if not body:
            continue

        if body[-1] in ",;":
            actual_log.append(
                create_note(NoteKind.TRAILING_SEPARATOR, text, line_start + len(body) - 1, body[-1])
            )
            body = body[:-1].rstrip()

        eq = body.find("=")
        colon = body.find(":")
        if eq == -1 and colon == -1:
            raise ConfigError(f"Expected 'key = value', got {body!r}", line=line_no)
        if eq == -1 or (colon != -1 and colon < eq):
            actual_log.append(create_note(NoteKind.COLON_SEPARATOR, text, line_start + colon, ":"))
            key, value = body[:colon].strip(), body[colon + 1 :].strip()
        else:
            key, value = body[:eq].strip(), body[eq + 1 :].strip()

        if not key.isidentifier():
            raise ConfigError(f"Invalid key {key!r}", line=line_no, key=key)

        if len(value) >= 2 and value[0] == value[-1] and value[0] in ("'", '"'):
            actual_log.append(create_note(NoteKind.QUOTED_VALUE, text, line_start, value))
            value = value[1:-1]

        if key in values:
            actual_log.append(create_note(NoteKind.DUPLICATE_KEY, text, line_start, key))
        values[key] = (value, line_no)

    new_notes = actual_log[first_note:]
    if new_notes:
        if on_note == "error":
            note = new_notes[0]
            raise ConfigError(f"Relaxation needed: {note.message}", line=note.line)
        elif on_note == "warn":
            for note in new_notes:
                warnings.warn(
                    f"Config note at line {note.line}: {note.message}",
                    category=UserWarning,
                    stacklevel=2,
                )
    return values


def load_config(fp: IO[str], **kwargs: Any) -> dict[str, tuple[str, int]]:
    """Parse a configuration document from a file-like object."""
    return loads_config(fp.read(), **kwargs)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(annotation: Any, raw: str, key: str, line: int | None) -> Any:
    """Convert a raw string to the annotated field type."""
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if typing.get_origin(annotation) is tuple:
            element = (typing.get_args(annotation) or (int,))[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(element(p) for p in parts)
    except ValueError:
        raise ConfigError(f"Invalid value {raw!r} for '{key}'", line=line, key=key) from None
    raise ConfigError(f"Unsupported field type for '{key}'", line=line, key=key)


def build_document(
    cls: type[T], values: Mapping[str, tuple[str, int | None]], base: T | None = None
) -> T:
    """Build a frozen dataclass from raw document values.

    Unknown keys are rejected; missing keys take the dataclass default (or
    the value in ``base`` when given).
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    kwargs: dict[str, Any] = {}
    for key, (raw, line) in values.items():
        if key not in known:
            raise ConfigError(f"Unknown key '{key}'", line=line, key=key)
        kwargs[key] = _convert(hints[key], raw, key, line)
    if base is not None:
        return dataclasses.replace(base, **kwargs)  # type: ignore[type-var]
    return cls(**kwargs)


def parse_overrides(overrides: Sequence[str]) -> dict[str, tuple[str, int | None]]:
    """Parse ``key=value`` command-line overrides."""
    values: dict[str, tuple[str, int | None]] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must be 'key=value', got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = (value.strip(), None)
    return values


def document_text(obj: Any, header: str | None = None) -> str:
    """Render a dataclass as a configuration document, one key per line."""
    lines: list[str] = []
    if header:
        lines.append(f"# {header}")
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
            text = f'"{text}"'
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


COORD_MODES = ("uvd", "xyzd")
INDEXING_MODES = ("auto", "dense", "hash")
ACTIVATIONS = ("relu", "softplus")
DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a training or rendering run."""

    seed: int = 0
    threads: int = 1
    dtype: str = "float32"

    coord_mode: str = "uvd"
    use_offset: bool = True
    hash_levels: int = 16
    hash_table_log2: int = 19
    hash_features: int = 2
    hash_n_min: int = 16
    hash_n_max: int = 1024
    hash_indexing: str = "auto"
    offset_hash_levels: int = 8
    offset_hash_table_log2: int = 16
    offset_hash_features: int = 2
    offset_hash_n_min: int = 8
    offset_hash_n_max: int = 128
    mlp_width: int = 64
    mlp_depth: int = 2
    offset_mlp_width: int = 64
    offset_mlp_depth: int = 2
    latent_dim: int = 8
    offset_bound: float = 0.05
    hidden_activation: str = "relu"
    table_init_scale: float = 1e-4

    squash_k: float = 0.0
    normalizer_pad: float = 0.1

    n_samples: int = 64
    shell_factor: float = 0.15
    leaf_size: int = 8

    lambda_mask: float = 0.1
    lambda_dist: float = 0.01
    lambda_dfm: float = 0.01
    beta: float = 0.0
    lambda_coarse: float = 1.0
    lambda_fine: float = 0.1
    phase_switch_iter: int = 400

    iterations: int = 2000
    batch_rays: int = 4096
    exterior_fraction: float = 0.2
    mask_dilation: int = 3
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    eval_every: int = 250

    def __post_init__(self) -> None:
        choices = {
            "coord_mode": COORD_MODES,
            "hash_indexing": INDEXING_MODES,
            "hidden_activation": ACTIVATIONS,
            "dtype": DTYPES,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"'{key}' must be one of {', '.join(allowed)}", key=key)
        positive = (
            "threads", "hash_levels", "hash_features", "offset_hash_levels",
            "offset_hash_features", "mlp_width", "mlp_depth", "offset_mlp_width",
            "offset_mlp_depth", "latent_dim", "n_samples", "leaf_size", "batch_rays",
            "eval_every", "shell_factor", "offset_bound", "lr_start", "lr_end",
        )
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive", key=key)
        non_negative = (
            "iterations", "squash_k", "beta", "lambda_mask", "lambda_dist", "lambda_dfm",
            "lambda_coarse", "lambda_fine", "phase_switch_iter", "mask_dilation",
            "normalizer_pad", "table_init_scale",
        )
        for key in non_negative:
            if getattr(self, key) < 0:
                raise ConfigError(f"'{key}' must be non-negative", key=key)
        if not 0.0 <= self.exterior_fraction < 1.0:
            raise ConfigError("'exterior_fraction' must lie in [0, 1)", key="exterior_fraction")
        for prefix in ("hash", "offset_hash"):
            if getattr(self, f"{prefix}_levels") < 2:
                raise ConfigError(f"'{prefix}_levels' must be at least 2", key=f"{prefix}_levels")
            if getattr(self, f"{prefix}_n_min") >= getattr(self, f"{prefix}_n_max"):
                raise ConfigError(f"'{prefix}_n_min' must be below '{prefix}_n_max'", key=f"{prefix}_n_min")
            if not 1 <= getattr(self, f"{prefix}_table_log2") <= 30:
                raise ConfigError(f"'{prefix}_table_log2' must lie in [1, 30]", key=f"{prefix}_table_log2")

    @classmethod
    def from_text(
        cls,
        text: str,
        *,
        note_log: list[ConfigNote] | None = None,
        on_note: OnNote = "ignore",
    ) -> RunConfig:
        """Parse a RunConfig document; missing keys take defaults."""
        raw = loads_config(text, note_log=note_log, on_note=on_note)
        return build_document(cls, raw)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> RunConfig:
        """Read a RunConfig document from disk."""
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **kwargs)

    def with_overrides(self, overrides: Sequence[str]) -> RunConfig:
        """Return a copy with ``key=value`` overrides applied."""
        return build_document(RunConfig, parse_overrides(overrides), base=self)

    def to_text(self) -> str:
        """Render the fully resolved configuration document."""
        return document_text(self, header="uvdnerf run configuration")
