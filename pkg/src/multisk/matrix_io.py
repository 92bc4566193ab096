"""Dense matrix and 3D tensor containers with CSV interchange."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# 17 significant digits round-trip float64 exactly.
FLOAT_FORMAT = "%.17g"


class MatrixFormatError(ValueError):
    """Raised when a matrix or tensor file cannot be parsed."""


class EmptyFileError(MatrixFormatError):
    def __init__(self, path: str | Path):
        super().__init__(f"File contains no data: {path}")
        self.path = path


class RaggedRowsError(MatrixFormatError):
    def __init__(self, line: int, expected: int, found: int):
        super().__init__(f"Ragged rows at line {line}: expected {expected} fields, found {found}")
        self.line = line


class BadFieldError(MatrixFormatError):
    def __init__(self, line: int, field: str):
        super().__init__(f"Unparseable field at line {line}: {field!r}")
        self.line = line


class NonFiniteError(MatrixFormatError):
    def __init__(self, line: int, field: str):
        super().__init__(f"Non-finite value at line {line}: {field!r}")
        self.line = line


class ShapeMismatchError(MatrixFormatError):
    def __init__(self, block: int, expected: tuple[int, int], found: tuple[int, int]):
        super().__init__(
            f"Channel block {block} has shape {found[0]}x{found[1]}, "
            f"expected {expected[0]}x{expected[1]}"
        )
        self.block = block


def _frozen_float64(values, ndim: int, label: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"{label} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{label} contains NaN or Inf entries")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Immutable rows x cols float64 matrix (row-major)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_float64(self.data, 2, "DenseMatrix"))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class DenseTensor3:
    """Immutable channels x rows x cols float64 tensor (channel-major)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_float64(self.data, 3, "DenseTensor3"))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]


def _parse_line(line: str, line_number: int) -> list[float]:
    values = []
    for field in line.split(","):
        token = field.strip()
        try:
            value = float(token)
        except ValueError:
            raise BadFieldError(line_number, field) from None
        if not math.isfinite(value):
            raise NonFiniteError(line_number, field)
        values.append(value)
    return values


def _parse_block(lines: list[tuple[int, str]]) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    for line_number, line in lines:
        values = _parse_line(line, line_number)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise RaggedRowsError(line_number, width, len(values))
        rows.append(values)
    return np.array(rows, dtype=np.float64)


def _read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [line.rstrip("\r") for line in text.split("\n")]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise EmptyFileError(path)
    return lines


def read_matrix_csv(path: str | Path) -> DenseMatrix:
    """
    Read a headerless CSV matrix.

    Args:
        path: File with one comma-separated row of decimal floats per line.

    Returns:
        The parsed matrix.

    Raises:
        OSError: If the file cannot be read.
        MatrixFormatError: On ragged rows, unparseable or non-finite fields (with line number).
    """
    lines = _read_lines(path)
    return DenseMatrix(_parse_block(list(enumerate(lines, start=1))))


def _as_array(values, ndim: int, label: str) -> np.ndarray:
    if isinstance(values, (DenseMatrix, DenseTensor3)):
        values = values.data
    return _frozen_float64(values, ndim, label)


def write_matrix_csv(m: DenseMatrix | np.ndarray, path: str | Path) -> None:
    """Write a matrix (or 2D array) as headerless CSV, lossless for float64."""
    np.savetxt(path, _as_array(m, 2, "matrix"), fmt=FLOAT_FORMAT, delimiter=",")


def read_tensor3(path: str | Path) -> DenseTensor3:
    """
    Read a tensor stored as CSV channel blocks separated by a single blank line.

    Raises:
        OSError: If the file cannot be read.
        EmptyFileError: If the file holds no blocks.
        ShapeMismatchError: If a block's shape differs from the first block's.
        MatrixFormatError: For malformed rows inside a block.
    """
    lines = _read_lines(path)
    blocks: list[list[tuple[int, str]]] = [[]]
    for line_number, line in enumerate(lines, start=1):
        if line.strip():
            blocks[-1].append((line_number, line))
            continue
        if not blocks[-1]:
            raise MatrixFormatError(f"Unexpected blank line at line {line_number}")
        blocks.append([])

    channels = []
    for index, block in enumerate(blocks, start=1):
        parsed = _parse_block(block)
        if channels and parsed.shape != channels[0].shape:
            raise ShapeMismatchError(index, channels[0].shape, parsed.shape)
        channels.append(parsed)
    return DenseTensor3(np.stack(channels))


def write_tensor3(t: DenseTensor3 | np.ndarray, path: str | Path) -> None:
    """Write a tensor (or 3D array) as blank-line separated channel blocks."""
    data = _as_array(t, 3, "tensor")
    with open(path, "w", encoding="utf-8") as f:
        for index, channel in enumerate(data):
            if index:
                f.write("\n")
            np.savetxt(f, channel, fmt=FLOAT_FORMAT, delimiter=",")
