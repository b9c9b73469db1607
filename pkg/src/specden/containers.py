"""Spectrum-image data model, pixel flattening and the SIC container format.

A spectrum image is a ``rows x cols x channels`` cube of counts.  PCA works on
the flattened ``m x n`` matrix with one row per pixel, pixels taken in
row-major order (row index varies slowest).

SIC layout (little-endian)::

    b"SIC1"                       magic
    u32 rows, u32 cols, u32 n_channels
    f64 offset_kev, f64 dispersion_kev
    u32 provenance_length, provenance (UTF-8)
    rows*cols*n_channels f64      channel fastest, then col, then row
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, DimensionMismatchError, MagicMismatchError

MAGIC = b"SIC1"
_HEADER = struct.Struct("<4sIIIddI")


@dataclass(frozen=True)
class EnergyAxis:
    """Linear energy calibration; ``offset_kev`` is the centre of channel 0."""

    offset_kev: float
    dispersion_kev: float
    n_channels: int

    def __post_init__(self):
        if not self.dispersion_kev > 0:
            raise ValueError(f"dispersion must be positive, got {self.dispersion_kev}")
        if int(self.n_channels) < 1:
            raise ValueError(f"need at least one channel, got {self.n_channels}")
        object.__setattr__(self, "n_channels", int(self.n_channels))
        object.__setattr__(self, "offset_kev", float(self.offset_kev))
        object.__setattr__(self, "dispersion_kev", float(self.dispersion_kev))

    @classmethod
    def from_range(cls, lo_kev: float, hi_kev: float, n_channels: int) -> "EnergyAxis":
        """Axis whose channels tile ``[lo_kev, hi_kev)`` edge to edge."""
        disp = (hi_kev - lo_kev) / n_channels
        return cls(lo_kev + 0.5 * disp, disp, n_channels)

    def energy_of(self, channel):
        return self.offset_kev + np.asarray(channel) * self.dispersion_kev

    def channel_of(self, energy_kev):
        ch = np.rint((np.asarray(energy_kev) - self.offset_kev) / self.dispersion_kev)
        return ch.astype(int) if np.ndim(ch) else int(ch)

    @property
    def energies(self) -> np.ndarray:
        return self.energy_of(np.arange(self.n_channels))

    @property
    def lo_kev(self) -> float:
        return self.offset_kev - 0.5 * self.dispersion_kev

    @property
    def hi_kev(self) -> float:
        return self.lo_kev + self.n_channels * self.dispersion_kev


@dataclass(frozen=True, eq=False)
class SpectrumImage:
    counts: np.ndarray
    axis: EnergyAxis
    provenance: str = ""

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        if counts.ndim != 3:
            raise DimensionMismatchError(f"counts must be 3D, got shape {counts.shape}")
        if counts.shape[2] != self.axis.n_channels:
            raise DimensionMismatchError(
                f"{counts.shape[2]} channels in data but axis has {self.axis.n_channels}"
            )
        if min(counts.shape) < 1:
            raise DimensionMismatchError(f"empty cube {counts.shape}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def rows(self) -> int:
        return self.counts.shape[0]

    @property
    def cols(self) -> int:
        return self.counts.shape[1]

    @property
    def n_channels(self) -> int:
        return self.counts.shape[2]

    @property
    def total_counts(self) -> float:
        return float(self.counts.sum())

    def is_valid(self) -> bool:
        """True when all counts are finite and non-negative."""
        return bool(np.all(np.isfinite(self.counts)) and np.all(self.counts >= 0))

    def with_counts(self, counts, provenance: str | None = None) -> "SpectrumImage":
        return SpectrumImage(counts, self.axis, self.provenance if provenance is None else provenance)

    def __eq__(self, other):
        if not isinstance(other, SpectrumImage):
            return NotImplemented
        return (
            self.axis == other.axis
            and self.provenance == other.provenance
            and self.counts.shape == other.counts.shape
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """Flattened pixel-by-channel matrix with the pixel -> (row, col) map."""

    values: np.ndarray
    rows: int
    cols: int
    pixel_map: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(f"matrix must be 2D, got {values.shape}")
        if self.rows * self.cols != values.shape[0]:
            raise DimensionMismatchError(
                f"grid {self.rows}x{self.cols} does not match m={values.shape[0]}"
            )
        object.__setattr__(self, "values", values)
        if self.pixel_map is None:
            rr, cc = np.divmod(np.arange(values.shape[0]), self.cols)
            object.__setattr__(self, "pixel_map", np.stack([rr, cc], axis=1))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


def flatten(cube: SpectrumImage) -> DataMatrix:
    values = cube.counts.reshape(cube.rows * cube.cols, cube.n_channels).copy()
    return DataMatrix(values, cube.rows, cube.cols)


def unflatten(matrix, rows: int, cols: int, axis: EnergyAxis, provenance: str = "") -> SpectrumImage:
    values = matrix.values if isinstance(matrix, DataMatrix) else np.asarray(matrix, dtype=np.float64)
    m, n = values.shape
    if rows * cols != m:
        raise DimensionMismatchError(f"rows*cols = {rows * cols} but matrix has m = {m}")
    if axis.n_channels != n:
        raise DimensionMismatchError(f"axis has {axis.n_channels} channels but matrix has n = {n}")
    return SpectrumImage(values.reshape(rows, cols, n), axis, provenance)


def sparsity(matrix) -> float:
    """Fraction of strictly nonzero entries (0.001 means 99.9% empty)."""
    values = matrix.values if isinstance(matrix, DataMatrix) else np.asarray(matrix)
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values)) / values.size


def save_container(cube: SpectrumImage, path) -> None:
    prov = cube.provenance.encode("utf-8")
    header = _HEADER.pack(
        MAGIC, cube.rows, cube.cols, cube.n_channels,
        cube.axis.offset_kev, cube.axis.dispersion_kev, len(prov),
    )
    payload = np.ascontiguousarray(cube.counts, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(prov)
        fh.write(payload)
    os.replace(tmp, path)


def load_container(path) -> SpectrumImage:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise CorruptHeaderError(f"{path}: truncated header")
    _, rows, cols, nch, offset, disp, plen = _HEADER.unpack_from(raw)
    start = _HEADER.size + plen
    expected = rows * cols * nch * 8
    if rows == 0 or cols == 0 or nch == 0 or len(raw) - start != expected:
        raise CorruptHeaderError(
            f"{path}: header declares {rows}x{cols}x{nch} ({expected} bytes) "
            f"but payload holds {max(len(raw) - start, 0)} bytes"
        )
    try:
        prov = raw[_HEADER.size:start].decode("utf-8")
        axis = EnergyAxis(offset, disp, nch)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    counts = np.frombuffer(raw, dtype="<f8", offset=start).reshape(rows, cols, nch)
    return SpectrumImage(counts.astype(np.float64), axis, prov)


def _fmt(x) -> str:
    return repr(float(x))


def write_spectrum_csv(path, axis: EnergyAxis, spectrum) -> None:
    spectrum = np.asarray(spectrum, dtype=np.float64)
    lines = ["energy_kev,value"]
    lines += [f"{_fmt(e)},{_fmt(v)}" for e, v in zip(axis.energies, spectrum)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_map_csv(path, image) -> None:
    image = np.asarray(image, dtype=np.float64)
    lines = [",".join(f"c{j}" for j in range(image.shape[1]))]
    lines += [",".join(_fmt(v) for v in row) for row in image]
    Path(path).write_text("\n".join(lines) + "\n")


def read_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
