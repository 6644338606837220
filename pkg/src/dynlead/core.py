"""Shared domain types and matrix file I/O.

The binary matrix format is::

    b"DLF1" | rows (uint32 LE) | cols (uint32 LE) | rows*cols float64 LE, row-major

Everything else (graphs, sidecars) is CSV or JSON.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DLF1"
_HEADER = struct.Struct("<4sII")
_UNIT_TOL = 1e-12
_SYM_TOL = 1e-12


class MatrixFileError(Exception):
    """Base class for problems reading a matrix file."""

    def __init__(self, path, message):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


class BadMagicError(MatrixFileError):
    pass


class SizeMismatchError(MatrixFileError):
    pass


class NonFiniteError(MatrixFileError):
    pass


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_unit_rows(vectors, name):
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > _UNIT_TOL)
    if bad.size:
        raise ValueError(f"{name}: row {bad[0]} is not unit norm (|v|={norms[bad[0]]!r})")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SourceSpace:
    """Dipole locations, orientations and a symmetric weighted neighbor graph.

    ``neighbors[i]`` is a tuple of ``(j, distance_ij)`` pairs.  Construction
    validates the graph and raises on asymmetry instead of repairing it.
    """

    positions: np.ndarray
    orientations: np.ndarray
    neighbors: tuple

    def __init__(self, positions, orientations, neighbors: Sequence[Iterable[tuple[int, float]]]):
        pos = _frozen(positions)
        ori = _frozen(orientations)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be p x 3, got {pos.shape}")
        if ori.shape != pos.shape:
            raise ValueError(f"orientations shape {ori.shape} != positions shape {pos.shape}")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(ori))):
            raise ValueError("source positions/orientations must be finite")
        _check_unit_rows(ori, "orientations")
        p = pos.shape[0]
        nb = tuple(tuple((int(j), float(d)) for j, d in row) for row in neighbors)
        if len(nb) != p:
            raise ValueError(f"neighbor list has {len(nb)} rows for {p} sources")
        lookup = [dict(row) for row in nb]
        for i, row in enumerate(nb):
            if len(lookup[i]) != len(row):
                raise ValueError(f"source {i}: duplicate neighbor entries")
            for j, d in row:
                if not 0 <= j < p:
                    raise ValueError(f"source {i}: neighbor index {j} out of range")
                if j == i:
                    raise ValueError(f"source {i}: self-loop in neighbor graph")
                if not (np.isfinite(d) and d > 0):
                    raise ValueError(f"source {i}: non-positive distance to {j}")
                if lookup[j].get(i) != d:
                    raise ValueError(f"neighbor graph not symmetric for pair ({i}, {j})")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)
        object.__setattr__(self, "neighbors", nb)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def edges(self):
        """Undirected edges as ``(i, j, distance)`` with ``i < j``."""
        return [(i, j, d) for i, row in enumerate(self.neighbors) for j, d in row if i < j]

    def neighbor_counts(self) -> np.ndarray:
        return np.array([len(row) for row in self.neighbors], dtype=int)

    @classmethod
    def from_edges(cls, positions, orientations, edges):
        p = np.shape(positions)[0]
        rows = [[] for _ in range(p)]
        for i, j, d in edges:
            i, j, d = int(i), int(j), float(d)
            rows[i].append((j, d))
            rows[j].append((i, d))
        return cls(positions, orientations, [sorted(r) for r in rows])


@dataclass(frozen=True, eq=False)
class SensorArray:
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions)
        ori = _frozen(self.orientations)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"sensor positions must be n x 3 with n >= 1, got {pos.shape}")
        if ori.shape != pos.shape:
            raise ValueError("sensor orientations must match positions")
        _check_unit_rows(ori, "sensor orientations")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)

    @property
    def size(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class LeadField:
    """Static n x p gain matrix."""

    gain: np.ndarray

    def __post_init__(self):
        g = _frozen(self.gain)
        if g.ndim != 2:
            raise ValueError(f"lead field must be 2-D, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("lead field contains non-finite entries")
        object.__setattr__(self, "gain", g)

    @property
    def sensor_count(self) -> int:
        return self.gain.shape[0]

    @property
    def source_count(self) -> int:
        return self.gain.shape[1]

    def check_compatible(self, src: SourceSpace | None = None, sens: SensorArray | None = None):
        if src is not None and src.size != self.source_count:
            raise ValueError(f"lead field has {self.source_count} sources, source space has {src.size}")
        if sens is not None and sens.size != self.sensor_count:
            raise ValueError(f"lead field has {self.sensor_count} sensors, array has {sens.size}")


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Sensor noise covariance R and per-source input variances nu."""

    sensor_cov: np.ndarray
    input_variances: np.ndarray = field(default=None)

    def __post_init__(self):
        r = _frozen(self.sensor_cov)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("sensor_cov must be square")
        if np.max(np.abs(r - r.T), initial=0.0) > _SYM_TOL * max(1.0, np.max(np.abs(r), initial=0.0)):
            raise ValueError("sensor_cov is not symmetric")
        try:
            np.linalg.cholesky(r)
        except np.linalg.LinAlgError:
            raise ValueError("sensor_cov is not positive definite") from None
        object.__setattr__(self, "sensor_cov", r)
        if self.input_variances is not None:
            nu = _frozen(self.input_variances)
            if nu.ndim != 1 or np.any(~(nu > 0)):
                raise ValueError("input variances must be a positive 1-D sequence")
            object.__setattr__(self, "input_variances", nu)

    @classmethod
    def isotropic(cls, n: int, variance: float, input_variances=None):
        return cls(variance * np.eye(n), input_variances)


# ---------------------------------------------------------------------------
# Matrix files
# ---------------------------------------------------------------------------


def save_matrix(m, path) -> None:
    """Write ``m`` in the DLF1 binary layout; reloading is bit-exact."""
    arr = np.asarray(m, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    rows, cols = arr.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, rows, cols))
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write matrix file {path}: {exc.strerror or exc}") from exc


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise SizeMismatchError(path, f"file is {len(data)} bytes, shorter than the header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(path, f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise SizeMismatchError(path, f"header says {rows}x{cols} ({expected} bytes), file has {len(data)}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    arr = arr.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(path, "matrix contains non-finite entries")
    return arr


def load_csv_matrix(path) -> np.ndarray:
    """Parse comma-separated floats, one matrix row per line, no header."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError as exc:
                raise MatrixFileError(path, f"line {lineno}: {exc}") from None
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise SizeMismatchError(path, "rows have differing lengths")
    arr = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(path, "matrix contains non-finite entries")
    return arr


def read_matrix(path) -> np.ndarray:
    """Dispatch on extension: ``.csv`` is parsed as text, anything else as DLF1."""
    if Path(path).suffix.lower() == ".csv":
        return load_csv_matrix(path)
    return load_matrix(path)


def save_edges(edges, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "distance"])
        for i, j, d in edges:
            w.writerow([i, j, repr(float(d))])


def load_edges(path) -> list[tuple[int, int, float]]:
    path = Path(path)
    edges = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            if rec[0].strip() == "i":
                continue
            if len(rec) != 3:
                raise MatrixFileError(path, f"edge row must be i,j,distance: {rec}")
            edges.append((int(rec[0]), int(rec[1]), float(rec[2])))
    return edges
