"""Spectra, numerical rank and per-source sensitivity of assembled mappings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .dynmap import DynamicMapping, ModelKind

EPS = np.finfo(float).eps
MASK_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    singular_values: np.ndarray
    tolerance: float
    numerical_rank: int
    shape: tuple[int, int]

    def summary(self) -> dict:
        sv = self.singular_values
        return {
            "rows": self.shape[0],
            "cols": self.shape[1],
            "rank": self.numerical_rank,
            "tolerance": self.tolerance,
            "sigma_max": float(sv[0]) if sv.size else 0.0,
            "sigma_min": float(sv[-1]) if sv.size else 0.0,
        }


@dataclass(frozen=True, eq=False)
class SensitivityMap:
    values: np.ndarray
    k: int
    model_kind: ModelKind

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("sensitivity values must be a finite nonnegative vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def _as_matrix(m) -> np.ndarray:
    return m.stacked if isinstance(m, DynamicMapping) else np.asarray(m, dtype=float)


def default_tolerance(shape, sigma_max: float) -> float:
    return max(shape) * EPS * sigma_max


def singular_spectrum(m, tolerance: float | None = None) -> SpectrumReport:
    """All singular values of the stacked mapping plus its numerical rank.

    The default cutoff is ``max(rows, cols) * eps * sigma_max``.
    """
    if isinstance(m, DynamicMapping):
        shape = m.shape
        # all-zero blocks contribute only zero singular values
        live = [b for b in m.blocks if np.any(b)]
        a = np.vstack(live) if live else np.zeros((0, shape[1]))
    else:
        a = np.asarray(m, dtype=float)
        shape = a.shape
    if 0 in shape:
        raise ValueError("cannot take the spectrum of an empty mapping")
    if not np.all(np.isfinite(a)):
        raise ValueError("mapping contains non-finite entries")
    sv = np.linalg.svd(a, compute_uv=False) if a.size else np.zeros(0)
    sv = np.concatenate([sv, np.zeros(min(shape) - sv.size)])
    tol = default_tolerance(shape, sv[0]) if tolerance is None else float(tolerance)
    sv.setflags(write=False)
    return SpectrumReport(sv, tol, int(np.count_nonzero(sv > tol)), shape)


def sensitivity(m: DynamicMapping) -> SensitivityMap:
    """Column norms of the stack, accumulated block by block."""
    sq = np.zeros(m.source_count)
    for b in m.blocks:
        sq += np.einsum("ij,ij->j", b, b)
    return SensitivityMap(np.sqrt(sq), m.k, m.model_kind)


def relative_sensitivity(s_k: SensitivityMap, s_0: SensitivityMap) -> np.ma.MaskedArray:
    """Elementwise ``s_k / s_0``; sources with ``s_0 < 1e-300`` come back masked."""
    if len(s_k) != len(s_0):
        raise ValueError(f"length mismatch: {len(s_k)} vs {len(s_0)}")
    if s_k.model_kind != s_0.model_kind:
        raise ValueError(f"model mismatch: {s_k.model_kind} vs {s_0.model_kind}")
    silent = s_0.values < MASK_FLOOR
    ratio = np.divide(s_k.values, s_0.values, out=np.full(len(s_k), np.nan), where=~silent)
    return np.ma.masked_array(ratio, mask=silent)


def sensitivity_difference(a: SensitivityMap, b: SensitivityMap) -> np.ndarray:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.k != b.k:
        raise ValueError(f"k mismatch: {a.k} vs {b.k}")
    return a.values - b.values


def row_space_basis(m, tolerance: float | None = None) -> np.ndarray:
    """Orthonormal rows spanning the row space, cut at the numerical rank."""
    a = _as_matrix(m)
    _, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv.size == 0:
        return np.zeros((0, a.shape[1]))
    tol = default_tolerance(a.shape, sv[0]) if tolerance is None else float(tolerance)
    return vt[sv > tol]


def null_space_decomposition(big: DynamicMapping, small: DynamicMapping,
                             tolerance: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split each column norm of ``big`` along the row space of ``small``.

    Returns ``(outside, inside)``: column norms of ``big (I - V V')`` and of
    ``big V V'``, where V spans the row space of ``small``.  Summed over
    columns, ``outside**2 + inside**2`` equals ``||big||_F**2``.  Column by
    column it does not: ``I - V V'`` mixes sources, so each column picks up a
    cross term that only cancels in the sum.
    """
    if big.source_count != small.source_count or big.sensor_count != small.sensor_count:
        raise ValueError("mappings must share the lead field shape")
    if big.model_kind != small.model_kind:
        raise ValueError(f"model mismatch: {big.model_kind} vs {small.model_kind}")
    if not small.k < big.k:
        raise ValueError(f"need k_small < k_big, got {small.k} and {big.k}")
    if not np.array_equal(big.center, small.center):
        raise ValueError("mappings were built from different lead fields")
    v = row_space_basis(small, tolerance)
    b = big.stacked
    coeff = b @ v.T
    inside = coeff @ v
    outside = b - inside
    return np.linalg.norm(outside, axis=0), np.linalg.norm(inside, axis=0)


def null_space_projected_sensitivity(big: DynamicMapping, small: DynamicMapping,
                                     tolerance: float | None = None) -> np.ndarray:
    """Sensitivity in the directions that ``big`` reaches and ``small`` does not."""
    return null_space_decomposition(big, small, tolerance)[0]


def source_depth(positions, sphere_radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Depth below the conductor surface, ``R - |r - center|``."""
    r = np.linalg.norm(np.asarray(positions) - np.asarray(center), axis=1)
    return sphere_radius - r


def depth_gain_correlation(depth, relative_gain) -> float:
    """Spearman rank correlation, ignoring masked (silent) sources."""
    gain = np.ma.asarray(relative_gain)
    keep = ~np.ma.getmaskarray(gain)
    rho = spearmanr(np.asarray(depth)[keep], gain.data[keep])[0]
    return float(rho)
