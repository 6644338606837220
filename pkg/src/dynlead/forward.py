"""Synthetic spherical-head geometry and MEG lead field.

Sources and sensors live in a homogeneous conducting sphere centred at the
origin (unless a different centre is passed to :func:`compute_lead_field`).
The field of a current dipole is the closed-form Sarvas expression, sampled
by point magnetometers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .core import LeadField, SensorArray, SourceSpace

MU0_OVER_4PI = 1e-7
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

DepthProfile = Union[float, Sequence[float], dict]
ORIENTATION_RULES = ("tangential", "normal-to-local-surface")


@dataclass(frozen=True)
class FoldedProfile:
    """Radial fraction ``mean + amplitude * sin(folds*theta) * cos(folds*phi)``.

    A smooth corrugation of the source surface; gives a range of depths with
    neighbors that straddle sulcus-like troughs and gyrus-like crowns.
    """

    mean: float = 0.75
    amplitude: float = 0.12
    folds: int = 4

    def __call__(self, directions: np.ndarray) -> np.ndarray:
        theta = np.arccos(np.clip(directions[:, 2], -1.0, 1.0))
        phi = np.arctan2(directions[:, 1], directions[:, 0])
        return self.mean + self.amplitude * np.sin(self.folds * theta) * np.cos(self.folds * phi)


@dataclass(frozen=True)
class SphereConfig:
    sphere_radius: float = 0.09
    sensor_shell_radius: float = 0.11
    sensor_count: int = 20
    source_count: int = 400
    depth_profile: DepthProfile = field(default_factory=lambda: {"kind": "folded"})
    orientation_rule: str = "normal-to-local-surface"
    # None -> 1.5 x mean nearest-neighbor spacing of the generated sources
    neighbor_radius: float | None = None
    seed: int = 0
    jitter: float = 0.1

    def __post_init__(self):
        if self.sensor_count < 1 or self.source_count < 1:
            raise ValueError("sensor_count and source_count must both be >= 1")
        if not 0 < self.sphere_radius < self.sensor_shell_radius:
            raise ValueError("need 0 < sphere_radius < sensor_shell_radius")
        if self.neighbor_radius is not None and not self.neighbor_radius > 0:
            raise ValueError("neighbor_radius must be positive")
        if self.orientation_rule not in ORIENTATION_RULES:
            raise ValueError(f"orientation_rule must be one of {ORIENTATION_RULES}, got {self.orientation_rule!r}")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def radial_fractions(self, directions: np.ndarray) -> np.ndarray:
        prof = self.depth_profile
        p = directions.shape[0]
        if isinstance(prof, dict):
            kind = prof.get("kind", "folded")
            if kind != "folded":
                raise ValueError(f"unknown depth profile kind {kind!r}")
            params = {k: v for k, v in prof.items() if k != "kind"}
            frac = FoldedProfile(**params)(directions)
        elif np.isscalar(prof):
            frac = np.full(p, float(prof))
        else:
            frac = np.asarray(prof, dtype=float)
            if frac.shape != (p,):
                raise ValueError(f"depth_profile list has length {frac.size}, expected {p}")
        if np.any(frac <= 0) or np.any(frac >= 1):
            raise ValueError("radial fractions must lie strictly inside (0, 1)")
        return frac


@dataclass(frozen=True)
class Geometry:
    sources: SourceSpace
    sensors: SensorArray
    neighbor_radius: float
    warnings: tuple = ()

    @property
    def mean_neighbor_distance(self) -> float:
        d = [dist for _, _, dist in self.sources.edges()]
        return float(np.mean(d)) if d else float("nan")

    @property
    def mean_neighbor_count(self) -> float:
        return float(np.mean(self.sources.neighbor_counts()))


def fibonacci_hemisphere(count: int, offsets: np.ndarray | None = None) -> np.ndarray:
    """Quasi-uniform unit vectors on the upper hemisphere (z > 0).

    ``offsets`` (count x 2, in lattice-cell units) perturbs the lattice
    index and the azimuth; zero gives the plain lattice.
    """
    k = np.arange(count, dtype=float) + 0.5
    if offsets is not None:
        k = k + offsets[:, 0]
    z = 1.0 - k / count
    z = np.clip(z, 1e-6, 1.0)
    az = _GOLDEN_ANGLE * np.arange(count)
    if offsets is not None:
        az = az + offsets[:, 1] * np.sqrt(4.0 * np.pi / count)
    rho = np.sqrt(1.0 - z * z)
    return np.column_stack([rho * np.cos(az), rho * np.sin(az), z])


def _tangent_directions(radial: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal(radial.shape)
    t = raw - np.sum(raw * radial, axis=1, keepdims=True) * radial
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _surface_normals(pos: np.ndarray, neighbors, fallback: np.ndarray) -> np.ndarray:
    """Outward normals from a local PCA of each source and its neighbors."""
    normals = fallback.copy()
    for i, row in enumerate(neighbors):
        if len(row) < 2:
            continue
        pts = pos[[i] + [j for j, _ in row]]
        centred = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        nrm = vt[-1]
        if nrm @ fallback[i] < 0:
            nrm = -nrm
        normals[i] = nrm
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def neighbor_graph(pos: np.ndarray, radius: float):
    tree = cKDTree(pos)
    rows = [[] for _ in range(pos.shape[0])]
    for i, j in sorted(tree.query_pairs(radius)):
        d = float(np.linalg.norm(pos[i] - pos[j]))
        rows[i].append((j, d))
        rows[j].append((i, d))
    return [sorted(r) for r in rows]


def mean_nearest_spacing(pos: np.ndarray) -> float:
    if pos.shape[0] < 2:
        return float("nan")
    d, _ = cKDTree(pos).query(pos, k=2)
    return float(np.mean(d[:, 1]))


def build_sphere_geometry(cfg: SphereConfig) -> Geometry:
    """Deterministic sensor and source layout for ``cfg``.

    Sensors sit on a Fibonacci lattice over the upper half of the sensor
    shell and sense radially.  Sources use a seed-jittered Fibonacci lattice
    on the upper hemisphere, pushed to the per-source radial fraction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    jitter_rng, orient_rng = rng.spawn(2)

    sens_dir = fibonacci_hemisphere(cfg.sensor_count)
    sensors = SensorArray(cfg.sensor_shell_radius * sens_dir, sens_dir)

    offsets = jitter_rng.uniform(-cfg.jitter, cfg.jitter, size=(cfg.source_count, 2))
    src_dir = fibonacci_hemisphere(cfg.source_count, offsets)
    frac = cfg.radial_fractions(src_dir)
    pos = cfg.sphere_radius * frac[:, None] * src_dir

    warnings = []
    radius = cfg.neighbor_radius
    if radius is None:
        spacing = mean_nearest_spacing(pos)
        radius = 1.5 * spacing if np.isfinite(spacing) else cfg.sphere_radius
    rows = neighbor_graph(pos, radius)
    if not any(rows):
        warnings.append(f"neighbor radius {radius:g} m produced an empty neighbor graph")

    if cfg.orientation_rule == "tangential":
        ori = _tangent_directions(src_dir, orient_rng)
    else:
        ori = _surface_normals(pos, rows, src_dir)
    return Geometry(SourceSpace(pos, ori, rows), sensors, float(radius), tuple(warnings))


def dipole_field(r0: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Magnetic field at points ``r`` (m x 3) of dipoles ``(r0, q)`` (p x 3 each).

    Returns an m x p x 3 array in tesla per unit moment.  Coordinates are
    relative to the sphere centre.
    """
    r = np.asarray(r, dtype=float)[:, None, :]
    r0 = np.asarray(r0, dtype=float)[None, :, :]
    q = np.asarray(q, dtype=float)[None, :, :]
    a_vec = r - r0
    a = np.linalg.norm(a_vec, axis=-1)
    rn = np.linalg.norm(r, axis=-1)
    a_dot_r = np.sum(a_vec * r, axis=-1)
    r_dot_r0 = np.sum(r * r0, axis=-1)
    big_f = a * (rn * a + rn * rn - r_dot_r0)
    coef_r = a * a / rn + a_dot_r / a + 2.0 * a + 2.0 * rn
    coef_r0 = a + 2.0 * rn + a_dot_r / a
    grad_f = coef_r[..., None] * r - coef_r0[..., None] * r0
    q_x_r0 = np.cross(q, r0)
    proj = np.sum(q_x_r0 * r, axis=-1)
    num = big_f[..., None] * q_x_r0 - proj[..., None] * grad_f
    return MU0_OVER_4PI * num / (big_f * big_f)[..., None]


def compute_lead_field(src: SourceSpace, sens: SensorArray, sphere_center=(0.0, 0.0, 0.0),
                       sphere_radius: float | None = None) -> LeadField:
    """Gain matrix with entry (s, i) = field of unit dipole i projected on sensor s.

    ``sphere_radius``, when given, enforces that sources lie strictly inside
    and sensors strictly outside the conductor.
    """
    c = np.asarray(sphere_center, dtype=float)
    r0 = src.positions - c
    r = sens.positions - c
    src_r = np.linalg.norm(r0, axis=1)
    sens_r = np.linalg.norm(r, axis=1)
    if sphere_radius is not None:
        out = np.flatnonzero(src_r >= sphere_radius)
        if out.size:
            raise ValueError(f"source {out[0]} lies outside the sphere (|r|={src_r[out[0]]:g} m)")
        inside = np.flatnonzero(sens_r <= sphere_radius)
        if inside.size:
            raise ValueError(f"sensor {inside[0]} lies inside the sphere (|r|={sens_r[inside[0]]:g} m)")
    elif np.min(sens_r) <= np.max(src_r, initial=0.0):
        raise ValueError("every sensor must be farther from the sphere centre than every source")
    b = dipole_field(r0, src.orientations, r)
    gain = np.einsum("spk,sk->sp", b, sens.orientations)
    return LeadField(gain)
