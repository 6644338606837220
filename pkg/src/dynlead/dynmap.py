"""Truncated dynamic lead field mappings for the DYN, IND and STS source models.

A mapping holds the 2k+1 projection blocks for offsets -k..k around a
reference time; block 0 is always the static lead field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .core import LeadField, save_matrix
from .dynamics import DynamicsModel

_EXP_FLOOR = -700.0


class ModelKind(str, Enum):
    DYN = "DYN"
    IND = "IND"
    STS = "STS"


def _gain(x) -> np.ndarray:
    return x.gain if isinstance(x, LeadField) else np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class DynamicMapping:
    blocks: tuple
    model_kind: ModelKind
    k: int
    center_index: int | None = None
    horizon: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.blocks) != 2 * self.k + 1:
            raise ValueError(f"expected {2 * self.k + 1} blocks for k={self.k}, got {len(self.blocks)}")
        shape = self.blocks[0].shape
        for b in self.blocks:
            if b.shape != shape:
                raise ValueError("all blocks must share one shape")
            b.setflags(write=False)

    @property
    def offsets(self) -> range:
        return range(-self.k, self.k + 1)

    @property
    def sensor_count(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def source_count(self) -> int:
        return self.blocks[0].shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.blocks) * self.sensor_count, self.source_count)

    def block(self, offset: int) -> np.ndarray:
        if abs(offset) > self.k:
            raise IndexError(f"offset {offset} outside [-{self.k}, {self.k}]")
        return self.blocks[offset + self.k]

    @property
    def center(self) -> np.ndarray:
        return self.blocks[self.k]

    @cached_property
    def stacked(self) -> np.ndarray:
        """(2k+1)n x p stack, earliest offset on top."""
        s = np.vstack(self.blocks)
        s.setflags(write=False)
        return s

    def save(self, directory, stem: str | None = None) -> Path:
        """Write the stack, every block and a JSON sidecar into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.model_kind.value.lower()}_k{self.k}"
        save_matrix(self.stacked, directory / f"{stem}.dlf")
        for off, b in zip(self.offsets, self.blocks):
            save_matrix(b, directory / f"{stem}_block{off:+d}.dlf")
        sidecar = {
            "model_kind": self.model_kind.value,
            "k": self.k,
            "offsets": list(self.offsets),
            "block_shape": list(self.blocks[0].shape),
            "stacked_shape": list(self.shape),
            "center_index": self.center_index,
            "horizon": self.horizon,
            **self.meta,
        }
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(sidecar, indent=2) + "\n")
        return path


def _check_k(k):
    if int(k) != k or k < 0:
        raise ValueError(f"k must be a nonnegative integer, got {k!r}")
    return int(k)


def assemble_dyn(x, dyn: DynamicsModel, k: int) -> DynamicMapping:
    """Blocks ``[X F_b^k, ..., X F_b, X, X F, ..., X F^k]``.

    Forward blocks use the recurrence M_j = M_{j-1} F.  Backward blocks use
    X F_b^j = (X C F'^j) C^{-1}, with the right factor applied by a Cholesky
    solve so F_b itself is never powered.
    """
    k = _check_k(k)
    gain = _gain(x)
    f = dyn.transition
    if gain.shape[1] != f.shape[0]:
        raise ValueError(f"lead field has {gain.shape[1]} sources, dynamics has {f.shape[0]}")
    c = dyn.steady_cov
    fwd = [gain]
    for _ in range(k):
        fwd.append(np.asarray((f.T @ fwd[-1].T).T))
    back = []
    if k:
        factor = sla.cho_factor(c)
        b = gain @ c
        for _ in range(k):
            b = np.asarray((f @ b.T).T)
            back.append(sla.cho_solve(factor, b.T).T)
    blocks = [blk.copy() for blk in reversed(back)] + [gain.copy()] + [blk.copy() for blk in fwd[1:]]
    return DynamicMapping(tuple(blocks), ModelKind.DYN, k)


def assemble_ind(x, k: int) -> DynamicMapping:
    k = _check_k(k)
    gain = _gain(x)
    blocks = [np.zeros_like(gain) for _ in range(2 * k + 1)]
    blocks[k] = gain.copy()
    return DynamicMapping(tuple(blocks), ModelKind.IND, k)


@dataclass(frozen=True, eq=False)
class TemporalCov:
    gamma: np.ndarray
    delta: float
    psi: float

    @property
    def horizon(self) -> int:
        return self.gamma.shape[0]

    def window(self, t: int, k: int) -> np.ndarray:
        """``(gamma[t-k,t], ..., gamma[t+k,t])`` with 1-based ``t``."""
        lo, hi = t - k, t + k
        if lo < 1 or hi > self.horizon:
            raise ValueError(f"window [{lo}, {hi}] outside [1, {self.horizon}]")
        return self.gamma[lo - 1:hi, t - 1]


def build_sts_temporal_cov(T: int, delta: float, psi: float) -> TemporalCov:
    """Temporal covariance with gamma[a, b] = sum_j exp(-((a-j)^2 + (j-b)^2) / (2 (delta*psi)^2)).

    Sample indices a, b, j run over 1..T.  The summand factorises as
    E[a, j] * E[b, j], so Gamma = E E'; only the upper triangle is kept and
    mirrored so the result is exactly symmetric.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (delta > 0 and psi > 0):
        raise ValueError("delta and psi must be positive")
    idx = np.arange(1, T + 1, dtype=float)
    scale = (delta * psi) ** 2
    expo = -0.5 * (idx[:, None] - idx[None, :]) ** 2 / scale
    e = np.exp(np.maximum(expo, _EXP_FLOOR))
    g = e @ e.T
    g = np.triu(g) + np.triu(g, 1).T
    g.setflags(write=False)
    return TemporalCov(g, float(delta), float(psi))


def default_sts_window(k_max: int, padding: int = 10) -> tuple[int, int]:
    """Horizon T and centre t (1-based) leaving ``padding`` samples each side."""
    T = 2 * k_max + 1 + 2 * padding
    return T, k_max + padding + 1


def assemble_sts(x, gamma: TemporalCov, t: int, k: int) -> DynamicMapping:
    k = _check_k(k)
    gain = _gain(x)
    w = gamma.window(t, k)
    ratios = w / gamma.gamma[t - 1, t - 1]
    blocks = [r * gain for r in ratios]
    blocks[k] = gain.copy()
    return DynamicMapping(tuple(blocks), ModelKind.STS, k, center_index=t, horizon=gamma.horizon,
                          meta={"delta": gamma.delta, "psi": gamma.psi})


def projection_matrix_general(x, cross_cov, cov_t) -> np.ndarray:
    """``X E[b_{t+j} b_t'] (E[b_t b_t'])^{-1}`` via a Cholesky solve.

    Raises ``numpy.linalg.LinAlgError`` if ``cov_t`` is not positive definite.
    """
    gain = _gain(x)
    cross = np.asarray(cross_cov, dtype=float)
    factor = sla.cho_factor(np.asarray(cov_t, dtype=float))
    return sla.cho_solve(factor, (gain @ cross).T).T


def stationary_cross_cov(dyn: DynamicsModel, lag: int) -> np.ndarray:
    """``E[b_{t+lag} b_t']``: F^lag C for lag > 0, C F'^|lag| for lag < 0."""
    c = dyn.steady_cov
    f = dyn.transition
    out = c.copy()
    if lag > 0:
        for _ in range(lag):
            out = np.asarray(f @ out)
    elif lag < 0:
        for _ in range(-lag):
            out = np.asarray((f @ out.T).T)
    return out


def transition_power(dyn: DynamicsModel, j: int) -> np.ndarray:
    out = np.eye(dyn.size)
    f = dyn.transition
    for _ in range(j):
        out = np.asarray(f @ out)
    return out


def assemble_naive_reversal(x, dyn: DynamicsModel, k: int) -> DynamicMapping:
    """Wrong backward blocks ``X F^j`` in place of ``X F_b^j``.

    Only used as a negative control: it does not satisfy the orthogonality
    condition unless F happens to be time-reversible.
    """
    good = assemble_dyn(x, dyn, k)
    blocks = list(good.blocks)
    for j in range(1, k + 1):
        blocks[k - j] = good.block(j).copy()
    return DynamicMapping(tuple(blocks), ModelKind.DYN, k, meta={"naive_reversal": True})


__all__ = [
    "DynamicMapping", "ModelKind", "TemporalCov", "assemble_dyn", "assemble_ind", "assemble_sts",
    "assemble_naive_reversal", "build_sts_temporal_cov", "default_sts_window",
    "projection_matrix_general", "stationary_cross_cov", "transition_power",
]
