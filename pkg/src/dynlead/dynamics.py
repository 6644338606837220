"""Nearest-neighbor source dynamics and its stationary / time-reversed forms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .core import LeadField, SourceSpace

log = logging.getLogger(__name__)

LYAP_STEP_TOL = 1e-13
LYAP_MAX_DOUBLINGS = 100
LYAP_RESIDUAL_TOL = 1e-10
MAX_CONDITION = 1e12


class LyapunovConvergenceError(RuntimeError):
    def __init__(self, residual, doublings):
        self.residual = residual
        self.doublings = doublings
        super().__init__(
            f"Lyapunov doubling did not converge after {doublings} doublings "
            f"(relative residual {residual:.3e})"
        )


class IllConditionedCovarianceError(np.linalg.LinAlgError):
    pass


def _dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)


def build_transition(src: SourceSpace, phi: float) -> sp.csr_matrix:
    """Sparse transition with inverse-distance neighbor weights.

    Every row sums to ``phi``: half on the diagonal, half spread over the
    neighbors in proportion to 1/distance.  Isolated sources keep all of
    ``phi`` on the diagonal.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError(f"phi must lie in (0, 1), got {phi!r}")
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(src.neighbors):
        if not nbrs:
            rows.append(i)
            cols.append(i)
            vals.append(phi)
            continue
        inv = np.array([1.0 / d for _, d in nbrs])
        w = 0.5 * phi * inv / inv.sum()
        rows.append(i)
        cols.append(i)
        vals.append(0.5 * phi)
        rows.extend([i] * len(nbrs))
        cols.extend(j for j, _ in nbrs)
        vals.extend(w)
    p = src.size
    return sp.csr_matrix((vals, (rows, cols)), shape=(p, p))


def build_input_covariance(x: LeadField | np.ndarray, lam: float, nu) -> np.ndarray:
    """Diagonal input covariance ``diag(nu) / (lam * tr(X'X/n) / n)``.

    ``lam`` reads as an inverse power SNR: with F = phi*I and
    nu = 1 - phi**2 the stationary signal power is ``1/lam`` times the
    sensor noise power (per unit noise variance).
    """
    gain = x.gain if isinstance(x, LeadField) else np.asarray(x, dtype=float)
    n, p = gain.shape
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (p,))
    if np.any(~(nu > 0)):
        raise ValueError("all nu_i must be positive")
    trace_sigma = np.sum(gain * gain) / n
    if trace_sigma == 0.0:
        raise ValueError("lead field is identically zero; Q scale is undefined")
    scale = 1.0 / (lam * trace_sigma / n)
    return np.diag(scale * nu)


def lyapunov_residual(f, c, q) -> float:
    f = _dense(f)
    return float(np.linalg.norm(c - f @ c @ f.T - q) / np.linalg.norm(c))


def steady_state_covariance(f, q, *, step_tol=LYAP_STEP_TOL,
                            max_doublings=LYAP_MAX_DOUBLINGS) -> np.ndarray:
    """Solve ``C = F C F' + Q`` by the squaring (doubling) iteration.

    C_{m+1} = C_m + A_m C_m A_m',  A_{m+1} = A_m^2, with C_0 = Q, A_0 = F.
    After m doublings C_m holds the first 2**m terms of sum_k F^k Q F'^k.
    """
    a = _dense(f)
    c = np.array(_dense(q), dtype=float)
    if a.shape != c.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: F {a.shape}, Q {c.shape}")
    if a.shape[0] == 0:
        return c
    for m in range(1, max_doublings + 1):
        update = a @ c @ a.T
        c = c + update
        c = 0.5 * (c + c.T)
        step = np.linalg.norm(update) / np.linalg.norm(c)
        if step < step_tol:
            break
        a = a @ a
    else:
        raise LyapunovConvergenceError(lyapunov_residual(f, c, q), max_doublings)
    resid = lyapunov_residual(f, c, q)
    if not resid < LYAP_RESIDUAL_TOL:
        raise LyapunovConvergenceError(resid, m)
    log.debug("doubling converged in %d steps, residual %.2e", m, resid)
    return c


def backward_model(f, c) -> tuple[np.ndarray, np.ndarray]:
    """Time-reversed pair ``F_b = C F' C^{-1}``, ``Q_b = C - F_b C F_b'``.

    ``F_b`` comes from a Cholesky solve (``F_b' = C^{-1} F C``); no inverse
    of C is formed.
    """
    f = _dense(f)
    c = np.asarray(c, dtype=float)
    eig = np.linalg.eigvalsh(c)
    if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
        cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
        raise IllConditionedCovarianceError(f"steady-state covariance is singular (condition {cond:.3e})")
    factor = sla.cho_factor(c)
    fb = sla.cho_solve(factor, f @ c).T
    qb = c - fb @ c @ fb.T
    return fb, 0.5 * (qb + qb.T)


def spectral_radius_estimate(f, iters=500, seed=0) -> float:
    """Power-iteration estimate of the largest |eigenvalue|.

    For a nonnegative matrix like the transition the dominant eigenvalue is
    real and positive, so plain power iteration from a positive start works.
    """
    f = f if sp.issparse(f) else np.asarray(f)
    v = np.abs(np.random.default_rng(seed).standard_normal(f.shape[0])) + 1.0
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = f @ v
        est = np.linalg.norm(w)
        if est == 0.0:
            return 0.0
        v = w / est
    return float(est)


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    transition: sp.csr_matrix
    input_cov_diag: np.ndarray
    stability: float
    steady_cov: np.ndarray
    back_transition: np.ndarray
    back_input_cov: np.ndarray

    @property
    def size(self) -> int:
        return self.transition.shape[0]

    @property
    def input_cov(self) -> np.ndarray:
        return np.diag(self.input_cov_diag)

    @classmethod
    def from_transition(cls, f, q_diag, phi: float):
        f = sp.csr_matrix(f)
        q_diag = np.asarray(q_diag, dtype=float)
        if np.any(~(q_diag > 0)):
            raise ValueError("input covariance diagonal must be positive")
        c = steady_state_covariance(f, np.diag(q_diag))
        fb, qb = backward_model(f, c)
        return cls(f, q_diag, float(phi), c, fb, qb)

    @classmethod
    def build(cls, src: SourceSpace, x: LeadField, phi: float = 0.95, lam: float = 1.0, nu=None):
        """Nearest-neighbor model with ``nu`` defaulting to ``1 - phi**2``."""
        f = build_transition(src, phi)
        if nu is None:
            nu = 1.0 - phi * phi
        q = build_input_covariance(x, lam, nu)
        return cls.from_transition(f, np.diag(q), phi)

    def diagnostics(self) -> dict:
        """Residuals of the defining identities, all relative."""
        f = self.transition.toarray()
        c = self.steady_cov
        cn = np.linalg.norm(c)
        return {
            "lyapunov_residual": lyapunov_residual(f, c, self.input_cov),
            "backward_identity": float(np.linalg.norm(self.back_transition @ c - c @ f.T) / cn),
            "back_input_cov_min_eig": float(np.linalg.eigvalsh(self.back_input_cov)[0]),
            "psd_tolerance": 1e-10 * float(cn),
            "row_sum_error": float(np.max(np.abs(np.asarray(self.transition.sum(axis=1)).ravel() - self.stability))),
        }
