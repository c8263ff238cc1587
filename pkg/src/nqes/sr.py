"""Stochastic reconfiguration with a matrix-free covariance solve.

With per-sample energies E_s = Tr e_loc(s) and log-derivatives D_s,

    F   = <E D*> - <E><D*>
    C v = <D* (D . v)> - <D*> (<D> . v) + lambda v
    W  <- W - gamma C^-1 F

C is never formed: every product costs two passes over the P x L sample
matrix and O(L) extra memory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .minres_qlp import KrylovResult, SolverAbort, minres_qlp

log = logging.getLogger(__name__)


class StatisticsError(ValueError):
    pass


@dataclass
class SrConfig:
    learning_rate: float = 0.02
    # gamma(p) = learning_rate * decay ** p
    decay: float = 1.0
    diag_shift: float = 1e-3
    krylov_tol: float = 1e-6
    krylov_max_iter: int = 200
    max_update_norm: float | None = None
    max_retries: int = 3

    def __post_init__(self):
        if self.diag_shift <= 0:
            raise ValueError("diag_shift must be > 0")
        if self.krylov_tol <= 0:
            raise ValueError("krylov_tol must be > 0")
        if self.learning_rate <= 0 or not 0 < self.decay <= 1:
            raise ValueError("need learning_rate > 0 and 0 < decay <= 1")
        if self.krylov_max_iter < 1 or self.max_retries < 0:
            raise ValueError("bad iteration limits")

    def rate(self, p: int) -> float:
        return self.learning_rate * self.decay ** p


@dataclass
class SrWorkspace:
    """Centered statistics of one batch."""

    mean_d: np.ndarray
    force: np.ndarray

    @property
    def n_params(self) -> int:
        return len(self.force)


@dataclass
class StepInfo:
    rate: float
    diag_shift: float
    iters: int
    residual: float
    converged: bool
    update_norm: float
    retries: int
    skipped: bool = False


def _energies(batch):
    return np.trace(batch.e_loc, axis1=1, axis2=2)


def _normalized(weights, P):
    w = np.asarray(weights, dtype=float)
    if w.shape != (P,) or np.any(w < 0) or not w.sum() > 0:
        raise StatisticsError("weights must be non-negative with one entry per sample")
    return w / w.sum()


def forces(batch, weights=None) -> np.ndarray:
    """F_l = <E D_l*> - <E><D_l*> with E = Tr e_loc.

    ``weights`` replaces the uniform sample average by a weighted one, e.g.
    |Psi|^2 over an exhaustively enumerated configuration space.
    """
    P = batch.count
    if P < 2:
        raise StatisticsError("need at least two samples")
    E = _energies(batch)
    D = batch.derivs
    if weights is not None:
        w = _normalized(weights, P)
        return np.conj(D.T @ np.conj(w * E)) - (w @ E) * np.conj(w @ D)
    # conj(D)^T E computed as conj(D^T conj(E)) to avoid a conjugated copy of D
    return np.conj(D.T @ np.conj(E)) / P - E.mean() * np.conj(D.mean(axis=0))


def cov_matvec(batch, v, diag_shift: float, mean_d: np.ndarray | None = None, weights=None) -> np.ndarray:
    """(C + lambda I) v without forming C."""
    D = batch.derivs
    P = len(D)
    v = np.asarray(v)
    w = None if weights is None else _normalized(weights, P)
    if mean_d is None:
        mean_d = D.mean(axis=0) if w is None else w @ D
    Dv = D @ v
    if w is None:
        first = np.conj(D.T @ np.conj(Dv)) / P
    else:
        first = np.conj(D.T @ np.conj(w * Dv))
    return first - np.conj(mean_d) * (mean_d @ v) + diag_shift * v


def dense_covariance(batch) -> np.ndarray:
    """C_{ll'} = <D_l* D_l'> - <D_l*><D_l'> (test oracle; O(L^2) memory)."""
    D = batch.derivs
    m = D.mean(axis=0)
    return D.conj().T @ D / len(D) - np.outer(m.conj(), m)


def workspace(batch) -> SrWorkspace:
    return SrWorkspace(batch.derivs.mean(axis=0), forces(batch))


def solve_minres_qlp(matvec, rhs, tol: float = 1e-6, max_iter: int = 200) -> KrylovResult:
    res = minres_qlp(matvec, rhs, rtol=tol, maxit=max_iter)
    if not res.converged:
        # the minimum-residual iterate is still used; the trace records the residual
        log.debug("MINRES-QLP stopped without convergence: %s (residual %.3e)", res.message, res.residual_norm)
    return res


def natural_gradient(batch, cfg: SrConfig, diag_shift: float | None = None):
    ws = workspace(batch)
    lam = cfg.diag_shift if diag_shift is None else diag_shift
    res = solve_minres_qlp(lambda v: cov_matvec(batch, v, lam, ws.mean_d), ws.force,
                           cfg.krylov_tol, cfg.krylov_max_iter)
    return res, ws


def sr_step(params: np.ndarray, batch, cfg: SrConfig, p: int, diag_shift: float | None = None):
    """One SR update of the flat parameter vector; returns (new params, info).

    A solver abort skips the step and retries with doubled lambda, up to
    ``cfg.max_retries`` times; the parameters are returned unchanged if every
    attempt fails.
    """
    lam = cfg.diag_shift if diag_shift is None else diag_shift
    rate = cfg.rate(p)
    for attempt in range(cfg.max_retries + 1):
        try:
            res, _ = natural_gradient(batch, cfg, lam)
        except SolverAbort as err:
            log.warning("SR solve aborted (%s); doubling diag shift to %.3e", err, 2 * lam)
            lam *= 2
            continue
        v = res.x
        norm = float(np.linalg.norm(v))
        if cfg.max_update_norm is not None and norm > cfg.max_update_norm:
            v = v * (cfg.max_update_norm / norm)
        new = params - rate * v
        return new, StepInfo(rate, lam, res.iters, res.residual_norm, res.converged, norm, attempt)
    return params, StepInfo(rate, lam, 0, np.nan, False, 0.0, cfg.max_retries, skipped=True)
