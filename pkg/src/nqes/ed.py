"""Exact diagonalization of small spin systems.

Basis state ``x`` is the packed integer of a :class:`SpinConfig` (site i in
bit i, 1 = down).  The dense path builds the full real matrix; the Lanczos
path streams a numba matvec over the basis and never stores H.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .spins import Hamiltonian, SpinConfig

# 2^12 x 2^12 float64 is 128 MB
DENSE_MAX_SPINS = 12
LANCZOS_MAX_SPINS = 20


class CapacityError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class SpectrumResult:
    energies: np.ndarray
    vectors: np.ndarray | None
    n: int
    k: int


def diagonal(H: Hamiltonian) -> np.ndarray:
    """<x|H|x> for every basis state."""
    n = H.n
    x = np.arange(2 ** n, dtype=np.int64)
    s = 1 - 2 * ((x[None, :] >> np.arange(n)[:, None]) & 1).astype(np.int8)
    d = np.zeros(2 ** n)
    iu, ju = np.nonzero(np.triu(H.cz, 1))
    for i, j in zip(iu, ju):
        d += H.cz[i, j] * (s[i] * s[j])
    for i in np.flatnonzero(H.hz):
        d += H.hz[i] * s[i]
    return d


@numba.njit(cache=True, nogil=True)
def _offdiag_matvec(v, out, n, x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par):
    for x in range(v.shape[0]):
        acc = out[x]
        for t in range(x_sites.shape[0]):
            acc += x_amp[t] * v[x ^ (1 << x_sites[t])]
        for t in range(pair_i.shape[0]):
            i = pair_i[t]
            j = pair_j[t]
            if ((x >> i) ^ (x >> j)) & 1:
                amp = amp_anti[t]
            else:
                amp = amp_par[t]
            if amp != 0.0:
                acc += amp * v[x ^ ((1 << i) | (1 << j))]
        out[x] = acc
    return out


def matvec_operator(H: Hamiltonian) -> scipy.sparse.linalg.LinearOperator:
    """Matrix-free H as a LinearOperator over the 2^n basis."""
    if H.n > LANCZOS_MAX_SPINS:
        raise CapacityError(f"n={H.n} exceeds the Lanczos limit of {LANCZOS_MAX_SPINS}")
    d = diagonal(H)
    args = (H.n, H.x_sites, H.x_amp, H.pair_i, H.pair_j, H.amp_anti, H.amp_par)

    def mv(v):
        v = np.ascontiguousarray(np.ravel(v), dtype=float)
        return _offdiag_matvec(v, d * v, *args)

    dim = 2 ** H.n
    return scipy.sparse.linalg.LinearOperator((dim, dim), matvec=mv, dtype=float)


def dense_matrix(H: Hamiltonian) -> np.ndarray:
    if H.n > DENSE_MAX_SPINS:
        raise CapacityError(f"n={H.n} exceeds the dense limit of {DENSE_MAX_SPINS}")
    dim = 2 ** H.n
    x = np.arange(dim)
    M = np.zeros((dim, dim))
    M[x, x] = diagonal(H)
    for i, a in zip(H.x_sites, H.x_amp):
        M[x, x ^ (1 << int(i))] += a
    for i, j, aa, ap in zip(H.pair_i, H.pair_j, H.amp_anti, H.amp_par):
        anti = ((x >> int(i)) ^ (x >> int(j))) & 1
        M[x, x ^ ((1 << int(i)) | (1 << int(j)))] += np.where(anti, aa, ap)
    return M


def dense_spectrum(H: Hamiltonian, k: int | None = None, vectors: bool = True) -> SpectrumResult:
    """The k lowest eigenpairs by full diagonalization (all of them if k is None)."""
    M = dense_matrix(H)
    dim = M.shape[0]
    k = dim if k is None else min(k, dim)
    if vectors:
        w, v = scipy.linalg.eigh(M, subset_by_index=[0, k - 1])
    else:
        w = scipy.linalg.eigh(M, eigvals_only=True, subset_by_index=[0, k - 1])
        v = None
    return SpectrumResult(w, v, H.n, k)


def _spectral_bound(H: Hamiltonian, d: np.ndarray) -> float:
    return float(np.abs(d).max() + np.abs(H.x_amp).sum()
                 + np.maximum(np.abs(H.amp_anti), np.abs(H.amp_par)).sum())


def _eigsh(op, k, v0, tol, ncv, maxiter):
    try:
        return scipy.sparse.linalg.eigsh(op, k=k, which="SA", v0=v0, tol=tol, ncv=ncv, maxiter=maxiter)
    except scipy.sparse.linalg.ArpackNoConvergence as err:
        raise ConvergenceError(f"Lanczos did not converge: {len(err.eigenvalues)} of {k} pairs") from err


def lanczos_spectrum(H: Hamiltonian, k: int = 1, tol: float = 1e-12, seed: int = 0,
                     maxiter: int | None = None, max_deflations: int = 8) -> SpectrumResult:
    """k lowest eigenpairs by implicitly restarted Lanczos on the streaming matvec.

    A single Krylov sequence sees only one direction of each degenerate
    eigenspace, so the search is repeated with the converged vectors shifted
    above the spectrum until a pass finds nothing new below the current k-th
    level.  A Rayleigh-Ritz step on all collected vectors gives the result.
    """
    op = matvec_operator(H)
    dim = op.shape[0]
    if k >= dim - 1:
        return dense_spectrum(H, k)
    rng = np.random.default_rng(seed)
    ncv = min(dim, max(2 * k + 20, 40))
    maxiter = maxiter or 100 * dim
    shift = 2.0 * _spectral_bound(H, diagonal(H)) + 1.0

    w, V = _eigsh(op, k, rng.standard_normal(dim), tol, ncv, maxiter)
    for _ in range(max_deflations):
        Q = np.linalg.qr(V)[0]
        deflated = scipy.sparse.linalg.LinearOperator(
            (dim, dim), matvec=lambda v, Q=Q: op @ np.ravel(v) + shift * (Q @ (Q.T @ np.ravel(v))), dtype=float)
        w_new, V_new = _eigsh(deflated, k, rng.standard_normal(dim), tol, ncv, maxiter)
        level = np.sort(w)[k - 1]
        keep = w_new < level + max(1e-9, 1e-9 * abs(level))
        if not keep.any():
            break
        w, V = np.concatenate([w, w_new[keep]]), np.column_stack([V, V_new[:, keep]])
    else:
        raise ConvergenceError(f"degenerate search did not settle after {max_deflations} deflations")

    Q = np.linalg.qr(V)[0]
    HQ = np.column_stack([op @ Q[:, c] for c in range(Q.shape[1])])
    w, U = np.linalg.eigh(Q.T @ HQ)
    w, U = w[:k], U[:, :k]
    v = Q @ U
    v /= np.linalg.norm(v, axis=0)
    res = np.linalg.norm(HQ @ U - v * w, axis=0)
    if np.any(res > 1e-6):
        raise ConvergenceError(f"Lanczos residuals too large: {res.max():.3e}")
    return SpectrumResult(w, v, H.n, k)


def spectrum(H: Hamiltonian, k: int, **kw) -> SpectrumResult:
    if H.n <= DENSE_MAX_SPINS:
        return dense_spectrum(H, k)
    return lanczos_spectrum(H, k, **kw)


def _n_from_vector(vec):
    n = int(round(np.log2(len(vec))))
    if 2 ** n != len(vec):
        raise ValueError("vector length is not a power of two")
    return n


def exact_correlation(vec, i: int, j: int, axis: str = "z") -> float:
    """<sigma_axis^i sigma_axis^j> in the state ``vec``."""
    vec = np.asarray(vec)
    _n_from_vector(vec)
    norm = np.vdot(vec, vec).real
    if i == j:
        return 1.0
    x = np.arange(len(vec))
    bi, bj = (x >> i) & 1, (x >> j) & 1
    if axis == "z":
        s = (1 - 2 * bi) * (1 - 2 * bj)
        return float(np.sum(np.abs(vec) ** 2 * s) / norm)
    flipped = vec[x ^ ((1 << i) | (1 << j))]
    if axis == "x":
        coeff = 1.0
    elif axis == "y":
        coeff = np.where(bi != bj, 1.0, -1.0)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return float(np.real(np.vdot(vec, coeff * flipped)) / norm)


def exact_magnetization(vec, i: int, axis: str = "z") -> float:
    vec = np.asarray(vec)
    x = np.arange(len(vec))
    norm = np.vdot(vec, vec).real
    if axis == "z":
        return float(np.sum(np.abs(vec) ** 2 * (1 - 2 * ((x >> i) & 1))) / norm)
    if axis == "x":
        return float(np.real(np.vdot(vec, vec[x ^ (1 << i)])) / norm)
    raise ValueError(f"unknown axis {axis!r}")


def correlation_matrix(vec, axis: str = "z") -> np.ndarray:
    n = _n_from_vector(vec)
    C = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            C[i, j] = C[j, i] = exact_correlation(vec, i, j, axis)
    return C


class TableWavefunction:
    """Wavefunction backed by a dense amplitude table (length 2^n).

    Implements the same contract as the RBM so exact eigenstates can be fed
    into the determinant machinery.  Zero amplitudes give log_psi = -inf;
    ratios out of such a configuration are infinite.
    """

    n_params = 0

    def __init__(self, vector):
        self.table = np.asarray(vector, dtype=complex)
        self.n = _n_from_vector(self.table)
        if not np.any(self.table):
            raise ValueError("wavefunction table is identically zero")
        with np.errstate(divide="ignore"):
            self.log_table = np.log(self.table)

    def log_psi(self, config: SpinConfig) -> complex:
        return self.log_table[config.bits]

    def new_cache(self, config: SpinConfig):
        return _TableCache(self.log_table[config.bits])

    def log_psi_flipped(self, cache, config: SpinConfig, sites) -> complex:
        return self.log_table[config.flip(*sites).bits]

    def ratio_flip(self, cache, config: SpinConfig, i: int) -> complex:
        new = self.table[config.flip(i).bits]
        old = self.table[config.bits]
        if old == 0:
            return complex(np.inf) if new != 0 else complex(np.nan)
        return new / old

    def update_cache_flip(self, cache, config: SpinConfig, i: int):
        return _TableCache(self.log_table[config.flip(i).bits])

    def derivatives(self, cache, config: SpinConfig) -> np.ndarray:
        return np.zeros(0, dtype=complex)


@dataclass
class _TableCache:
    log_psi: complex


def table_wavefunction(vector) -> TableWavefunction:
    return TableWavefunction(vector)
