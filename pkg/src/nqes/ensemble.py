"""K-replica determinant ansatz built from K wavefunctions.

For replica configurations S^1..S^K and networks psi_1..psi_K the collective
amplitude is det Psi with Psi[r, c] = psi_c(S^r).  Rows are stored as a
mantissa times exp(offset), offset_r = max_c Re log psi_c(S^r), so the
determinant never overflows.  The local energy matrix

    E_loc = Psi^-1 (H Psi)

is invariant under the row scaling, so it is computed from mantissas only.

Any object with ``n``, ``n_params``, ``new_cache``, ``log_psi_flipped``,
``update_cache_flip`` and ``derivatives`` can serve as a network; see
:class:`nqes.rbm.Rbm` and :class:`nqes.ed.TableWavefunction`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spins import ConstraintError, DimensionError, Hamiltonian, SpinConfig, connection_sites, diag_energy

# full refactorization after this many accepted rank-1 updates
REFACTOR_EVERY = 100
# rank-1 update is skipped (full rebuild instead) below this ratio magnitude
TINY_RATIO = 1e-12
# relative smallest singular value treated as exactly singular
SINGULAR_RCOND = 1e-13


class SingularStateError(ArithmeticError):
    """The K x K amplitude matrix is singular."""


@dataclass
class SlaterState:
    """Mutable sampler state; owned by a single chain."""

    networks: list
    configs: list
    caches: list            # caches[r][c]
    logpsi: np.ndarray      # (K, K) complex
    offsets: np.ndarray     # (K,)
    mant: np.ndarray        # (K, K) complex
    inverse: np.ndarray | None
    degenerate: bool = False
    since_refactor: int = 0
    _pending: tuple | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.networks)

    @property
    def log_abs_det(self) -> float:
        """log |det Psi|, -inf for a degenerate state."""
        if self.degenerate:
            return -np.inf
        sign, logdet = np.linalg.slogdet(self.mant)
        return float(logdet + self.offsets.sum()) if sign != 0 else -np.inf


def _row_scale(logrow):
    finite = np.isfinite(logrow.real)
    o = logrow.real[finite].max() if finite.any() else 0.0
    with np.errstate(under="ignore"):
        return o, np.where(finite, np.exp(logrow - o), 0.0)


def _invert(mant):
    K = mant.shape[0]
    if not np.all(np.isfinite(mant)):
        return None
    sv = np.linalg.svd(mant, compute_uv=False)
    if not sv[-1] > SINGULAR_RCOND * sv[0]:
        return None
    return np.linalg.solve(mant, np.eye(K))


def _refactor(state: SlaterState):
    K = state.K
    for r in range(K):
        state.offsets[r], state.mant[r] = _row_scale(state.logpsi[r])
    state.inverse = _invert(state.mant)
    state.degenerate = state.inverse is None
    state.since_refactor = 0


def build(networks, configs) -> SlaterState:
    """Build the state for networks psi_1..psi_K and replicas S^1..S^K."""
    K = len(networks)
    if K < 1 or len(configs) != K:
        raise DimensionError("need as many replica configurations as networks")
    n = networks[0].n
    for net in networks:
        if net.n != n:
            raise DimensionError("networks disagree on the number of spins")
    configs = [c if isinstance(c, SpinConfig) else SpinConfig.from_spins(c) for c in configs]
    for c in configs:
        if c.n != n:
            raise DimensionError(f"config has {c.n} spins, networks have {n}")
    caches = [[net.new_cache(cfg) for net in networks] for cfg in configs]
    logpsi = np.array([[caches[r][c].log_psi for c in range(K)] for r in range(K)], dtype=complex)
    state = SlaterState(list(networks), configs, caches, logpsi, np.zeros(K),
                        np.zeros((K, K), dtype=complex), None)
    _refactor(state)
    return state


def _sites(sites):
    return (int(sites),) if np.isscalar(sites) else tuple(int(s) for s in sites)


def det_ratio_replica_flip(state: SlaterState, k: int, sites) -> complex:
    """det Psi' / det Psi for flipping ``sites`` of replica k.

    Uses one row of the stored inverse: R = sum_c m'_c [Psi^-1]_{c,k}, with
    m' the new row in the old row's scale.  The proposal is remembered so a
    following :func:`accept_flip` does not recompute it.
    """
    if state.degenerate:
        raise SingularStateError("determinant is zero; ratio undefined")
    sites = _sites(sites)
    cfg = state.configs[k]
    newlog = np.array([net.log_psi_flipped(state.caches[k][c], cfg, sites)
                       for c, net in enumerate(state.networks)], dtype=complex)
    with np.errstate(under="ignore"):
        row = np.where(np.isfinite(newlog.real), np.exp(newlog - state.offsets[k]), 0.0)
    ratio = complex(row @ state.inverse[:, k])
    state._pending = (k, sites, newlog, row, ratio)
    return ratio


def accept_flip(state: SlaterState, k: int, sites) -> SlaterState:
    """Apply the flip in place: caches, log amplitudes and the inverse."""
    sites = _sites(sites)
    pend = state._pending
    if pend is None or pend[0] != k or pend[1] != sites:
        det_ratio_replica_flip(state, k, sites) if not state.degenerate else None
        pend = state._pending
    state._pending = None
    cfg = state.configs[k]
    K = state.K
    for c, net in enumerate(state.networks):
        cache, cur = state.caches[k][c], cfg
        for i in sites:
            cache = net.update_cache_flip(cache, cur, i)
            cur = cur.flip(i)
        state.caches[k][c] = cache
    state.configs[k] = cfg.flip(*sites)
    if pend is None:
        state.logpsi[k] = [state.caches[k][c].log_psi for c in range(K)]
        _refactor(state)
        return state
    _, _, newlog, row, ratio = pend
    state.logpsi[k] = newlog
    state.since_refactor += 1
    if abs(ratio) < TINY_RATIO or state.since_refactor >= REFACTOR_EVERY:
        _refactor(state)
        return state
    inv = state.inverse
    q = (row - state.mant[k]) @ inv
    inv -= np.outer(inv[:, k], q) / ratio
    o, scaled = _row_scale(newlog)
    f = np.exp(state.offsets[k] - o)
    state.mant[k] = row * f
    inv[:, k] /= f
    state.offsets[k] = o
    return state


def _require_regular(state):
    if state.degenerate:
        raise SingularStateError("amplitude matrix is singular")


def local_energy_matrix(state: SlaterState, H: Hamiltonian) -> np.ndarray:
    """E_loc = Psi^-1 (H Psi), a K x K complex matrix."""
    _require_regular(state)
    K = state.K
    hm = np.zeros((K, K), dtype=complex)
    for r, cfg in enumerate(state.configs):
        if cfg.n != H.n:
            raise DimensionError("Hamiltonian size does not match the configuration")
        hm[r] = diag_energy(cfg, H) * state.mant[r]
        for sites, amp in connection_sites(cfg, H):
            newlog = np.array([net.log_psi_flipped(state.caches[r][c], cfg, sites)
                               for c, net in enumerate(state.networks)], dtype=complex)
            with np.errstate(under="ignore"):
                hm[r] += amp * np.where(np.isfinite(newlog.real), np.exp(newlog - state.offsets[r]), 0.0)
    return state.inverse @ hm


def local_operator_matrix(state: SlaterState, op) -> np.ndarray:
    """Psi^-1 (O Psi) for a diagonal/flip operator.

    ``op`` is a :class:`Hamiltonian` (any two-body operator) or a callable
    ``op(config) -> iterable of (sites, amplitude)`` where ``sites == ()``
    denotes a diagonal contribution.
    """
    if isinstance(op, Hamiltonian):
        return local_energy_matrix(state, op)
    _require_regular(state)
    K = state.K
    hm = np.zeros((K, K), dtype=complex)
    for r, cfg in enumerate(state.configs):
        for sites, amp in op(cfg):
            if not sites:
                hm[r] += amp * state.mant[r]
                continue
            newlog = np.array([net.log_psi_flipped(state.caches[r][c], cfg, tuple(sites))
                               for c, net in enumerate(state.networks)], dtype=complex)
            with np.errstate(under="ignore"):
                hm[r] += amp * np.where(np.isfinite(newlog.real), np.exp(newlog - state.offsets[r]), 0.0)
    return state.inverse @ hm


def ensemble_derivatives(state: SlaterState) -> np.ndarray:
    """d log det Psi / dW, concatenated network by network.

    Network k only enters column k, so
    d log det / dW^(k) = sum_r [Psi^-1]_{k,r} Psi_{r,k} d log psi_k(S^r) / dW^(k).
    """
    _require_regular(state)
    out = []
    for k, net in enumerate(state.networks):
        g = state.inverse[k] * state.mant[:, k]
        d = sum(g[r] * net.derivatives(state.caches[r][k], state.configs[r]) for r in range(state.K))
        out.append(np.asarray(d, dtype=complex).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=complex)


def distinct_random_configs(n: int, K: int, rng) -> list[SpinConfig]:
    """K pairwise distinct uniformly random configurations."""
    if K > 2 ** min(n, 62):
        raise ConstraintError(f"cannot place {K} distinct replicas on {n} spins")
    rng = np.random.default_rng(rng)
    seen: set[int] = set()
    out = []
    while len(out) < K:
        c = SpinConfig.from_spins(rng.choice(np.array([-1, 1], dtype=np.int8), n))
        if c.bits not in seen:
            seen.add(c.bits)
            out.append(c)
    return out
