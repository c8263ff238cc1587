"""Metropolis sampling of collective configurations from |det Psi|^2.

Two back ends share one contract:

* a numba chain kernel used whenever every network is an :class:`~nqes.rbm.Rbm`;
* a pure-Python path over :mod:`nqes.ensemble` for any other wavefunction
  (exact tables in the oracle tests).

Chain c of epoch e draws all of its randomness from
``SeedSequence(seed, spawn_key=(e, c))``, so a batch depends only on the
configuration, never on thread scheduling.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from . import ensemble
from .rbm import Rbm
from .spins import DimensionError, Hamiltonian, SpinConfig

log = logging.getLogger(__name__)

MAX_REDRAWS = 50


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpinProduct:
    """Product of Pauli ``axis`` ('z' or 'x') operators on one or two sites."""

    axis: str
    sites: tuple

    def __post_init__(self):
        if self.axis not in ("x", "z"):
            raise ValueError("axis must be 'x' or 'z'")
        sites = tuple(int(s) for s in self.sites)
        if len(sites) not in (1, 2) or len(set(sites)) != len(sites):
            raise ValueError("need one or two distinct sites")
        object.__setattr__(self, "sites", sites)

    def terms(self, config: SpinConfig):
        if self.axis == "z":
            val = 1
            for s in self.sites:
                val *= config.spin(s)
            return [((), float(val))]
        return [(self.sites, 1.0)]


def correlation_observables(n: int, axis: str = "z") -> dict:
    """Two-point functions for every pair i < j, named '<axis><axis>[i,j]'."""
    return {f"{axis}{axis}[{i},{j}]": SpinProduct(axis, (i, j))
            for i in range(n) for j in range(i + 1, n)}


@dataclass
class SamplerConfig:
    n_chains: int = field(default_factory=lambda: os.cpu_count() or 1)
    n_therm_sweeps: int = 200
    n_sample_sweeps: int = 200
    sweep_length: int | None = None     # None -> K * n proposals
    sample_stride: int = 2
    seed: int = 0
    # sweeps used to re-equilibrate chains continued from a previous epoch
    n_rethermal_sweeps: int = 10
    # probability of proposing a two-spin flip within one replica
    pair_flip_prob: float = 0.0
    backend: str = "auto"

    def __post_init__(self):
        for name in ("n_chains", "n_therm_sweeps", "n_sample_sweeps", "sample_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sweep_length is not None and self.sweep_length < 1:
            raise ValueError("sweep_length must be >= 1")
        if self.n_rethermal_sweeps < 0:
            raise ValueError("n_rethermal_sweeps must be >= 0")
        if not 0.0 <= self.pair_flip_prob <= 1.0:
            raise ValueError("pair_flip_prob must lie in [0, 1]")
        if self.backend not in ("auto", "numba", "python"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def samples_per_chain(self) -> int:
        return max(1, self.n_sample_sweeps // self.sample_stride)


@dataclass
class SampleBatch:
    e_loc: np.ndarray                 # (P, K, K)
    derivs: np.ndarray                # (P, L)
    obs: dict
    acceptance_rate: float
    singular_rejects: int
    chain: np.ndarray                 # (P,) chain index of each sample
    final_spins: list = field(default_factory=list)   # per chain (K, n) int8

    def __post_init__(self):
        P = len(self.e_loc)
        if len(self.derivs) != P or len(self.chain) != P:
            raise DimensionError("per-sample arrays disagree on the sample count")
        for name, arr in self.obs.items():
            if len(arr) != P:
                raise DimensionError(f"observable {name} has {len(arr)} samples, expected {P}")
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance rate outside [0, 1]")

    @property
    def count(self) -> int:
        return len(self.e_loc)

    @property
    def energies(self) -> np.ndarray:
        """Per-sample scalar energy Tr e_loc."""
        return np.trace(self.e_loc, axis1=1, axis2=2)


# ------------------------------------------------------------------ generic path


def metropolis_step(state: ensemble.SlaterState, rng, pair_flip_prob: float = 0.0):
    """One proposal: flip one spin (or a random pair) of one random replica."""
    n = state.configs[0].n
    k = int(rng.integers(state.K))
    if pair_flip_prob > 0 and n > 1 and rng.random() < pair_flip_prob:
        i, j = (int(v) for v in rng.choice(n, 2, replace=False))
        sites = (i, j)
    else:
        sites = (int(rng.integers(n)),)
    ratio = ensemble.det_ratio_replica_flip(state, k, sites)
    p = abs(ratio) ** 2
    if not np.isfinite(p):
        p = 1.0
    if p >= 1.0 or rng.random() < p:
        ensemble.accept_flip(state, k, sites)
        return state, True
    return state, False


def _generic_obs(state, observables):
    out = {}
    for name, op in observables.items():
        if isinstance(op, SpinProduct):
            out[name] = ensemble.local_operator_matrix(state, op.terms)
        else:
            out[name] = ensemble.local_operator_matrix(state, op)
    return out


def _python_chain(networks, H, observables, cfg, rng, spins0, n_therm_sweeps):
    K, n = len(networks), networks[0].n
    sweep = cfg.sweep_length or K * n
    rejects = 0
    for _ in range(MAX_REDRAWS):
        configs = ([SpinConfig.from_spins(s) for s in spins0] if spins0 is not None
                   else ensemble.distinct_random_configs(n, K, rng))
        state = ensemble.build(networks, configs)
        if not state.degenerate:
            break
        rejects += 1
        spins0 = None
    else:
        raise SamplingError("could not find a non-singular starting configuration")
    accepted = 0
    proposals = 0
    e_loc, derivs, obs = [], [], {name: [] for name in observables}
    for _ in range(n_therm_sweeps * sweep):
        state, acc = metropolis_step(state, rng, cfg.pair_flip_prob)
        accepted += acc
        proposals += 1
    for _ in range(cfg.samples_per_chain):
        for _ in range(cfg.sample_stride * sweep):
            state, acc = metropolis_step(state, rng, cfg.pair_flip_prob)
            accepted += acc
            proposals += 1
        e_loc.append(ensemble.local_energy_matrix(state, H))
        derivs.append(ensemble.ensemble_derivatives(state))
        for name, val in _generic_obs(state, observables).items():
            obs[name].append(val)
    final = np.array([c.spins for c in state.configs], dtype=np.int8)
    return dict(e_loc=np.array(e_loc), derivs=np.array(derivs),
                obs={k: np.array(v) for k, v in obs.items()},
                accepted=accepted, proposals=proposals, rejects=rejects, final=final)


# ------------------------------------------------------------------ numba path


def stack_params(networks):
    a = np.ascontiguousarray([net.params.a for net in networks])
    b = np.ascontiguousarray([net.params.b for net in networks])
    w = np.ascontiguousarray([net.params.w for net in networks])
    return a, b, w, np.cosh(2 * w), np.sinh(2 * w)


def hamiltonian_arrays(H: Hamiltonian):
    iu, ju = np.nonzero(np.triu(H.cz, 1))
    return (iu.astype(np.int64), ju.astype(np.int64), np.ascontiguousarray(H.cz[iu, ju]),
            np.ascontiguousarray(H.hz), H.x_sites, H.x_amp, H.pair_i, H.pair_j,
            H.amp_anti, H.amp_par)


def _draws(rng, T, K, n, pair_prob):
    rep = rng.integers(0, K, T)
    i = rng.integers(0, n, T)
    j = np.full(T, -1, dtype=np.int64)
    if pair_prob > 0 and n > 1:
        use = rng.random(T) < pair_prob
        other = rng.integers(0, n - 1, T)
        other = other + (other >= i)
        j = np.where(use, other, -1)
    unif = rng.random(T)
    return rep.astype(np.int64), i.astype(np.int64), j.astype(np.int64), unif


def _random_spins(rng, K, n):
    return np.array([c.spins for c in ensemble.distinct_random_configs(n, K, rng)], dtype=np.int8)


def _numba_chain(stacked, harr, observables, cfg, rng, spins0, n_therm_sweeps, record_derivs):
    a, b, w, ch, sh = stacked
    K, n, _ = w.shape
    sweep = cfg.sweep_length or K * n
    n_samples = cfg.samples_per_chain
    stride = cfg.sample_stride * sweep
    n_therm = n_therm_sweeps * sweep
    T = n_therm + n_samples * stride
    rejects = 0
    for _ in range(MAX_REDRAWS):
        spins = (np.array(spins0, dtype=np.int8) if spins0 is not None else _random_spins(rng, K, n))
        draws = _draws(rng, T, K, n, cfg.pair_flip_prob)
        e_loc, derivs, configs, _, accepted, _, ok = kern.run_chain(
            a, b, w, ch, sh, spins, *harr, *draws, n_therm, n_samples, stride,
            record_derivs, ensemble.REFACTOR_EVERY, 1000)
        if ok:
            break
        rejects += 1
        spins0 = None
    else:
        raise SamplingError("chain kept hitting singular amplitude matrices")
    obs = evaluate_observables(stacked, configs, observables) if observables else {}
    return dict(e_loc=e_loc, derivs=derivs, obs=obs, accepted=accepted, proposals=T,
                rejects=rejects, final=spins)


def evaluate_observables(stacked, configs, observables) -> dict:
    """Local operator matrices for stored configurations (numba path)."""
    a, b, w, ch, sh = stacked
    out = {}
    zz = {k: v for k, v in observables.items() if isinstance(v, SpinProduct) and v.axis == "z"}
    xs = {k: v for k, v in observables.items() if isinstance(v, SpinProduct) and v.axis == "x"}
    other = {k: v for k, v in observables.items() if not isinstance(v, SpinProduct)}
    pairs = [v.sites for v in xs.values() if len(v.sites) == 2]
    pi = np.array([p[0] for p in pairs], dtype=np.int64)
    pj = np.array([p[1] for p in pairs], dtype=np.int64)
    want_single = any(len(v.sites) == 1 for v in xs.values())
    mants, invs, single, paired, okmask = kern.slater_batch(a, b, w, ch, sh, configs, pi, pj, want_single)
    if not okmask.all():
        raise SamplingError("stored configuration has a singular amplitude matrix")
    s = configs.astype(float)
    for name, op in zz.items():
        d = np.prod(s[:, :, list(op.sites)], axis=2)          # (P, K)
        out[name] = np.einsum("pkr,pr,prc->pkc", invs, d, mants)
    t = 0
    for name, op in xs.items():
        if len(op.sites) == 1:
            rho = single[:, :, :, op.sites[0]]
        else:
            rho = paired[:, :, :, t]
            t += 1
        out[name] = invs @ (mants * rho)
    for name, op in other.items():
        harr = hamiltonian_arrays(op)
        out[name], _ = kern.local_matrix_batch(a, b, w, ch, sh, configs, *harr)
    return out


# ------------------------------------------------------------------ driver


def _use_numba(networks, cfg):
    all_rbm = all(isinstance(net, Rbm) for net in networks)
    if cfg.backend == "numba" and not all_rbm:
        raise ValueError("numba backend needs RBM networks")
    return all_rbm and cfg.backend != "python"


def chain_rng(seed: int, epoch: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(epoch), int(chain))))


def run_chains(networks, H: Hamiltonian, observables: dict | None, cfg: SamplerConfig,
               epoch: int = 0, start: list | None = None, record_derivs: bool = True,
               threads: int | None = None) -> SampleBatch:
    """Sample ``cfg.n_chains`` independent chains and concatenate them in order.

    ``start`` optionally holds per-chain (K, n) spin arrays from a previous
    batch; such chains use ``n_rethermal_sweeps`` instead of a full
    thermalization.
    """
    networks = list(networks)
    if not networks:
        raise ValueError("need at least one network")
    n = networks[0].n
    if H.n != n:
        raise DimensionError(f"Hamiltonian has {H.n} spins, networks {n}")
    observables = dict(observables or {})
    if start is not None and len(start) != cfg.n_chains:
        start = None
    fast = _use_numba(networks, cfg)
    if fast:
        stacked = stack_params(networks)
        harr = hamiltonian_arrays(H)

    def work(c):
        rng = chain_rng(cfg.seed, epoch, c)
        spins0 = None if start is None else start[c]
        therm = cfg.n_therm_sweeps if spins0 is None else cfg.n_rethermal_sweeps
        if fast:
            return _numba_chain(stacked, harr, observables, cfg, rng, spins0, therm, record_derivs)
        return _python_chain(networks, H, observables, cfg, rng, spins0, therm)

    workers = threads or min(cfg.n_chains, os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(cfg.n_chains)))
    else:
        results = [work(c) for c in range(cfg.n_chains)]

    e_loc = np.concatenate([r["e_loc"] for r in results])
    derivs = np.concatenate([r["derivs"] for r in results])
    chain = np.concatenate([np.full(len(r["e_loc"]), c) for c, r in enumerate(results)])
    obs = {name: np.concatenate([r["obs"][name] for r in results]) for name in observables}
    proposals = sum(r["proposals"] for r in results)
    accepted = sum(r["accepted"] for r in results)
    rejects = sum(r["rejects"] for r in results)
    finite = np.all(np.isfinite(e_loc.reshape(len(e_loc), -1)), axis=1)
    if not finite.all():
        bad = int((~finite).sum())
        if bad == len(e_loc):
            raise SamplingError(f"all {bad} samples are non-finite")
        log.warning("dropping %d non-finite samples", bad)
        e_loc, chain = e_loc[finite], chain[finite]
        derivs = derivs[finite] if len(derivs) else derivs
        obs = {k: v[finite] for k, v in obs.items()}
        rejects += bad
    if not record_derivs:
        derivs = np.zeros((len(e_loc), 0), dtype=complex)
    return SampleBatch(e_loc, derivs, obs, accepted / max(proposals, 1), rejects, chain,
                       [r["final"] for r in results])
