"""From sampled K x K local matrices to per-state physics.

The averaged local energy matrix E is not Hermitian in general.  Writing
E = V diag(lambda) V^-1, the eigenvalues are the state energies and the
state-resolved value of any observable O is diag(V^-1 <O_loc> V); the
arbitrary column scaling of V cancels on that diagonal.

Error bars are delete-one jackknife estimates over chains when there are at
least ``MIN_JACKKNIFE_GROUPS`` of them, otherwise over that many contiguous
blocks of the concatenated batch.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

MIN_JACKKNIFE_GROUPS = 8
ILL_CONDITIONED = 1e8
_PAIR = re.compile(r"^(zz|xx)\[(\d+),(\d+)\]$")
_SITE = re.compile(r"^(z|x)\[(\d+)\]$")


@dataclass
class SpectralReport:
    energies: np.ndarray
    imag_residuals: np.ndarray
    transform: np.ndarray
    stderr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    defective: bool = False

    @property
    def K(self) -> int:
        return len(self.energies)

    def to_dict(self) -> dict:
        return {
            "energies": self.energies.tolist(),
            "stderr": self.stderr.tolist(),
            "imag_residuals": self.imag_residuals.tolist(),
            "defective": self.defective,
        }


def diagonalize_energy_matrix(e_mean, stderr=None) -> SpectralReport:
    """Eigen-decompose the averaged local energy matrix, sorted by real part."""
    e_mean = np.asarray(e_mean, dtype=complex)
    if not np.all(np.isfinite(e_mean)):
        raise ValueError("energy matrix has non-finite entries")
    vals, vecs = np.linalg.eig(e_mean)
    defective = False
    if np.linalg.cond(vecs) > 1e12:
        # numerically defective: eigenvalues from the Schur form are still reliable
        log.warning("energy matrix is numerically defective; using Schur form")
        T, Z = scipy.linalg.schur(e_mean, output="complex")
        vals, vecs = np.diag(T).copy(), Z
        defective = True
    order = np.argsort(vals.real, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    err = np.zeros(len(vals)) if stderr is None else np.asarray(stderr, dtype=float)
    return SpectralReport(vals.real.copy(), np.abs(vals.imag), vecs, err, defective)


def state_resolved_expectation(o_mean, transform, with_imag: bool = False):
    """diag(V^-1 O V): one value per state in the energy order of ``transform``."""
    V = np.asarray(transform)
    if np.linalg.cond(V) > ILL_CONDITIONED:
        log.warning("ill-conditioned state transform (cond %.2e)", np.linalg.cond(V))
    d = np.einsum("ij,jk,ki->i", np.linalg.inv(V), np.asarray(o_mean), V)
    return (d.real, np.abs(d.imag)) if with_imag else d.real


def gap(report: SpectralReport):
    """(E_1 - E_0, stderr combined in quadrature)."""
    if report.K < 2:
        raise ValueError("gap needs K >= 2")
    err = float(np.hypot(report.stderr[0], report.stderr[1])) if len(report.stderr) >= 2 else 0.0
    return float(report.energies[1] - report.energies[0]), err


# ------------------------------------------------------------------ jackknife


def jackknife_groups(chain: np.ndarray, n_blocks: int = MIN_JACKKNIFE_GROUPS) -> np.ndarray:
    """Group label per sample: chains if there are enough, else contiguous blocks."""
    chain = np.asarray(chain)
    if len(np.unique(chain)) >= n_blocks:
        return np.unique(chain, return_inverse=True)[1]
    P = len(chain)
    if P < n_blocks:
        return np.arange(P)
    return np.minimum(np.arange(P) * n_blocks // P, n_blocks - 1)


def _group_sums(arr, groups, G):
    out = np.zeros((G,) + arr.shape[1:], dtype=arr.dtype)
    np.add.at(out, groups, arr)
    return out


def jackknife(fn, arrays: list, groups) -> tuple:
    """Jackknife estimate of fn(*means) over sample groups.

    Returns (fn at the full means, standard error with the same shape).
    """
    groups = np.asarray(groups)
    G = int(groups.max()) + 1
    counts = np.bincount(groups, minlength=G).astype(float)
    sums = [_group_sums(np.asarray(a), groups, G) for a in arrays]
    totals = [s.sum(axis=0) for s in sums]
    N = counts.sum()
    full = np.asarray(fn(*[t / N for t in totals]))
    if G < 2:
        return full, np.zeros_like(full, dtype=float)
    reps = []
    for g in range(G):
        n = N - counts[g]
        reps.append(np.asarray(fn(*[(t - s[g]) / n for t, s in zip(totals, sums)])))
    reps = np.array(reps)
    err = np.sqrt((G - 1) / G * np.sum(np.abs(reps - reps.mean(axis=0)) ** 2, axis=0))
    return full, err


def spectral_report(e_loc, chain) -> SpectralReport:
    """Diagonalized mean energy matrix with jackknife error bars."""
    groups = jackknife_groups(chain)
    rep = diagonalize_energy_matrix(np.asarray(e_loc).mean(axis=0))
    _, err = jackknife(lambda m: diagonalize_energy_matrix(m).energies, [e_loc], groups)
    rep.stderr = err
    return rep


def trace_energy(e_loc, chain):
    """Mean of Tr e_loc and its jackknife error."""
    E = np.trace(e_loc, axis1=1, axis2=2)
    val, err = jackknife(lambda m: m.real, [E], jackknife_groups(chain))
    return float(val), float(err)


def observable_values(e_loc, obs: dict, chain) -> dict:
    """State-resolved value and error for every sampled observable.

    Returns name -> (values (K,), stderr (K,)).
    """
    groups = jackknife_groups(chain)
    names = list(obs)
    if not names:
        return {}
    stack = np.stack([obs[k] for k in names], axis=1)          # (P, n_obs, K, K)

    def fn(e_mean, o_mean):
        V = diagonalize_energy_matrix(e_mean).transform
        Vi = np.linalg.inv(V)
        return np.einsum("ij,ojk,ki->oi", Vi, o_mean, V).real

    vals, errs = jackknife(fn, [e_loc, stack], groups)
    return {k: (vals[t], errs[t]) for t, k in enumerate(names)}


def correlation_map(values: dict, n: int, state: int, axis: str = "z", with_error: bool = False):
    """Assemble the symmetric n x n map of <s_i s_j> for one state."""
    C = np.eye(n) if axis == "z" else np.full((n, n), np.nan)
    E = np.zeros((n, n))
    found = 0
    for name, (val, err) in values.items():
        m = _PAIR.match(name)
        if not m or m.group(1) != axis * 2:
            continue
        i, j = int(m.group(2)), int(m.group(3))
        C[i, j] = C[j, i] = val[state]
        E[i, j] = E[j, i] = err[state]
        found += 1
    if axis == "x":
        np.fill_diagonal(C, 1.0)
    if found == 0:
        raise KeyError(f"no {axis}{axis} pair observables were sampled")
    return (C, E) if with_error else C


def site_values(values: dict, n: int, axis: str):
    """Per-state single-site expectations, shape (K, n); NaN when not sampled."""
    out = None
    for name, (val, _) in values.items():
        m = _SITE.match(name)
        if not m or m.group(1) != axis:
            continue
        if out is None:
            out = np.full((len(val), n), np.nan)
        out[:, int(m.group(2))] = val
    return out


# ------------------------------------------------------------------ output


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def build_report(model_spec: dict, rep: SpectralReport, values: dict, n: int, metadata: dict) -> dict:
    out = {"model_hash": spec_hash(model_spec), "model": model_spec, **rep.to_dict()}
    if rep.K >= 2:
        g, ge = gap(rep)
        out["gap"], out["gap_stderr"] = g, ge
    maps = {}
    for axis in ("z", "x"):
        try:
            per_state = [correlation_map(values, n, k, axis, with_error=True) for k in range(rep.K)]
        except KeyError:
            continue
        maps[axis] = {"values": [m.tolist() for m, _ in per_state],
                      "stderr": [e.tolist() for _, e in per_state]}
    if maps:
        out["correlations"] = maps
    for axis in ("z", "x"):
        sv = site_values(values, n, axis)
        if sv is not None:
            out[f"site_{axis}"] = sv.tolist()
    out["metadata"] = metadata
    return out


def write_correlation_csv(path, C: np.ndarray):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in C])
