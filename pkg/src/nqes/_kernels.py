"""Numba kernels for Markov chains over K-replica RBM determinants.

Layout conventions shared by every kernel:

    a (K, n), b (K, m), w (K, n, m)      network parameters, complex128
    ch, sh (K, n, m)                     cosh(2 w), sinh(2 w)
    spins (K, n) int8                    replica r is row r
    theta, tanh (K_rep, K_net, m)        per replica, per network caches
    logpsi (K_rep, K_net)                log psi_c(S^r)
    off (K_rep,)                         row offsets, max_c Re logpsi[r, c]
    mant (K, K)                          exp(logpsi[r, c] - off[r])
    inv (K, K)                           inverse of mant

The determinant is det(mant) * exp(sum(off)); all local matrices are
computed as inv @ (row-scaled H Psi), in which the offsets cancel.
"""
from __future__ import annotations

import numba
import numpy as np

_JIT = dict(cache=True, nogil=True, fastmath=False)


@numba.njit(**_JIT)
def log2cosh(z):
    if z.real < 0:
        z = -z
    return z + np.log1p(np.exp(-2.0 * z))


@numba.njit(**_JIT)
def init_replica(a, b, w, spins, r, theta, tanh, logpsi):
    K, n, m = w.shape
    for c in range(K):
        lp = 0j
        for i in range(n):
            lp += a[c, i] * spins[r, i]
        for j in range(m):
            t = b[c, j]
            for i in range(n):
                t += w[c, i, j] * spins[r, i]
            theta[r, c, j] = t
            tanh[r, c, j] = np.tanh(t)
            lp += log2cosh(t)
        logpsi[r, c] = lp


@numba.njit(**_JIT)
def rebuild_matrix(logpsi, off, mant):
    """Fill offsets and mantissas; return (inverse, ok)."""
    K = logpsi.shape[0]
    for r in range(K):
        o = logpsi[r, 0].real
        for c in range(1, K):
            if logpsi[r, c].real > o:
                o = logpsi[r, c].real
        off[r] = o
        for c in range(K):
            mant[r, c] = np.exp(logpsi[r, c] - o)
    inv = np.zeros((K, K), dtype=np.complex128)
    for r in range(K):
        for c in range(K):
            if not np.isfinite(mant[r, c]):
                return inv, False
    u, sv, vh = np.linalg.svd(mant)
    if not (sv[-1] > 1e-13 * sv[0]):
        return inv, False
    inv[:, :] = np.linalg.inv(mant)
    return inv, True


@numba.njit(**_JIT)
def flip_ratio(a, ch, sh, spins, tanh, r, c, i, j):
    """psi_c(S^r with i (and j >= 0) flipped) / psi_c(S^r)."""
    m = ch.shape[2]
    si = spins[r, i]
    if j < 0:
        rho = np.exp(-2.0 * a[c, i] * si)
        for h in range(m):
            rho *= ch[c, i, h] - tanh[r, c, h] * si * sh[c, i, h]
        return rho
    sj = spins[r, j]
    rho = np.exp(-2.0 * (a[c, i] * si + a[c, j] * sj))
    for h in range(m):
        chi = ch[c, i, h]
        chj = ch[c, j, h]
        shi = si * sh[c, i, h]
        shj = sj * sh[c, j, h]
        rho *= (chi * chj + shi * shj) - tanh[r, c, h] * (shi * chj + chi * shj)
    return rho


@numba.njit(**_JIT)
def apply_flip(w, ch, sh, spins, theta, tanh, r, i):
    K, n, m = w.shape
    si = spins[r, i]
    for c in range(K):
        for h in range(m):
            cc = ch[c, i, h]
            ss = si * sh[c, i, h]
            t = tanh[r, c, h]
            tanh[r, c, h] = (t * cc - ss) / (cc - t * ss)
            theta[r, c, h] -= 2.0 * w[c, i, h] * si
    spins[r, i] = -si


@numba.njit(**_JIT)
def diag_energy(spins, r, zz_i, zz_j, zz_c, hz):
    e = 0.0
    for t in range(zz_i.shape[0]):
        e += zz_c[t] * spins[r, zz_i[t]] * spins[r, zz_j[t]]
    for i in range(hz.shape[0]):
        if hz[i] != 0.0:
            e += hz[i] * spins[r, i]
    return e


@numba.njit(**_JIT)
def local_matrix(a, ch, sh, spins, tanh, mant, inv, zz_i, zz_j, zz_c, hz,
                 x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par):
    """inv @ (row-scaled H Psi) for one collective configuration."""
    K = mant.shape[0]
    hm = np.zeros((K, K), dtype=np.complex128)
    for r in range(K):
        ed = diag_energy(spins, r, zz_i, zz_j, zz_c, hz)
        for c in range(K):
            acc = ed + 0j
            for t in range(x_sites.shape[0]):
                acc += x_amp[t] * flip_ratio(a, ch, sh, spins, tanh, r, c, x_sites[t], -1)
            for t in range(pair_i.shape[0]):
                i = pair_i[t]
                j = pair_j[t]
                if spins[r, i] != spins[r, j]:
                    amp = amp_anti[t]
                else:
                    amp = amp_par[t]
                if amp != 0.0:
                    acc += amp * flip_ratio(a, ch, sh, spins, tanh, r, c, i, j)
            hm[r, c] = mant[r, c] * acc
    return inv @ hm


@numba.njit(**_JIT)
def ensemble_derivs(spins, tanh, mant, inv, out):
    """d log det / dW, network-major, each block in (a, b, w) order."""
    K, n = spins.shape
    m = tanh.shape[2]
    L1 = n + m + n * m
    for k in range(K):
        base = k * L1
        for p in range(L1):
            out[base + p] = 0.0
        for r in range(K):
            g = inv[k, r] * mant[r, k]
            for i in range(n):
                out[base + i] += g * spins[r, i]
            for h in range(m):
                gt = g * tanh[r, k, h]
                out[base + n + h] += gt
                for i in range(n):
                    out[base + n + m + i * m + h] += gt * spins[r, i]


@numba.njit(**_JIT)
def init_state(a, b, w, spins):
    K, n, m = w.shape
    theta = np.zeros((K, K, m), dtype=np.complex128)
    tanh = np.zeros((K, K, m), dtype=np.complex128)
    logpsi = np.zeros((K, K), dtype=np.complex128)
    off = np.zeros(K)
    mant = np.zeros((K, K), dtype=np.complex128)
    for r in range(K):
        init_replica(a, b, w, spins, r, theta, tanh, logpsi)
    inv, ok = rebuild_matrix(logpsi, off, mant)
    return theta, tanh, logpsi, off, mant, inv, ok


@numba.njit(**_JIT)
def run_chain(a, b, w, ch, sh, spins,
              zz_i, zz_j, zz_c, hz, x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par,
              prop_rep, prop_i, prop_j, unif,
              n_therm, n_samples, stride, record_derivs, inv_refresh, cache_refresh):
    """Metropolis chain with rank-1 inverse updates.

    Proposal t flips site prop_i[t] (and prop_j[t] when >= 0) of replica
    prop_rep[t].  After ``n_therm`` proposals a sample is recorded every
    ``stride`` proposals.  Returns (e_loc, derivs, configs, log_abs_det,
    n_accepted, n_rebuilds, ok).
    """
    K, n, m = w.shape
    L1 = n + m + n * m
    e_loc = np.zeros((n_samples, K, K), dtype=np.complex128)
    derivs = np.zeros((n_samples if record_derivs else 0, K * L1), dtype=np.complex128)
    configs = np.zeros((n_samples, K, n), dtype=np.int8)
    logdet = np.zeros(n_samples)
    theta, tanh, logpsi, off, mant, inv, ok = init_state(a, b, w, spins)
    if not ok:
        return e_loc, derivs, configs, logdet, 0, 0, False
    nr = np.zeros(K, dtype=np.complex128)
    rho = np.zeros(K, dtype=np.complex128)
    accepted = 0
    since_inv = 0
    since_cache = 0
    rebuilds = 0
    total = n_therm + n_samples * stride
    sample = 0
    for t in range(total):
        k = prop_rep[t]
        i = prop_i[t]
        j = prop_j[t]
        R = 0j
        for c in range(K):
            rho[c] = flip_ratio(a, ch, sh, spins, tanh, k, c, i, j)
            nr[c] = mant[k, c] * rho[c]
            R += nr[c] * inv[c, k]
        p = R.real * R.real + R.imag * R.imag
        if p >= 1.0 or unif[t] < p:
            accepted += 1
            apply_flip(w, ch, sh, spins, theta, tanh, k, i)
            if j >= 0:
                apply_flip(w, ch, sh, spins, theta, tanh, k, j)
            for c in range(K):
                logpsi[k, c] += np.log(rho[c])
            since_inv += 1
            since_cache += 1
            if since_cache >= cache_refresh:
                for r in range(K):
                    init_replica(a, b, w, spins, r, theta, tanh, logpsi)
                since_cache = 0
                since_inv = inv_refresh
            if np.abs(R) < 1e-12 or since_inv >= inv_refresh:
                inv, ok = rebuild_matrix(logpsi, off, mant)
                rebuilds += 1
                since_inv = 0
                if not ok:
                    return e_loc, derivs, configs, logdet, accepted, rebuilds, False
            else:
                # Sherman-Morrison row replacement, then re-scale row k
                q = np.zeros(K, dtype=np.complex128)
                for c2 in range(K):
                    acc = 0j
                    for c in range(K):
                        acc += (nr[c] - mant[k, c]) * inv[c, c2]
                    q[c2] = acc
                col = inv[:, k].copy()
                for c in range(K):
                    for c2 in range(K):
                        inv[c, c2] -= col[c] * q[c2] / R
                o = logpsi[k, 0].real
                for c in range(1, K):
                    if logpsi[k, c].real > o:
                        o = logpsi[k, c].real
                f = np.exp(off[k] - o)
                for c in range(K):
                    mant[k, c] = nr[c] * f
                    inv[c, k] /= f
                off[k] = o
        if t >= n_therm and (t - n_therm + 1) % stride == 0:
            e_loc[sample] = local_matrix(a, ch, sh, spins, tanh, mant, inv, zz_i, zz_j, zz_c, hz,
                                         x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par)
            if record_derivs:
                ensemble_derivs(spins, tanh, mant, inv, derivs[sample])
            configs[sample] = spins
            ld = 0.0
            for r in range(K):
                ld += off[r]
            logdet[sample] = ld + np.log(np.abs(np.linalg.det(mant)))
            sample += 1
    return e_loc, derivs, configs, logdet, accepted, rebuilds, True


@numba.njit(**_JIT)
def local_matrix_batch(a, b, w, ch, sh, configs, zz_i, zz_j, zz_c, hz,
                       x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par):
    """Local operator matrices for stored collective configurations."""
    P, K, n = configs.shape
    out = np.zeros((P, K, K), dtype=np.complex128)
    okmask = np.zeros(P, dtype=np.bool_)
    for p in range(P):
        spins = configs[p].copy()
        theta, tanh, logpsi, off, mant, inv, ok = init_state(a, b, w, spins)
        okmask[p] = ok
        if ok:
            out[p] = local_matrix(a, ch, sh, spins, tanh, mant, inv, zz_i, zz_j, zz_c, hz,
                                  x_sites, x_amp, pair_i, pair_j, amp_anti, amp_par)
    return out, okmask


@numba.njit(**_JIT)
def slater_batch(a, b, w, ch, sh, configs, pair_i, pair_j, want_single):
    """Per-sample mantissa, inverse and flip ratios for observable assembly.

    single[p, r, c, i]: ratio for flipping site i of replica r in network c.
    paired[p, r, c, t]: ratio for flipping pair t.
    """
    P, K, n = configs.shape
    npair = pair_i.shape[0]
    mants = np.zeros((P, K, K), dtype=np.complex128)
    invs = np.zeros((P, K, K), dtype=np.complex128)
    single = np.zeros((P, K, K, n if want_single else 0), dtype=np.complex128)
    paired = np.zeros((P, K, K, npair), dtype=np.complex128)
    okmask = np.zeros(P, dtype=np.bool_)
    for p in range(P):
        spins = configs[p].copy()
        theta, tanh, logpsi, off, mant, inv, ok = init_state(a, b, w, spins)
        okmask[p] = ok
        mants[p] = mant
        invs[p] = inv
        for r in range(K):
            for c in range(K):
                if want_single:
                    for i in range(n):
                        single[p, r, c, i] = flip_ratio(a, ch, sh, spins, tanh, r, c, i, -1)
                for t in range(npair):
                    paired[p, r, c, t] = flip_ratio(a, ch, sh, spins, tanh, r, c, pair_i[t], pair_j[t])
    return mants, invs, single, paired, okmask
