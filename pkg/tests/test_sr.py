import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import all_configs, exhaustive_ensemble, kron_hamiltonian
from nqes import ed, orchestrator, rbm, sr
from nqes.rbm import Rbm, RbmParams
from nqes.sampler import SampleBatch, SamplerConfig, run_chains
from nqes.spins import build_tfim


def _batch(D, e_loc=None):
    P = len(D)
    if e_loc is None:
        e_loc = np.zeros((P, 1, 1), dtype=complex)
    return SampleBatch(e_loc, D, {}, 0.5, 0, np.zeros(P, dtype=int))


def _random_batch(rng, P, L, K=1):
    D = rng.normal(size=(P, L)) + 1j * rng.normal(size=(P, L))
    e = rng.normal(size=(P, K, K)) + 1j * rng.normal(size=(P, K, K))
    return _batch(D, e)


def test_config_validation():
    with pytest.raises(ValueError):
        sr.SrConfig(diag_shift=0)
    with pytest.raises(ValueError):
        sr.SrConfig(krylov_tol=-1)
    assert sr.SrConfig(learning_rate=0.1, decay=0.5).rate(2) == pytest.approx(0.025)


def test_forces_vanish_for_constant_energy(rng):
    b = _random_batch(rng, 40, 10)
    b.e_loc[:] = 3.0 + 1j
    assert np.abs(sr.forces(b)).max() < 1e-12


def test_forces_linear_in_energy(rng):
    b = _random_batch(rng, 40, 10, K=2)
    f = sr.forces(b)
    b2 = _batch(b.derivs, 2 * b.e_loc)
    np.testing.assert_allclose(sr.forces(b2), 2 * f, atol=1e-12)


def test_forces_need_two_samples(rng):
    with pytest.raises(sr.StatisticsError):
        sr.forces(_random_batch(rng, 1, 3))


def test_cov_matvec_zero_vector(rng):
    b = _random_batch(rng, 20, 8)
    assert not sr.cov_matvec(b, np.zeros(8, dtype=complex), 1e-3).any()


def test_cov_matvec_matches_dense(rng):
    b = _random_batch(rng, 50, 30)
    C = sr.dense_covariance(b)
    for _ in range(5):
        v = rng.normal(size=30) + 1j * rng.normal(size=30)
        assert np.abs(sr.cov_matvec(b, v, 0.01) - (C + 0.01 * np.eye(30)) @ v).max() < 1e-12


def test_weighted_matvec_matches_dense(rng):
    b = _random_batch(rng, 30, 12)
    w = rng.random(30)
    p = w / w.sum()
    m = p @ b.derivs
    C = b.derivs.conj().T @ (p[:, None] * b.derivs) - np.outer(m.conj(), m)
    v = rng.normal(size=12) + 1j * rng.normal(size=12)
    np.testing.assert_allclose(sr.cov_matvec(b, v, 0.1, weights=w), (C + 0.1 * np.eye(12)) @ v, atol=1e-12)


def test_identical_derivatives_leave_only_shift(rng):
    row = rng.normal(size=6) + 1j * rng.normal(size=6)
    b = _batch(np.tile(row, (25, 1)))
    v = rng.normal(size=6) + 0j
    np.testing.assert_allclose(sr.cov_matvec(b, v, 0.3), 0.3 * v, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), P=st.integers(2, 60), L=st.integers(1, 200))
def test_hermitian_positive_and_dense_agreement(seed, P, L):
    r = np.random.default_rng(seed)
    b = _random_batch(r, P, L)
    lam = 1e-3
    u = r.normal(size=L) + 1j * r.normal(size=L)
    v = r.normal(size=L) + 1j * r.normal(size=L)
    Cu, Cv = sr.cov_matvec(b, u, lam), sr.cov_matvec(b, v, lam)
    scale = np.linalg.norm(u) * np.linalg.norm(v) * (1 + np.abs(b.derivs).max() ** 2)
    assert abs(np.vdot(u, Cv) - np.vdot(Cu, v)) < 1e-10 * scale
    assert np.vdot(v, Cv).real >= lam * np.vdot(v, v).real - 1e-10 * scale
    dense = (sr.dense_covariance(b) + lam * np.eye(L)) @ v
    assert np.abs(Cv - dense).max() < 1e-10 * (1 + np.abs(dense).max())


def test_cov_matvec_memory_is_linear():
    L, P = 100_000, 16
    r = np.random.default_rng(0)
    b = _batch(r.normal(size=(P, L)) + 1j * r.normal(size=(P, L)))
    v = r.normal(size=L) + 1j * r.normal(size=L)
    mean_d = b.derivs.mean(axis=0)
    tracemalloc.start()
    sr.cov_matvec(b, v, 1e-3, mean_d)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    vector_bytes = 16 * L
    # a handful of length-L temporaries; an L x L buffer would be 1e5 times larger
    assert peak < 12 * vector_bytes
    assert peak < P * vector_bytes


def _exact_energy(params_list, H):
    nets = [Rbm(p) for p in params_list]
    w, e_loc, _, _ = exhaustive_ensemble(nets, H)
    return np.einsum("s,sii->", w, e_loc).real


@pytest.mark.parametrize("K", [1, 2])
def test_forces_match_exact_gradient(rng, K):
    n, m = 3, 2
    H = build_tfim(n, 0.7)
    params = [rbm.init_params(n, m, rng) for _ in range(K)]
    params = [RbmParams(p.a * 5, p.b * 5, p.w * 5) for p in params]
    w, e_loc, derivs, _ = exhaustive_ensemble([Rbm(p) for p in params], H, with_derivs=True)
    F = sr.forces(_batch(derivs, e_loc), weights=w)
    L = params[0].n_params
    eps = 1e-5
    for k in range(K):
        vec = params[k].flatten()
        for l in range(L):
            for direction, part in ((1.0, F[k * L + l].real), (1j, F[k * L + l].imag)):
                def energy(step):
                    v = vec.copy()
                    v[l] += step * direction
                    ps = list(params)
                    ps[k] = RbmParams.from_vector(n, m, v)
                    return _exact_energy(ps, H)
                fd = (energy(eps) - energy(-eps)) / (2 * eps)
                assert fd == pytest.approx(2 * part, abs=1e-6)


def test_exact_batch_covariance_is_fubini_study(rng):
    n, m = 3, 2
    p = rbm.init_params(n, m, rng)
    p = RbmParams(p.a * 5, p.b * 5, p.w * 5)
    H = build_tfim(n, 0.7)
    w, e_loc, derivs, _ = exhaustive_ensemble([Rbm(p)], H, with_derivs=True)
    b = _batch(derivs, e_loc)
    psi = np.array([np.exp(rbm.log_psi(p, c)) for c in all_configs(n)])
    psi /= np.linalg.norm(psi)
    J = derivs * psi[:, None]                     # d psi / dW for normalized weights
    S = J.conj().T @ J - np.outer(J.conj().T @ psi, psi.conj() @ J)
    v = rng.normal(size=p.n_params) + 0j
    np.testing.assert_allclose(sr.cov_matvec(b, v, 0.0, weights=w), S @ v, atol=1e-10)


def test_zero_force_leaves_parameters(rng):
    b = _random_batch(rng, 30, 10)
    b.e_loc[:] = 1.0
    params = rng.normal(size=10) + 0j
    new, info = sr.sr_step(params, b, sr.SrConfig(), 0)
    np.testing.assert_allclose(new, params, atol=1e-14)
    assert not info.skipped


def test_step_solves_shifted_system(rng):
    b = _random_batch(rng, 60, 20)
    cfg = sr.SrConfig(learning_rate=0.1, krylov_tol=1e-12, krylov_max_iter=500)
    params = np.zeros(20, dtype=complex)
    new, info = sr.sr_step(params, b, cfg, 0)
    C = sr.dense_covariance(b) + cfg.diag_shift * np.eye(20)
    np.testing.assert_allclose(new, -0.1 * np.linalg.solve(C, sr.forces(b)), atol=1e-8)
    assert info.converged


def test_update_norm_clipping(rng):
    b = _random_batch(rng, 60, 20)
    cfg = sr.SrConfig(learning_rate=1.0, max_update_norm=0.5)
    new, info = sr.sr_step(np.zeros(20, dtype=complex), b, cfg, 0)
    assert np.linalg.norm(new) == pytest.approx(0.5)
    assert info.update_norm > 0.5


def test_abort_doubles_shift_then_skips(rng, monkeypatch):
    b = _random_batch(rng, 30, 10)
    shifts = []

    def broken(batch, cfg, lam):
        shifts.append(lam)
        raise sr.SolverAbort("non-finite")
    monkeypatch.setattr(sr, "natural_gradient", broken)
    params = rng.normal(size=10) + 0j
    new, info = sr.sr_step(params, b, sr.SrConfig(diag_shift=1e-3, max_retries=2), 0)
    assert shifts == [1e-3, 2e-3, 4e-3]
    assert info.skipped
    np.testing.assert_array_equal(new, params)


def _train(n, h, K, iters, seed, sweeps, lr=0.02, density=2, chains=4):
    m = density * n
    params = orchestrator.initial_networks(n, m, K, seed)
    H = build_tfim(n, h)
    scfg = SamplerConfig(n_chains=chains, n_therm_sweeps=50, n_sample_sweeps=sweeps, sample_stride=2, seed=seed)
    cfg = sr.SrConfig(learning_rate=lr)
    vec = orchestrator.flat_params(params)
    trace, spins = [], None
    for p in range(iters):
        nets = [Rbm(q) for q in orchestrator.unflatten(vec, n, m, K)]
        batch = run_chains(nets, H, None, scfg, epoch=p, start=spins)
        spins = batch.final_spins
        trace.append(batch.energies.real.mean())
        vec, _ = sr.sr_step(vec, batch, cfg, p)
    nets = [Rbm(q) for q in orchestrator.unflatten(vec, n, m, K)]
    final = run_chains(nets, H, None, SamplerConfig(n_chains=chains, n_therm_sweeps=50, n_sample_sweeps=4000,
                                                    seed=seed + 1), start=spins)
    return np.array(trace), final


@pytest.mark.slow
def test_single_state_tfim_converges():
    n = 8
    trace, final = _train(n, 1.0, 1, 500, 3, 400)
    exact = ed.dense_spectrum(build_tfim(n, 1.0), 1).energies[0]
    E = final.energies.real
    assert abs(E.mean() - exact) / abs(exact) < 1e-3


@pytest.mark.slow
def test_two_state_tfim_trace_converges():
    n = 8
    trace, final = _train(n, 1.0, 2, 600, 5, 400, density=4, chains=8)
    exact = ed.dense_spectrum(build_tfim(n, 1.0), 2).energies.sum()
    E = final.energies.real
    assert trace[-20:].mean() < trace[:5].mean()
    assert abs(E.mean() - exact) / abs(exact) < 1e-3
