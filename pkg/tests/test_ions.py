import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nqes import ed, ions
from nqes.spins import build_longrange_ising


@pytest.fixture(scope="module")
def crystal20():
    trap = ions.TrapParams.experiment(20)
    crystal = ions.solve_equilibrium(trap)
    return trap, crystal, ions.transverse_modes(crystal, trap)


def test_trap_validation():
    with pytest.raises(ValueError):
        ions.TrapParams(2.0, 1.0, 0.5, 4)
    with pytest.raises(ValueError):
        ions.TrapParams(0.69, 2.14, 0.167, 0)


def test_single_ion():
    trap = ions.TrapParams.experiment(1)
    c = ions.solve_equilibrium(trap)
    np.testing.assert_array_equal(c.positions, np.zeros((1, 2)))
    m = ions.transverse_modes(c, trap)
    assert m.freqs[0] == pytest.approx(trap.beta_y)
    np.testing.assert_allclose(m.vectors, [[1.0]])


def test_two_ions_on_weak_axis():
    trap = ions.TrapParams.experiment(2)
    c = ions.solve_equilibrium(trap)
    u = 0.25 ** (1 / 3)
    np.testing.assert_allclose(c.positions[:, 1], [-u, u], atol=1e-9)
    np.testing.assert_allclose(c.positions[:, 0], 0, atol=1e-9)
    assert u == pytest.approx(0.629961, abs=1e-6)


def test_two_ion_modes():
    trap = ions.TrapParams.experiment(2)
    m = ions.transverse_modes(ions.solve_equilibrium(trap), trap)
    np.testing.assert_allclose(m.freqs, [trap.beta_y, math.sqrt(trap.beta_y ** 2 - 1)], atol=1e-8)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(np.abs(m.vectors), r, atol=1e-8)
    assert m.vectors[0, 0] * m.vectors[1, 0] > 0
    assert m.vectors[0, 1] * m.vectors[1, 1] < 0


def test_gradient_matches_finite_differences(rng):
    beta = 4.13
    x = rng.normal(size=10) * 2
    g = ions.gradient(x, beta)
    for l in range(10):
        e = np.zeros(10)
        e[l] = 1e-6
        fd = (ions.potential(x + e, beta) - ions.potential(x - e, beta)) / 2e-6
        assert g[l] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_crystal_invariants(crystal20):
    trap, c, m = crystal20
    assert c.gradient_norm < 1e-8
    assert np.all(np.diff(c.positions[:, 1]) >= 0)
    d = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=-1)
    assert d[np.triu_indices(20, 1)].min() > 1e-3
    assert np.linalg.eigvalsh(ions.hessian(c.positions.ravel(), trap.beta_x)).min() > -1e-8
    # wider along the weak z axis than along x
    assert np.ptp(c.positions[:, 1]) > np.ptp(c.positions[:, 0])


def test_mode_invariants(crystal20):
    trap, _, m = crystal20
    np.testing.assert_allclose(m.vectors.T @ m.vectors, np.eye(20), atol=1e-10)
    assert np.all(np.diff(m.freqs) <= 0)
    assert m.freqs[0] == pytest.approx(trap.beta_y, abs=1e-8)
    assert np.all(m.vectors[:, 0] > 0)
    np.testing.assert_allclose(m.vectors[:, 1:].sum(axis=0), 0, atol=1e-10)


def test_unstable_trap_raises():
    trap = ions.TrapParams(0.69, 0.7, 0.167, 20)
    with pytest.raises(ions.InstabilityError):
        ions.transverse_modes(ions.solve_equilibrium(trap, restarts=2), trap)


def test_two_ion_com_coupling_sign():
    trap = ions.TrapParams.experiment(2)
    m = ions.transverse_modes(ions.solve_equilibrium(trap), trap)
    assert ions.single_mode_couplings(m, 1, detuning=-1.0).J[0, 1] < 0
    assert ions.single_mode_couplings(m, 1, detuning=1.0).J[0, 1] > 0
    with pytest.raises(ions.ResonanceError):
        ions.single_mode_couplings(m, 1, detuning=0.0)
    with pytest.raises(ValueError):
        ions.single_mode_couplings(m, 3)


def test_single_mode_sign_rule(crystal20):
    _, _, m = crystal20
    for k in (1, 4, 7):
        cm = ions.single_mode_couplings(m, k)
        J, b = cm.J, m.vectors[:, k - 1]
        assert cm.metadata["detuning_khz"] < 0
        off = ~np.eye(20, dtype=bool)
        np.testing.assert_array_equal(np.sign(J[off]), -np.sign(np.outer(b, b)[off]))
        np.testing.assert_array_equal(J, J.T)
        assert not np.diag(J).any()


def test_single_mode_magnitude(crystal20):
    _, _, m = crystal20
    cm = ions.single_mode_couplings(m, 2, omega_eff=10.0, detuning=-2.0)
    eta = 0.11 * math.sqrt(m.freqs[0] / m.freqs[1])
    b = m.vectors[:, 1]
    assert cm.J[0, 5] == pytest.approx(100 * eta ** 2 * b[0] * b[5] / (16 * -2.0))


def test_kac_normalization(crystal20):
    _, _, m = crystal20
    J = ions.single_mode_couplings(m, 7, kac_target=3.5).J
    assert np.abs(J).sum() / 20 == pytest.approx(3.5)


def test_ground_pattern_is_classical_minimum():
    n = 10
    trap = ions.TrapParams.experiment(n)
    m = ions.transverse_modes(ions.solve_equilibrium(trap, restarts=3), trap)
    for k in (1, 3, 7):
        H = build_longrange_ising(ions.single_mode_couplings(m, k, kac_target=1.0).J, 0.0)
        x = np.arange(2 ** n)
        energies = ed.diagonal(H)
        pattern = ions.ground_pattern(m, k)
        bits = sum(1 << i for i in range(n) if pattern[i] < 0)
        flipped = bits ^ (2 ** n - 1)
        assert energies[bits] == pytest.approx(energies.min(), abs=1e-10)
        assert energies[flipped] == pytest.approx(energies[bits], abs=1e-12)
        assert x[np.argmin(energies)] in (bits, flipped)


@pytest.mark.slow
def test_zero_field_ground_correlations_n20(crystal20):
    _, _, m = crystal20
    J = ions.single_mode_couplings(m, 7, kac_target=1.0).J
    v = ed.lanczos_spectrum(build_longrange_ising(J, 0.0), 2).vectors
    # symmetric combination of the Z2 pair is basis invariant for zz
    C = 0.5 * (ed.correlation_matrix(v[:, 0]) + ed.correlation_matrix(v[:, 1]))
    off = ~np.eye(20, dtype=bool)
    np.testing.assert_allclose(C[off], -np.sign(J[off]), atol=1e-8)


def test_power_law_couplings(crystal20):
    _, c, _ = crystal20
    cm = ions.power_law_couplings(c, 1.0)
    J = cm.J
    off = ~np.eye(20, dtype=bool)
    assert J[off].max() == 1.0
    d = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=-1)
    i, j, k, l = 0, 1, 0, 5
    assert J[i, j] / J[k, l] == pytest.approx(d[k, l] / d[i, j])
    assert np.all(J[off] > 0)
    with pytest.raises(ValueError):
        ions.power_law_couplings(c, 0.0)


def test_power_law_distance_ratio():
    c = ions.CrystalSolution(np.array([[0, 0.0], [0, 1.0], [0, 3.0]]), 0.0, 0.0)
    J = ions.power_law_couplings(c, 1.0).J
    assert J[0, 1] == 1.0
    assert J[1, 2] == pytest.approx(0.5)


def test_all_mode_two_ions():
    trap = ions.TrapParams.experiment(2)
    m = ions.transverse_modes(ions.solve_equilibrium(trap), trap)
    wz = 167.0
    mu = 1.05 * m.freqs[0] * wz
    eta = 0.11 * np.sqrt(m.freqs[0] / m.freqs)
    b = m.vectors
    ref = 100 / 16 * sum(eta[k] ** 2 * b[0, k] * b[1, k] / (mu - m.freqs[k] * wz) for k in range(2))
    assert ions.all_mode_couplings(m, mu, omega_z_khz=wz).J[0, 1] == pytest.approx(ref)
    with pytest.raises(ions.ResonanceError, match="mode 2"):
        ions.all_mode_couplings(m, m.freqs[1] * wz, omega_z_khz=wz)


def test_all_mode_far_detuned_resembles_power_law(crystal20):
    _, c, m = crystal20
    wz = ions.EXPERIMENT_TRAP_MHZ[2] * 1e3
    J = ions.all_mode_couplings(m, 1.2 * m.freqs[0] * wz).J
    P = ions.power_law_couplings(c, 1.0).J
    iu = np.triu_indices(20, 1)
    agree = np.mean(np.sign(J[iu]) == np.sign(P[iu]))
    assert agree >= 0.95


def test_all_mode_single_mode_limit(crystal20):
    _, _, m = crystal20
    wz = ions.EXPERIMENT_TRAP_MHZ[2] * 1e3
    k = 7
    eps = 1e-6
    J = ions.all_mode_couplings(m, m.freqs[k - 1] * wz + eps).J
    S = ions.single_mode_couplings(m, k, detuning=eps).J
    np.testing.assert_allclose(J, S, rtol=1e-2, atol=1e-2 * np.abs(S).max())


@settings(max_examples=10, deadline=None)
@given(n=st.integers(2, 12), alpha=st.floats(0.3, 3.0))
def test_generators_symmetric_zero_diagonal(n, alpha):
    trap = ions.TrapParams.experiment(n)
    c = ions.solve_equilibrium(trap, restarts=1)
    m = ions.transverse_modes(c, trap)
    wz = ions.EXPERIMENT_TRAP_MHZ[2] * 1e3
    for cm in (ions.power_law_couplings(c, alpha), ions.single_mode_couplings(m, n),
               ions.all_mode_couplings(m, 1.1 * m.freqs[0] * wz)):
        np.testing.assert_array_equal(cm.J, cm.J.T)
        assert not np.diag(cm.J).any()


def test_crystal_report_round_trips_to_model(crystal20):
    import json
    from nqes.spins import build_model
    trap, c, m = crystal20
    rep = ions.crystal_report(trap, c, m, ions.single_mode_couplings(m, 7, kac_target=1.0))
    data = json.loads(json.dumps(rep))
    H = build_model({"name": "longrange_ising", "J": data["J"], "h": 0.0})
    assert H.n == 20
