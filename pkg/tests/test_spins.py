import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import kron_hamiltonian
from nqes import ed
from nqes.spins import (ConstraintError, DimensionError, Hamiltonian, SpinConfig, build_afh,
                        build_haldane_shastry, build_longrange_ising, build_model, build_tfim,
                        build_xxz, chord_distance, connections, diag_energy, hs_exact_energy,
                        load_couplings, nn_bond_energy)


def _ring(n, coupling=1.0):
    cz = np.zeros((n, n))
    for i in range(n):
        j = (i + 1) % n
        cz[i, j] = cz[j, i] = coupling
    z = np.zeros((n, n))
    return Hamiltonian(n, z, z, cz, np.zeros(n), np.zeros(n), nn_zz=coupling)


def _random_hamiltonian(rng, n, integer=False):
    def sym():
        a = rng.integers(-3, 4, (n, n)).astype(float) if integer else rng.normal(size=(n, n))
        a = np.triu(a, 1)
        return a + a.T
    h = (lambda: rng.integers(-3, 4, n).astype(float)) if integer else (lambda: rng.normal(size=n))
    return Hamiltonian(n, sym(), sym(), sym(), h(), h())


class TestSpinConfig:
    def test_string_round_trip_and_spin_values(self):
        c = SpinConfig.from_string("01100")
        assert str(c) == "01100"
        assert list(c.spins) == [1, -1, -1, 1, 1]
        assert c.spin(1) == -1

    def test_high_bits_rejected(self):
        with pytest.raises(ValueError):
            SpinConfig(1 << 5, 5)

    def test_words_for_wide_configs(self):
        c = SpinConfig.all_up(130).flip(0, 64, 129)
        w = c.words
        assert len(w) == 3
        assert w[0] == 1 and w[1] == 1 and w[2] == 2

    def test_flip_is_involution(self):
        c = SpinConfig.from_string("1010")
        assert c.flip(2).flip(2) == c

    def test_size_limits(self):
        with pytest.raises(ValueError):
            SpinConfig(0, 0)
        with pytest.raises(ValueError):
            SpinConfig(0, 513)


class TestDiagEnergy:
    def test_popcount_example(self):
        assert diag_energy(SpinConfig.from_string("01100"), _ring(5)) == 1

    def test_all_up(self):
        assert diag_energy(SpinConfig.all_up(5), _ring(5)) == 5

    def test_rotate_not_shift(self):
        # top bit set: a plain shift would drop it and miscount the wrap bond
        c = SpinConfig.from_string("00001")
        assert nn_bond_energy(c) == 5 - 4

    def test_matches_naive_pair_sum(self, rng):
        for _ in range(50):
            H = _random_hamiltonian(rng, 10)
            c = SpinConfig.from_spins(rng.choice([-1, 1], 10))
            s = c.spins
            naive = sum(H.cz[i, j] * s[i] * s[j] for i in range(10) for j in range(i + 1, 10))
            naive += sum(H.hz * s)
            assert diag_energy(c, H) == pytest.approx(naive, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(3, 40), bits=st.integers(0, 2 ** 40 - 1), J=st.integers(-3, 3))
    def test_bitwise_path_exact_for_integer_couplings(self, n, bits, J):
        c = SpinConfig(bits & ((1 << n) - 1), n)
        s = c.spins.astype(int)
        naive = J * sum(int(s[i]) * int(s[(i + 1) % n]) for i in range(n))
        assert diag_energy(c, _ring(n, float(J))) == naive

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            diag_energy(SpinConfig.all_up(4), _ring(5))


class TestConnections:
    def _xy(self):
        one = np.array([[0, 1.0], [1.0, 0]])
        return Hamiltonian(2, one, one, np.zeros((2, 2)), np.zeros(2), np.zeros(2))

    def test_aligned_pair_decouples(self):
        assert list(connections(SpinConfig.from_string("00"), self._xy())) == []

    def test_antialigned_pair(self):
        conns = list(connections(SpinConfig.from_string("01"), self._xy()))
        assert len(conns) == 1
        assert str(conns[0].target) == "10"
        assert conns[0].amplitude == 2

    @pytest.mark.parametrize("builder", [
        lambda: build_haldane_shastry(6), lambda: build_tfim(6, 0.7), lambda: build_xxz(6),
        lambda: build_afh(4), lambda: build_tfim(2, 1.0, periodic=False),
    ])
    def test_rows_match_kronecker_matrix(self, builder):
        H = builder()
        M = kron_hamiltonian(H)
        assert np.abs(M.imag).max() < 1e-12
        for b in range(2 ** H.n):
            c = SpinConfig(b, H.n)
            row = np.zeros(2 ** H.n)
            row[b] = diag_energy(c, H)
            for conn in connections(c, H):
                assert conn.amplitude != 0
                row[conn.target.bits] += conn.amplitude
            np.testing.assert_allclose(row, M[:, b].real, atol=1e-12)

    def test_random_hamiltonians_match_kronecker(self, rng):
        for n in (2, 3, 5):
            H = _random_hamiltonian(rng, n)
            np.testing.assert_allclose(ed.dense_matrix(H), kron_hamiltonian(H).real, atol=1e-12)


class TestBuilders:
    def test_tfim_two_sites_periodic(self):
        w = ed.dense_spectrum(build_tfim(2, 0.0)).energies
        np.testing.assert_allclose(w, [-1, -1, 1, 1], atol=1e-12)

    def test_tfim_two_sites_open(self):
        w = ed.dense_spectrum(build_tfim(2, 1.0, periodic=False)).energies
        r5 = math.sqrt(5)
        np.testing.assert_allclose(w, [-r5, -1, 1, r5], atol=1e-12)

    def test_tfim_three_site_readback(self):
        H = build_tfim(3, 0.0)
        assert H.cz[0, 1] == H.cz[1, 2] == H.cz[0, 2] == -1
        assert not H.hx.any()

    def test_xxz_readback_and_afh_isospectral(self):
        H = build_xxz(4)
        assert H.cx[0, 1] == -1 and H.cz[0, 1] == 1
        a = ed.dense_spectrum(build_afh(4)).energies
        b = ed.dense_spectrum(build_xxz(4)).energies
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_afh_is_not_stoquastic(self):
        M = ed.dense_matrix(build_afh(6))
        off = M - np.diag(np.diag(M))
        assert off.max() > 0

    def test_odd_n_rejected(self):
        with pytest.raises(ConstraintError):
            build_xxz(5)
        with pytest.raises(ConstraintError):
            build_afh(3)

    def test_haldane_shastry_coefficients(self):
        H = build_haldane_shastry(4)
        assert H.cx[0, 1] == pytest.approx(math.pi ** 2 / (16 * math.sin(math.pi / 4) ** 2))
        assert H.cz[0, 2] == pytest.approx(math.pi ** 2 / 16)
        assert H.cy[0, 1] == H.cy[0, 3]

    def test_chord_distance_symmetry(self):
        n = 9
        for i in range(n):
            for j in range(n):
                assert chord_distance(n, i, j) == pytest.approx(chord_distance(n, j, i))
                assert chord_distance(n, i, j) == pytest.approx(chord_distance(n, (i + 1) % n, (j + 1) % n))

    def test_hs_closed_form_values(self):
        assert hs_exact_energy(20, 10) == pytest.approx(-33.3099, abs=1e-4)
        assert hs_exact_energy(20, 9) == pytest.approx(-32.3230, abs=1e-4)
        with pytest.raises(ConstraintError):
            hs_exact_energy(20, 11)

    def test_hs_closed_form_matches_dense_ed(self):
        w = ed.dense_spectrum(build_haldane_shastry(6), 1).energies
        assert w[0] == pytest.approx(hs_exact_energy(6, 3), abs=1e-10)

    def test_hs_ground_below_first_excited(self):
        for n in range(4, 513, 2):
            assert hs_exact_energy(n, n // 2) < hs_exact_energy(n, n // 2 - 1)

    def test_longrange_ising_diagonal(self):
        H = build_longrange_ising(np.array([[0, 1.0], [1.0, 0]]), 0.0)
        d = [diag_energy(SpinConfig(b, 2), H) for b in range(4)]
        assert d == [2, -2, -2, 2]

    def test_longrange_ising_field_connections(self, rng):
        J = rng.normal(size=(5, 5))
        J = np.triu(J, 1) + np.triu(J, 1).T
        H = build_longrange_ising(J, 1.3)
        assert len(list(connections(SpinConfig.all_up(5), H))) == 5
        assert np.all(H.hx == -1.3)

    def test_longrange_ising_rejects_asymmetric(self):
        with pytest.raises(ConstraintError):
            build_longrange_ising(np.array([[0, 1.0], [2.0, 0]]), 0.0)

    def test_build_model_by_name(self, tmp_path):
        assert build_model({"name": "tfim", "n": 4, "h": 0.5}).hx[0] == 0.5
        J = np.array([[0, 0.5], [0.5, 0]])
        path = tmp_path / "J.csv"
        path.write_text("0,0.5\n0.5,0\n")
        H = build_model({"name": "longrange_ising", "J_path": "J.csv", "h": 1.0}, tmp_path)
        np.testing.assert_array_equal(H.cz, 2 * J)
        np.testing.assert_array_equal(load_couplings(path), J)
        with pytest.raises(ConstraintError):
            build_model({"name": "nope", "n": 4})

    def test_hamiltonian_validation(self):
        bad = np.array([[0, 1.0], [0.5, 0]])
        z = np.zeros((2, 2))
        with pytest.raises(ConstraintError):
            Hamiltonian(2, bad, z, z, np.zeros(2), np.zeros(2))
        with pytest.raises(DimensionError):
            Hamiltonian(2, z, z, z, np.zeros(3), np.zeros(2))
