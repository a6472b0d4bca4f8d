import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xxzloc.lattice import PreconditionError, Region, Sector, cluster_count, deform_region
from xxzloc.operators import (DisorderRealization, ModelParams, OperatorMatrix, ParamError, P_minus, P_plus,
                              Q_le_k, Q_m, Qhat_le_k, W, bond_operator, build_decoupled, build_hamiltonian,
                              build_projector_family, chi_N, compress, crossing_bonds, diagonalize, dump_blocks,
                              energy_interval, load_blocks)
from xxzloc.oracle import NUMBER, SIGMA_MINUS, SIGMA_PLUS, full_hamiltonian, full_number, local_op


def rand_omega(lam, seed):
    return np.random.default_rng(seed).random(len(lam))


def omega_dict(lam, arr):
    return dict(zip(lam.sites, arr))


class TestParams:
    def test_delta_must_exceed_one(self):
        with pytest.raises(ParamError, match="delta > 1"):
            ModelParams(0.5)

    def test_negative_field_rejected(self):
        with pytest.raises(ParamError):
            ModelParams(2.0, -1.0)

    def test_certificate_regime(self):
        ModelParams(8.0, 1.0, delta0=8.0).require_certificate_regime()
        with pytest.raises(ParamError):
            ModelParams(4.0).require_certificate_regime()

    def test_disorder_range(self):
        with pytest.raises(ParamError):
            DisorderRealization({0: 1.5})


class TestBond:
    def test_eigenvalues_at_delta_two(self):
        # dense eigensolve of the bond matrix as defined
        assert np.allclose(np.linalg.eigvalsh(bond_operator(2.0)), [-1, -0.25, 0, 0.25], atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1.01, 100))
    def test_unit_norm_and_vacuum(self, delta):
        h = bond_operator(delta)
        assert abs(np.linalg.norm(h, 2) - 1) < 1e-12
        assert np.allclose(h[:, 0], 0)


class TestHamiltonian:
    def test_two_site_spectrum(self):
        lam = Region([1, 2])
        H = build_hamiltonian(lam, ModelParams(2.0, 0.0), None, "H")
        assert np.allclose(np.sort(H.eigenvalues()), [0, 0.75, 1, 1.25], atol=1e-14)
        dec = diagonalize(H)
        assert np.allclose(dec.all_values, [0, 0.75, 1, 1.25], atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=7, unique=True), st.floats(1.1, 20),
           st.floats(0, 10), st.integers(0, 2 ** 31))
    def test_matches_kronecker_oracle(self, sites, delta, lam_f, seed):
        lam = Region(sites)
        om = rand_omega(lam, seed)
        H = build_hamiltonian(lam, ModelParams(delta, lam_f), omega_dict(lam, om), "H")
        ref = full_hamiltonian(lam, delta, lam_f, om)
        assert np.max(np.abs(H.to_dense() - ref)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 8), st.floats(1.1, 20), st.integers(0, 2 ** 31))
    def test_vacuum_is_ground_state(self, L, delta, seed):
        lam = Region.chain(L)
        H = build_hamiltonian(lam, ModelParams(delta, 1.0), omega_dict(lam, rand_omega(lam, seed)), "H")
        dense = H.to_dense()
        assert np.allclose(dense[:, 0], 0, atol=1e-14)
        assert abs(H.min_eigenvalue()) < 1e-12

    def test_conserves_particle_number(self):
        lam = Region.interval(1, 6)
        H = build_hamiltonian(lam, ModelParams(2.0, 1.0), omega_dict(lam, rand_omega(lam, 3)), "H")
        dense = H.to_dense()
        N = full_number(lam)
        assert np.linalg.norm(dense @ N - N @ dense) < 1e-12

    def test_diagonal_of_H0_is_cluster_count(self):
        lam = Region([0, 1, 2, 4, 5])
        H0 = build_hamiltonian(lam, ModelParams(3.0), None, "H0")
        for n in range(len(lam) + 1):
            masks = Sector.of(lam, n).masks
            want = [cluster_count(lam, int(m)) for m in masks]
            assert np.allclose(np.diag(H0.dense_block(n)), want)

    def test_hhat_k0_adds_gap_on_vacuum(self):
        lam = Region.chain(4)
        p = ModelParams(2.0, 1.0)
        om = omega_dict(lam, rand_omega(lam, 0))
        diff = build_hamiltonian(lam, p, om, "Hhat", k=0).to_dense() - build_hamiltonian(lam, p, om, "H").to_dense()
        expect = np.zeros_like(diff)
        expect[0, 0] = p.gap
        assert np.max(np.abs(diff - expect)) < 1e-14

    def test_sparse_blocks_agree_with_dense(self):
        lam = Region.chain(8)
        p, om = ModelParams(4.0, 2.0), omega_dict(lam, rand_omega(lam, 5))
        dense = build_hamiltonian(lam, p, om, "H").to_dense()
        sparse = build_hamiltonian(lam, p, om, "H", sparse_threshold=1).to_dense()
        assert np.max(np.abs(dense - sparse)) < 1e-14


class TestProjections:
    def test_Q0_equals_P_plus_lambda(self):
        lam = Region.chain(5)
        q0 = build_projector_family(lam, Q_m(0)).to_dense()
        pp = build_projector_family(lam, P_plus(lam)).to_dense()
        assert np.array_equal(q0, pp)

    def test_two_particle_single_cluster_trace(self):
        lam = Region.interval(0, 5)
        op = build_projector_family(lam, [chi_N(2), Q_le_k(1)])
        assert op.trace() == 5

    def test_P_plus_matches_oracle(self):
        lam = Region([0, 1, 3, 4])
        S = [1, 3]
        ref = local_op(4, {lam.position(s): np.eye(2) - NUMBER for s in S})
        assert np.array_equal(build_projector_family(lam, P_plus(S)).to_dense(), ref)
        assert np.array_equal(build_projector_family(lam, P_minus(S)).to_dense(), np.eye(16) - ref)

    def test_qhat_trace_bound(self):
        lam = Region.chain(6)
        for k in (1, 2):
            tr = build_projector_family(lam, Qhat_le_k(k)).trace()
            assert tr <= k * 6 ** (2 * k) + 1

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 2 ** 31))
    def test_diagonal_families_commute_with_each_other(self, L, seed):
        lam = Region.chain(L)
        rng = np.random.default_rng(seed)
        S = [int(x) for x in rng.choice(L, size=max(1, L // 2), replace=False)]
        ops = [build_projector_family(lam, s).to_dense() for s in (W(), P_plus(S), Q_le_k(1), chi_N(1))]
        for a in ops:
            for b in ops:
                assert np.array_equal(a @ b, b @ a)


class TestDecoupled:
    def test_single_crossing_bond(self):
        lam = Region.interval(0, 5)
        p = ModelParams(2.0, 1.0)
        _, gamma = build_decoupled(lam, [0, 1, 2], p, omega_dict(lam, rand_omega(lam, 1)))
        # h_{2,3} = -N_2 N_3 - flip / (2 delta), embedded through the Kronecker oracle
        N2, N3 = local_op(6, {2: NUMBER}), local_op(6, {3: NUMBER})
        flip = local_op(6, {2: SIGMA_PLUS, 3: SIGMA_MINUS}) + local_op(6, {2: SIGMA_MINUS, 3: SIGMA_PLUS})
        ref = -N2 @ N3 - flip / 4.0
        sub = np.ix_([0, 4, 8, 12], [0, 4, 8, 12])
        assert np.allclose(ref[sub], bond_operator(2.0), atol=1e-15)
        assert np.max(np.abs(gamma.to_dense() - ref)) < 1e-14
        assert crossing_bonds(lam, [0, 1, 2]) == [2]

    def test_sum_recovers_H(self):
        lam = Region.chain(7)
        p, om = ModelParams(3.0, 2.0), omega_dict(lam, rand_omega(lam, 2))
        hkk, gamma = build_decoupled(lam, [1, 2, 5], p, om)
        H = build_hamiltonian(lam, p, om, "H")
        assert (hkk + gamma - H).max_abs() < 1e-14

    def test_gamma_localised_and_bounded(self):
        lam = Region.chain(8)
        K = [2, 3, 4]
        p = ModelParams(4.0, 1.0)
        _, gamma = build_decoupled(lam, K, p, omega_dict(lam, rand_omega(lam, 4)))
        g = gamma.to_dense()
        dK = deform_region(lam, K, 1) - deform_region(lam, K, -1)
        pm = build_projector_family(lam, P_minus(dK)).to_dense()
        assert np.max(np.abs(g - pm @ g @ pm)) < 1e-12
        pk = build_projector_family(lam, P_plus(K)).to_dense()
        assert np.linalg.norm(pk @ g, 2) <= 1 / 4.0 + 1e-12


class TestIntervals:
    def test_endpoints(self):
        assert math.isclose(energy_interval("I_le_k", 1, 2.0).hi, 0.875)
        assert energy_interval("Ihat_k", 1, 2.0).endpoints == (0.5, 1.0)
        assert math.isclose(energy_interval("I_k", 0, 3.0).lo, 1 - 1 / 3)

    def test_membership_half_open(self):
        iv = energy_interval("Ihat_k", 1, 2.0)
        assert 0.5 in iv and 1.0 not in iv

    def test_bad_kind(self):
        with pytest.raises(ParamError):
            energy_interval("J", 1, 2.0)


class TestDiagonalize:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 9), st.sampled_from([2.0, 5.0, 10.0]), st.integers(0, 2 ** 31))
    def test_spectral_gap(self, L, delta, seed):
        lam = Region.chain(L)
        ev = diagonalize(build_hamiltonian(lam, ModelParams(delta, 1.0), omega_dict(lam, rand_omega(lam, seed)),
                                           "H")).all_values
        g = 1 - 1 / delta
        assert not np.any((ev > 1e-10) & (ev < g - 1e-10))

    def test_reconstruction(self):
        lam = Region.chain(6)
        H = build_hamiltonian(lam, ModelParams(2.0, 1.0), omega_dict(lam, rand_omega(lam, 9)), "H")
        assert diagonalize(H).reconstruction_residual(H) < 1e-12

    def test_windowed_values_subset(self):
        lam = Region.chain(7)
        H = build_hamiltonian(lam, ModelParams(2.0, 1.0), omega_dict(lam, rand_omega(lam, 9)), "H")
        full = diagonalize(H).all_values
        part = diagonalize(H, window=(-np.inf, 1.0)).all_values
        assert np.allclose(part, full[full <= 1.0])

    def test_non_hermitian_rejected(self):
        lam = Region.chain(2)
        m = np.zeros((4, 4))
        m[1, 2] = 1.0
        with pytest.raises(PreconditionError):
            diagonalize(OperatorMatrix.from_full(lam, m))

    def test_compression_spectrum(self):
        lam = Region.chain(5)
        p, om = ModelParams(2.0, 1.0), omega_dict(lam, rand_omega(lam, 1))
        H = build_hamiltonian(lam, p, om, "H")
        comp = compress(H, P_minus(lam))
        # P_-^Lambda removes only the vacuum (eigenvalue 0) from the spectrum
        assert np.allclose(np.sort(comp.eigenvalues()), diagonalize(H).all_values[1:])


def test_block_file_round_trip(tmp_path):
    lam = Region([0, 2, 3, 5])
    H = build_hamiltonian(lam, ModelParams(2.0, 1.0), omega_dict(lam, rand_omega(lam, 1)), "H")
    path = tmp_path / "h.bin"
    dump_blocks(H, path)
    back = load_blocks(path)
    assert back.region == lam
    assert np.array_equal(back.to_dense(), H.to_dense())
