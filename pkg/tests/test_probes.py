import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from xxzloc.lattice import INFINITE, PreconditionError, Region, deform_region
from xxzloc.operators import ModelParams, P_minus, P_plus, build_hamiltonian, diagonalize, energy_interval
from xxzloc.oracle import full_hamiltonian, full_projector_plus
from xxzloc.probes import (InsufficientSamples, ProbeParams, SectorSolver, borel_theta, bump, check_locality_hypotheses,
                           ct_certificate, ct_constants, dressed_resolvent_block, energy_reduction_check,
                           evolution_decay_check, f_estimator, fit_decay, regularity)


def omega_for(lam, seed):
    return dict(zip(lam.sites, np.random.default_rng(seed).random(len(lam))))


def dense_projectors(lam, A, B):
    """``P_-^A`` and ``P_+^B`` from Kronecker products."""
    dim = 1 << len(lam)
    return np.eye(dim) - full_projector_plus(lam, A), full_projector_plus(lam, B)


def dense_H(lam, p, om, k=None):
    arr = np.array([om[s] for s in lam.sites])
    H = full_hamiltonian(lam, p.delta, p.lam, arr)
    if k is not None:
        # add k g Qhat_{<=k} from cluster counts of each basis state
        from xxzloc.lattice import cluster_count
        w = np.array([cluster_count(lam, m) for m in range(1 << len(lam))])
        qhat = ((w >= 1) & (w <= k)).astype(float) + (k + 1) / k * (w == 0) if k > 0 else (w == 0).astype(float)
        H = H + (k if k > 0 else 1) * p.gap * np.diag(qhat)
    return H


class TestProbeParams:
    def test_validation(self):
        with pytest.raises(PreconditionError):
            ProbeParams(s=1.0)
        with pytest.raises(PreconditionError):
            ProbeParams(E=math.nan)
        with pytest.raises(PreconditionError):
            ProbeParams(flavor="weird")


class TestDressedBlock:
    def test_matches_full_space_inverse(self):
        lam = Region.interval(1, 8)
        p, om = ModelParams(8.0, 5.0), omega_for(lam, 11)
        A, B = [4], deform_region(lam, [4], 2)
        blk = dressed_resolvent_block(build_hamiltonian(lam, p, om, "H"), 0.2, P_minus(A), P_plus(B))
        pa, pb = dense_projectors(lam, A, B)
        ref = np.linalg.norm(pa @ np.linalg.inv(dense_H(lam, p, om) - 0.2 * np.eye(256)) @ pb, 2)
        assert abs(blk.operator_norm - ref) <= 1e-10 * ref

    def test_infinite_rho_block_is_zero(self):
        lam = Region([0, 1, 5, 6])
        p, om = ModelParams(3.0, 1.0), omega_for(lam, 1)
        blk = dressed_resolvent_block(build_hamiltonian(lam, p, om, "H"), 0.3, P_minus([0]), P_plus([0, 1]))
        assert blk.operator_norm == 0.0 and blk.hs_norm == 0.0

    def test_component_filled_set_is_zero_for_modified_H(self):
        lam = Region([0, 1, 2, 6, 7])
        p, om = ModelParams(8.0, 1.0), omega_for(lam, 2)
        M = [1]
        Minf = deform_region(lam, M, INFINITE)
        H = build_hamiltonian(lam, p, om, "Hhat", k=1)
        assert dressed_resolvent_block(H, 0.4, P_minus(M), P_plus(Minf)).operator_norm == 0.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 7), st.floats(1.5, 20), st.floats(-2.0, 3.0), st.integers(0, 2 ** 31))
    def test_hs_norm_matches_oracle(self, L, delta, E, seed):
        lam = Region.chain(L)
        p, om = ModelParams(delta, 1.0), omega_for(lam, seed)
        dense = dense_H(lam, p, om)
        if np.min(np.abs(np.linalg.eigvalsh(dense) - E)) < 1e-3:
            return
        A, B = [0], list(range(0, L))[: max(1, L // 2)]
        pa, pb = dense_projectors(lam, A, B)
        ref = np.linalg.norm(pa @ np.linalg.inv(dense - E * np.eye(1 << L)) @ pb)
        blk = dressed_resolvent_block(build_hamiltonian(lam, p, om, "H"), E, P_minus(A), P_plus(B))
        assert abs(blk.hs_norm - ref) <= 1e-10 * max(ref, 1.0)

    def test_near_singular_is_flagged(self):
        lam = Region.chain(3)
        p, om = ModelParams(2.0, 1.0), omega_for(lam, 0)
        H = build_hamiltonian(lam, p, om, "H")
        e = float(diagonalize(H).all_values[3])
        blk = dressed_resolvent_block(H, e, P_minus([0]), P_plus([0, 1]))
        assert blk.near_singular


class TestCTCertificate:
    def test_constants_at_delta_eight(self):
        C0, m0 = ct_constants(8.0)
        assert math.isclose(C0, 32 / 7, rel_tol=1e-12)
        assert math.isclose(m0, math.log(7 / 4), rel_tol=1e-12)

    def test_pairs_pass_on_twelve_sites(self):
        lam = Region.interval(0, 11)
        p = ModelParams(8.0, 3.0, delta0=8.0)
        om = omega_for(lam, 5)
        rng = np.random.default_rng(0)
        H = build_hamiltonian(lam, p, om, "Hhat", k=1)
        solver = SectorSolver(H, 0.5)
        for _ in range(20):
            b0 = int(rng.integers(0, 12))
            b1 = int(rng.integers(b0, 12))
            a0 = int(rng.integers(b0, b1 + 1))
            a1 = int(rng.integers(a0, b1 + 1))
            c = ct_certificate(lam, p, 1, 0.5, range(a0, a1 + 1), range(b0, b1 + 1), om, hamiltonian=H,
                               solver=solver)
            assert c.passed, (a0, a1, b0, b1, c)

    def test_measured_matches_dense_oracle(self):
        lam = Region.chain(7)
        p, om = ModelParams(8.0, 2.0), omega_for(lam, 3)
        A, B = [3], [1, 2, 3, 4, 5]
        c = ct_certificate(lam, p, 2, 0.7, A, B, om, check_hypotheses=False)
        pa, pb = dense_projectors(lam, A, B)
        ref = np.linalg.norm(pa @ np.linalg.inv(dense_H(lam, p, om, k=2) - 0.7 * np.eye(128)) @ pb, 2)
        assert abs(c.measured - ref) <= 1e-10 * ref
        assert c.rho == 2

    def test_hypotheses_hold(self):
        lam = Region.chain(8)
        T = build_hamiltonian(lam, ModelParams(8.0, 1.0), omega_for(lam, 0), "Hhat", k=1)
        hyp = check_locality_hypotheses(T, 1 / 8.0)
        assert hyp["support_pass"] and hyp["norm_pass"]
        assert hyp["commutator_norm"] <= 1 / 8.0 + 1e-12

    def test_rejects_energy_outside_band(self):
        lam = Region.chain(5)
        with pytest.raises(PreconditionError):
            ct_certificate(lam, ModelParams(8.0), 1, 5.0, [2], [1, 2, 3], omega_for(lam, 0))

    def test_rejects_small_delta0(self):
        lam = Region.chain(5)
        with pytest.raises(Exception):
            ct_certificate(lam, ModelParams(3.0), 1, 0.1, [2], [1, 2, 3], omega_for(lam, 0))

    @settings(max_examples=12, deadline=None)
    @given(st.integers(3, 8), st.floats(6.0, 30.0), st.integers(0, 2), st.floats(0, 1), st.integers(0, 2 ** 31))
    def test_always_passes(self, L, delta, k, frac, seed):
        lam = Region.chain(L)
        p = ModelParams(delta, 2.0)
        band = energy_interval("I_le_k", k, delta)
        E = -1.0 + frac * (band.hi + 1.0) * 0.999
        rng = np.random.default_rng(seed)
        b0 = int(rng.integers(0, L))
        b1 = int(rng.integers(b0, L))
        a = int(rng.integers(b0, b1 + 1))
        c = ct_certificate(lam, p, k, E, [a], range(b0, b1 + 1), omega_for(lam, seed), check_hypotheses=False)
        assert c.passed


class TestFEstimator:
    def test_zero_when_ball_fills_component(self):
        lam = Region.chain(4)
        f = f_estimator(lam, ModelParams(8.0, 5.0), omega_for(lam, 0), 1, 0.3, 10)
        assert f.value == 0.0

    def test_matches_subinterval_oracle(self):
        lam = Region.interval(1, 8)
        p, om = ModelParams(8.0, 5.0), omega_for(lam, 7)
        E, r, k = 0.3, 3, 1
        best = 0.0
        for a in range(1, 9):
            for b in range(a, 9):
                theta = Region.interval(a, b)
                dense = dense_H(theta, p, om)
                dim = 1 << len(theta)
                res = np.linalg.inv(dense - E * np.eye(dim))
                from xxzloc.lattice import cluster_count
                w = np.array([cluster_count(theta, m) for m in range(dim)])
                q = np.diag(((w >= 1) & (w <= k)).astype(float))
                for j in theta.sites:
                    nj = np.eye(dim) - full_projector_plus(theta, [j])
                    pb = full_projector_plus(theta, deform_region(theta, [j], r).sites)
                    best = max(best, np.linalg.norm(q @ nj @ res @ pb @ q))
        f = f_estimator(lam, p, om, k, E, r)
        assert f.n_theta == 36
        assert abs(f.value - best) <= 1e-10 * best

    def test_hs_bound_by_distance(self):
        lam = Region.interval(1, 4)
        p, om = ModelParams(8.0, 1.0), omega_for(lam, 1)
        E = 0.3
        f = f_estimator(lam, p, om, 1, E, 0, scope="exhaustive")
        ev = diagonalize(build_hamiltonian(lam, p, om, "H")).all_values
        assert f.value <= math.sqrt(10) / np.min(np.abs(ev - E)) + 1e-12


class TestEnergyReduction:
    def test_decomposition_on_eight_sites(self):
        lam = Region.interval(1, 8)
        p, om = ModelParams(4.0, 1.0), omega_for(lam, 0)
        rep = energy_reduction_check(lam, [1, 2, 3, 4], p, om, 0.4, k=1)
        assert rep.residual < 1e-10 and rep.projected_residual < 1e-10
        assert rep.min_nonzero_nu >= p.gap - 1e-10
        assert rep.lowered_in_band is True and rep.passed

    def test_needs_proper_subset(self):
        lam = Region.chain(4)
        with pytest.raises(PreconditionError):
            energy_reduction_check(lam, lam.sites, ModelParams(2.0), omega_for(lam, 0), 0.1)


class TestBorelTheta:
    def test_matches_rank_one_oracle(self):
        lam = Region.interval(1, 10)
        p, om = ModelParams(8.0, 10.0), omega_for(lam, 4)
        A, r, k = [5], 3, 1
        w, v = np.linalg.eigh(dense_H(lam, p, om))
        pa, pb = dense_projectors(lam, A, deform_region(lam, A, r).sites)
        band = energy_interval("I_le_k", k, p.delta)
        # eigenvalues are simple for a generic field, so each projector is rank one
        ref = sum(np.linalg.norm(pa @ v[:, i]) * np.linalg.norm(pb @ v[:, i])
                  for i in range(len(w)) if band.contains(w[i]))
        val = borel_theta(lam, p, om, k, A, r)
        assert abs(val - ref) <= 1e-10 * max(ref, 1e-300)

    def test_bounded_by_count_and_zero_at_infinite_rho(self):
        lam = Region.chain(6)
        p, om = ModelParams(8.0, 3.0), omega_for(lam, 1)
        dec = diagonalize(build_hamiltonian(lam, p, om, "H"))
        count = dec.spectral_count(energy_interval("I_le_k", 1, 8.0))
        for r in range(0, 7):
            assert borel_theta(lam, p, om, 1, [2], r, decomposition=dec) <= count + 1e-12
        assert borel_theta(lam, p, om, 1, [2], 6, decomposition=dec) == 0.0


class TestEvolution:
    def test_example_and_oracle(self):
        lam = Region.interval(0, 7)
        p, om = ModelParams(4.0, 1.0), omega_for(lam, 2)
        A, B = [3], deform_region(lam, [3], 3)
        rep = evolution_decay_check(lam, p, om, A, B, [0.0, 1.0])
        assert rep.r == 4
        (t0, m0, _, ok0), (t1, m1, b1, ok1) = rep.rows
        assert m0 == pytest.approx(0.0, abs=1e-14) and ok0
        assert b1 == pytest.approx(0.25 ** 4 / 24) and ok1
        pa, pb = dense_projectors(lam, A, B.sites)
        U = sla.expm(1j * dense_H(lam, p, om))
        assert abs(m1 - np.linalg.norm(pa @ U @ pb, 2)) < 1e-12

    def test_commutes_with_component_projection(self):
        lam = Region([0, 1, 2, 5, 6])
        p, om = ModelParams(4.0, 1.0), omega_for(lam, 3)
        U = sla.expm(1j * 0.7 * dense_H(lam, p, om))
        pm = np.eye(32) - full_projector_plus(lam, deform_region(lam, [1], INFINITE).sites)
        assert np.linalg.norm(pm @ U - U @ pm, 2) < 1e-12

    def test_bump_support(self):
        f = bump(1.0, 0.5, 3)
        assert f(np.array([0.4, 1.6]))[0] == 0 and f(1.0) == 1.0
        with pytest.raises(PreconditionError):
            bump(0.0, 0.0)


class TestRegularity:
    lam = Region.interval(0, 9)

    def test_far_below_spectrum_is_regular(self):
        K = Region.interval(0, 4)
        HK = build_hamiltonian(K, ModelParams(8.0, 10.0), omega_for(self.lam, 0), "H")
        assert regularity(HK, K, 0.3, -10.0, 1).regular

    def test_eigenvalue_is_not_regular(self):
        K = Region.interval(0, 4)
        HK = build_hamiltonian(K, ModelParams(8.0, 10.0), omega_for(self.lam, 0), "H")
        e = float(diagonalize(HK).all_values[2])
        assert not regularity(HK, K, 0.3, e, 3).regular

    def test_reproducible(self):
        K = Region.interval(0, 4)
        HK = build_hamiltonian(K, ModelParams(8.0, 10.0), omega_for(self.lam, 0), "H")
        a, b = regularity(HK, K, 0.3, 0.5, 3), regularity(HK, K, 0.3, 0.5, 3)
        assert a.regular == b.regular and a.F == b.F


class TestFitDecay:
    def test_exact_exponential(self):
        prof = fit_decay([(r, 3 * math.exp(-0.7 * r)) for r in (1, 2, 3)])
        assert prof.rate == pytest.approx(0.7, abs=1e-12)
        assert prof.prefactor == pytest.approx(3.0, rel=1e-12)
        assert prof.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_all_below_floor(self):
        with pytest.raises(InsufficientSamples):
            fit_decay([(1, 1e-20), (2, 1e-21), (3, 0.0)], floor=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_noisy_synthetic(self, seed):
        rng = np.random.default_rng(seed)
        rs = np.arange(1, 9)
        ys = 2 * np.exp(-0.5 * rs) * (1 + rng.uniform(-0.01, 0.01, rs.size))
        prof = fit_decay(list(zip(rs.tolist(), ys.tolist())))
        assert abs(prof.rate - 0.5) < 0.02
