import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xxzloc.identities import (IDENTITY_REGISTRY, IdentityReport, aggregate, check_appendix_a, check_decoupling,
                               check_positivity_and_spectrum, check_resolvent_identities, check_trace_counts,
                               completeness_report, default_geometries, pick_energy, random_decoupling_case,
                               random_disconnected_geometries, reports_to_json, run_battery, summary_table)
from xxzloc.lattice import PreconditionError, Region
from xxzloc.operators import ModelParams, build_projector_family, Q_le_k, bond_operator
from xxzloc.oracle import local_op, NUMBER


def omega_for(lam, seed):
    return np.random.default_rng(seed).random(len(lam))


def by_id(reports):
    return {r.identity_id: r for r in reports}


class TestStructuralIdentities:
    def test_all_pass_on_chain_and_disconnected(self):
        for lam in (Region.interval(0, 5), Region([0, 1, 3, 4, 5, 8])):
            reps = check_appendix_a(lam, ModelParams(2.0, 1.0), omega_for(lam, 0))
            assert all(r.passed for r in reps), [r for r in reps if not r.passed]
            assert {r.identity_id for r in reps} == {k for k in IDENTITY_REGISTRY if k.startswith("A.")}

    def test_projected_bond_norm_oracle(self):
        # ||P_+^{i} h_{i,i+1}|| = 1/(2 Delta) from the 4x4 bond matrix, bit 0 = site i
        h = bond_operator(2.0)
        p_plus_i = local_op(2, {0: np.eye(2) - NUMBER})
        assert np.linalg.norm(p_plus_i @ h, 2) == pytest.approx(0.25, abs=1e-15)

    def test_bond_eigenvalues_reported_as_info(self):
        reps = by_id(check_appendix_a(Region.chain(3), ModelParams(2.0)))
        r = reps["A.bond_eigenvalues"]
        assert r.info and r.passed
        assert "0.25" in r.notes or "1/(2" in r.notes


class TestPositivity:
    def test_inequalities_on_eight_sites(self):
        lam = Region.interval(0, 7)
        reps = check_positivity_and_spectrum(lam, ModelParams(3.0, 1.0), omega_for(lam, 1), k_max=3)
        assert all(r.passed for r in reps), [r for r in reps if not r.passed]
        ids = {r.identity_id for r in reps}
        assert {"pos.cWbD", "pos.H0W.lower", "pos.H0W.upper", "pos.hatH1.bound", "spec.ground",
                "spec.gap", "comm.HM0", "oracle.kron"} <= ids

    @settings(max_examples=8, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=6, unique=True), st.sampled_from([1.5, 2.0, 5.0, 10.0]),
           st.integers(0, 2 ** 31))
    def test_random_geometries(self, sites, delta, seed):
        lam = Region(sites)
        reps = check_positivity_and_spectrum(lam, ModelParams(delta, 3.0), omega_for(lam, seed))
        assert all(r.passed for r in reps)


class TestResolvent:
    lam = Region.interval(1, 8)
    p = ModelParams(8.0, 5.0)

    def test_fixed_energy(self):
        reps = check_resolvent_identities(self.lam, self.p, omega_for(self.lam, 0), 0.4, 1, 1e-9)
        assert all(r.passed for r in reps)

    def test_below_spectrum(self):
        reps = check_resolvent_identities(self.lam, self.p, omega_for(self.lam, 0), -5.0, 1, 1e-11)
        assert all(r.max_residual < 1e-11 for r in reps)

    def test_picked_energy_in_band(self):
        om = omega_for(self.lam, 3)
        E = pick_energy(self.lam, self.p, om, 2)
        assert E < (2 + 0.75) * self.p.gap
        assert all(r.passed for r in check_resolvent_identities(self.lam, self.p, om, E, 2))

    def test_rejects_k0_and_near_singular(self):
        om = omega_for(self.lam, 0)
        with pytest.raises(PreconditionError):
            check_resolvent_identities(self.lam, self.p, om, 0.4, 0)
        with pytest.raises(PreconditionError, match="near-singular"):
            check_resolvent_identities(self.lam, self.p, om, 0.0, 1)


class TestDecoupling:
    def test_fixed_tuple_twelve_sites(self):
        lam = Region.interval(0, 11)
        reps = check_decoupling(lam, ModelParams(8.0, 5.0), omega_for(lam, 0), 0.3, [5], [4, 5, 6],
                                list(range(2, 10)), list(range(3, 9)), 1e-9)
        got = by_id(reps)
        assert set(got) == {k for k in IDENTITY_REGISTRY if k.startswith("dec.")}
        assert all(r.passed for r in reps), [r for r in reps if not r.passed]
        assert got["dec.caa2"].max_residual < 1e-9
        assert got["dec.independence"].max_residual == 0.0

    def test_chain_violation_is_named(self):
        lam = Region.interval(0, 9)
        with pytest.raises(PreconditionError, match=r"\[K\]_1 ⊆ B"):
            check_decoupling(lam, ModelParams(8.0, 1.0), omega_for(lam, 0), 0.3, [4], [4], [3, 4, 5], [2, 3, 4, 5, 6])

    def test_random_case_is_admissible(self):
        rng = np.random.default_rng(0)
        lam = Region.chain(10)
        from xxzloc.lattice import deform_region
        for _ in range(20):
            c = random_decoupling_case(lam, rng)
            assert c.A.issubset(c.M) and c.M.issubset(deform_region(lam, c.K, -1))
            assert deform_region(lam, c.K, 1).issubset(c.B) and c.A.is_connected()


class TestTraces:
    def test_hs_norm_example(self):
        lam = Region.chain(4)
        assert build_projector_family(lam, Q_le_k(1)).trace() == 10
        reps = check_trace_counts(lam, 1, n_draws=3)
        assert all(r.passed for r in reps)

    def test_trkH_bound_k2(self):
        reps = by_id(check_trace_counts(Region.chain(6), 2, params=ModelParams(2.0, 1.0), n_draws=20))
        assert reps["trace.trkH"].passed

    def test_combinatorics_skipped_for_disconnected(self):
        reps = by_id(check_trace_counts(Region([0, 1, 4]), 1, n_draws=2))
        assert reps["trace.combinatorics"].info


class TestAggregation:
    def test_battery_small_grid(self):
        geoms = default_geometries(5) + random_disconnected_geometries(3, 6, 9, seed=0)
        reps = run_battery(geoms, (1.5, 10.0), 2, 0)
        assert all(r.passed for r in reps), summary_table(reps)
        assert reps[-1].identity_id == "registry.completeness"

    def test_completeness_flags_missing_identity(self):
        fake = [IdentityReport(k, {}, 0.0, 1e-10) for k in IDENTITY_REGISTRY if k != "res.resmod1"]
        rep = completeness_report(fake)
        assert not rep.passed and "res.resmod1" in rep.notes

    def test_unknown_identity_rejected(self):
        with pytest.raises(KeyError):
            IdentityReport("no.such.identity", {}, 0.0, 1.0)

    def test_aggregate_keeps_worst_and_counts(self):
        a = IdentityReport("A.nth", {"sites": [0, 1]}, 1e-14, 1e-10)
        b = IdentityReport("A.nth", {"sites": [0]}, 1e-12, 1e-10)
        (agg,) = aggregate([a, b])
        assert agg.max_residual == 1e-12 and agg.n_cases == 2

    def test_json_and_table(self):
        reps = check_appendix_a(Region.chain(3), ModelParams(2.0))
        data = json.loads(reports_to_json(reps))
        assert len(data) == len(reps) and all("residual" in d for d in data)
        assert "passed" in summary_table(reps)

    def test_dense_limit(self):
        with pytest.raises(PreconditionError):
            check_appendix_a(Region.chain(13), ModelParams(2.0))
