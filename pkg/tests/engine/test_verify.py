from __future__ import annotations

from contextlib import ExitStack
from dataclasses import dataclass
from unittest.mock import patch

import numpy as np
import pytest

from bk_thermo_provider.engine.map_model import JuliaCloud, TangentMap
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.verify import CheckReport, LemmaVerifier, Verdict

PARAMS = PotentialParams(tau=1.5, t=3.0)
TRUNCATION = TruncationPolicy(K=30, K_max=200, tail_tol=1e-6)
CHECKS = [
    "borel_check",
    "rapid_growth_check",
    "expansion_check",
    "distortion_check",
    "tau_bound_check",
    "basepoint_independence",
    "koebe_check",
    "transfer_bound_check",
]
LEMMA_IDS = [
    "borel_series",
    "borel_series_divergence",
    "rapid_growth",
    "expansion",
    "distortion",
    "tau_derivative",
    "basepoint_independence",
    "koebe",
    "transfer_bound",
]


@dataclass
class HalfSpacedTangent(TangentMap):
    """Tangent branches squeezed towards the origin, consecutive preimages pi/2 apart."""

    def branch_at(self, w, k):
        return super().branch_at(w, k) / 2


@pytest.fixture
def tangent_verifier(tangent_model) -> LemmaVerifier:
    return LemmaVerifier(tangent_model, PARAMS, TRUNCATION)


@pytest.fixture
def doubling_verifier(doubling_model) -> LemmaVerifier:
    return LemmaVerifier(doubling_model, PARAMS, TRUNCATION)


class TestVerdict:
    @pytest.mark.parametrize(
        argnames="verdicts, should_raise",
        argvalues=[
            ("PASS", False),
            (["PASS", "FAIL", "INCONCLUSIVE"], False),
            ({"FAIL"}, False),
            ("MAYBE", True),
            (["PASS", "UNKNOWN"], True),
        ],
    )
    def test_validate(self, verdicts, should_raise):
        if should_raise:
            with pytest.raises(ValueError):
                Verdict.validate(verdicts)
        else:
            Verdict.validate(verdicts)

    @pytest.mark.parametrize(argnames="verdict, expected", argvalues=[("PASS", True), ("FAIL", False), ("INCONCLUSIVE", False)])
    def test_is_success(self, verdict, expected):
        assert Verdict.is_success(verdict) is expected

    def test_report_to_dict(self):
        report = CheckReport("expansion", {"points": 3}, {"K1": 2.0}, {"margin": 0.05}, Verdict.PASS, ["ok"])
        assert report.passed
        assert report.to_dict() == {
            "lemma_id": "expansion",
            "samples": {"points": 3},
            "fitted_constants": {"K1": 2.0},
            "tolerance": {"margin": 0.05},
            "verdict": "PASS",
            "notes": ["ok"],
        }


class TestSeriesAndGrowth:
    def test_borel_series_at_zero(self, tangent_verifier):
        report = tangent_verifier.borel_check([0j], 2.0)
        assert report.lemma_id == "borel_series"
        assert report.fitted_constants["sums"][0] == pytest.approx(1 / 3, abs=1e-6)
        assert report.fitted_constants["tail_slopes"][0] == pytest.approx(-1.0, abs=0.15)
        assert report.verdict is Verdict.PASS

    def test_borel_series_divergence(self, tangent_verifier, tangent_seed):
        report = tangent_verifier.borel_check([tangent_seed], 0.5)
        assert report.lemma_id == "borel_series_divergence"
        assert report.tolerance["expected_growth_exponent"] == 0.5
        partial = report.samples["partial_sums"][0]
        assert partial == sorted(partial)
        assert report.verdict is Verdict.PASS

    def test_borel_divergence_covers_the_largest_radius(self, tangent_seed):
        model = HalfSpacedTangent.from_parameter(0.5)
        R_grid = (10.0, 100.0, 1000.0)
        report = LemmaVerifier(model, PARAMS, TRUNCATION).borel_check([tangent_seed], 0.5, R_grid=R_grid)
        ks = np.asarray(model.branch_indices(2000))
        moduli = np.abs(model.branch_at(np.full(ks.shape, complex(tangent_seed)), ks))
        expected = float(np.sum(moduli[(moduli > 0) & (moduli <= 1000.0)] ** -0.5))
        assert report.samples["partial_sums"][0][-1] == pytest.approx(expected, rel=1e-12)

    def test_rapid_growth_exponent(self, tangent_verifier):
        report = tangent_verifier.rapid_growth_check()
        assert len(report.fitted_constants) == 2
        for fitted in report.fitted_constants.values():
            assert fitted["multiplicity"] == 1
            assert fitted["exponent"] == pytest.approx(2.0, abs=0.05)
            assert fitted["c0"] > 0
        assert report.verdict is Verdict.PASS


class TestExpansionAndDistortion:
    def test_doubling_expansion(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.expansion_check(doubling_cloud, n_max=5)
        assert report.fitted_constants["K1"] == pytest.approx(2.0, rel=1e-9)
        assert report.fitted_constants["c1"] == pytest.approx(1.0, rel=1e-9)
        assert report.fitted_constants["seed_multiplier"] == pytest.approx(2.0)
        assert report.verdict is Verdict.PASS

    def test_tangent_expansion(self, tangent_verifier, tangent_cloud):
        report = tangent_verifier.expansion_check(tangent_cloud, n_max=4, max_points=40)
        assert report.fitted_constants["K1"] > 1
        assert report.fitted_constants["seed_multiplier"] == pytest.approx(42.9, rel=0.01)

    @pytest.mark.parametrize(argnames="lam, verdict", argvalues=[(0.5, Verdict.PASS), (0.99, Verdict.FAIL)])
    def test_expansion_at_the_real_fixed_points(self, lam, verdict):
        model = TangentMap.from_parameter(lam)
        x0 = TangentMap.positive_fixed_point(lam)
        report = LemmaVerifier(model, PARAMS, TRUNCATION).expansion_check(JuliaCloud.from_points([x0, -x0]), n_max=4)
        multiplier = lam + x0**2 / lam
        assert report.fitted_constants["K1"] == pytest.approx(multiplier, rel=1e-6)
        assert report.fitted_constants["seed_multiplier"] == pytest.approx(multiplier, rel=1e-9)
        assert report.verdict is verdict
        assert bool(report.notes) == (verdict is Verdict.FAIL)

    def test_expansion_needs_two_orbit_lengths(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.expansion_check(doubling_cloud, n_max=1)
        assert report.verdict is Verdict.INCONCLUSIVE

    def test_ergodic_difference_vanishes_for_constant_weights(self, doubling_verifier):
        assert doubling_verifier.ergodic_difference(1.0, 1j, [0, 1, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_doubling_distortion(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.distortion_check(doubling_cloud, n_max=4, t_values=[2.0, 4.0])
        assert report.fitted_constants["K"] == pytest.approx(0.0, abs=1e-9)
        assert set(report.fitted_constants["tK_by_t"]) == {"2.0", "4.0"}
        assert report.samples["pairs"] == 32
        assert report.verdict is Verdict.PASS

    @patch.object(LemmaVerifier, "ergodic_difference", side_effect=lambda w1, w2, word, params: params.t**2 * abs(w1 - w2))
    def test_distortion_growing_faster_than_t_fails(self, ergodic_mock, doubling_verifier, doubling_cloud):
        report = doubling_verifier.distortion_check(doubling_cloud, n_max=4, t_values=[2.0, 4.0])
        assert report.fitted_constants["tK_by_t"] == pytest.approx({"2.0": 4.0, "4.0": 16.0})
        assert report.fitted_constants["tK_spread"] == pytest.approx(0.5)
        assert report.verdict is Verdict.FAIL

    def test_tangent_distortion_is_linear_in_t(self, tangent_verifier, tangent_cloud):
        report = tangent_verifier.distortion_check(tangent_cloud, n_max=3, t_values=[2.5, 3.0, 4.0], max_pairs=20)
        linear = report.fitted_constants["tK_by_t"]
        assert linear["4.0"] > linear["2.5"] > 0
        assert report.fitted_constants["tK_spread"] <= 1e-6

    def test_run_all_sweeps_t_grid(self, doubling_verifier, doubling_cloud):
        report = CheckReport("stub", {}, {}, {}, Verdict.PASS)
        with ExitStack() as stack:
            mocks = {name: stack.enter_context(patch.object(LemmaVerifier, name, return_value=report)) for name in CHECKS}
            reports = doubling_verifier.run_all(doubling_cloud, n_max=4, t_values=[2.5, 4.0])
        assert len(reports) == 9
        mocks["distortion_check"].assert_called_once_with(doubling_cloud, 4, [2.5, 4.0])

    def test_distortion_without_pairs(self, doubling_verifier):
        report = doubling_verifier.distortion_check(JuliaCloud.from_points([1.0, -1.0]), n_max=2)
        assert report.verdict is Verdict.INCONCLUSIVE

    def test_tangent_distortion_is_finite(self, tangent_verifier, tangent_cloud):
        report = tangent_verifier.distortion_check(tangent_cloud, n_max=3, max_pairs=20)
        assert np.isfinite(report.fitted_constants["K"])
        assert report.fitted_constants["K_exponentiated"] <= report.fitted_constants["exponentiated_bound"] * (1 + 1e-9)


class TestBounds:
    def test_doubling_tau_bound(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.tau_bound_check(doubling_cloud)
        assert report.fitted_constants["c"] == pytest.approx(0.5, rel=1e-9)
        assert report.fitted_constants["K_T_tau"] == pytest.approx(1.0, rel=1e-9)
        assert report.verdict is Verdict.PASS

    def test_tangent_sandwich_constant(self, tangent_verifier, tangent_cloud, tangent_model):
        report = tangent_verifier.tau_bound_check(tangent_cloud, max_points=30)
        assert report.fitted_constants["K_T_tau"] <= tangent_model.metric_distortion_constant(PARAMS) * (1 + 1e-12)

    def test_doubling_basepoint_independence(self, doubling_verifier):
        report = doubling_verifier.basepoint_independence([(1.0, 1j)], n_max=4)
        assert report.fitted_constants["ratio_bound"] == pytest.approx(1.0, rel=1e-9)
        assert report.verdict is Verdict.PASS

    def test_doubling_koebe(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.koebe_check(doubling_cloud, n_max=4, max_points=8)
        assert report.fitted_constants["contraction_rate"] == pytest.approx(2.0, rel=1e-6)
        assert report.fitted_constants["inclusion_margin"] >= 1
        assert report.verdict is Verdict.PASS

    def test_doubling_transfer_bound(self, doubling_verifier, doubling_cloud):
        report = doubling_verifier.transfer_bound_check(doubling_cloud)
        assert report.fitted_constants["sup_L1"] == pytest.approx(0.25, rel=1e-9)
        assert report.fitted_constants["model_bound"] == pytest.approx(0.25, rel=1e-12)
        assert report.verdict is Verdict.PASS


@pytest.mark.slow
def test_tangent_run_all(tangent_verifier, tangent_cloud):
    reports = tangent_verifier.run_all(tangent_cloud, n_max=3)
    assert [report.lemma_id for report in reports] == LEMMA_IDS
    for report in reports:
        Verdict.validate(report.verdict.value)
        assert report.to_dict()["lemma_id"] == report.lemma_id
