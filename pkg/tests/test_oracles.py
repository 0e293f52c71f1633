import json
import math
import time

import numpy as np
import pytest

from paint_lab import oracles
from paint_lab.calibration import information_gain
from paint_lab.oracles import (
    GaussianPairInstance, MaskedPosteriorInstance, MixtureInstance, gaussian_entropy, gamma_profile,
    map_energy_fusion, markov_duality_instance, mutual_information, optimal_mask_ratio,
)
from paint_lab.policy import named_rng


def _flipped_interpolation(p_t, logp_t, logp_s, selected, k):
    p, lp = np.array(p_t, copy=True), np.array(logp_t, copy=True)
    sel = np.asarray(selected, bool)
    a = (1.0 - k) * lp[sel] - k * np.asarray(logp_s)[sel]  # sign error on the student energy
    a -= np.log(np.exp(a).sum(axis=1, keepdims=True))
    lp[sel], p[sel] = a, np.exp(a)
    return p, lp


@pytest.fixture(scope="module")
def mixture():
    return MixtureInstance(np.array([0.7, 0.1, 0.1, 0.1]), np.array([0.1, 0.2, 0.3, 0.4]), 1.0, 1.0, np.zeros(1))


class TestMaskMonotonicity:
    def test_zero_eps_at_entropy_peak(self, mixture):
        grid = mixture.rho_grid
        peak = float(grid[np.argmax(mixture.entropy(grid))])
        assert optimal_mask_ratio(mixture, 0.0) == peak

    def test_swap_mirrors_entropy(self, mixture):
        swapped = MixtureInstance(mixture.q1, mixture.q0, 1.0, 1.0, np.zeros(1))
        rho = np.linspace(0, 1, 41)
        assert np.allclose(mixture.entropy(rho), swapped.entropy(1 - rho), atol=1e-14)

    def test_negative_eps_weakly_larger(self, mixture):
        base = optimal_mask_ratio(mixture, 0.0)
        for eps in (-0.01, -0.05, -0.1):
            r = optimal_mask_ratio(mixture, eps)
            assert r is None or r >= base

    def test_large_eps_hits_boundary(self, mixture):
        assert optimal_mask_ratio(mixture, 50.0) is None

    def test_identical_endpoints_rejected(self):
        q = np.array([0.25, 0.25, 0.5])
        with pytest.raises(ValueError):
            MixtureInstance(q, q.copy(), 1.0, 1.0, np.zeros(1))

    def test_suite_passes(self):
        assert oracles.verify_mask_monotonicity(n=100).ok


class TestEnergyFusion:
    def test_equal_sigma(self):
        _, k = map_energy_fusion(GaussianPairInstance(0, 0, 0.7, 0.7), [1.0], [2.0])
        assert k == 0.5

    def test_sharp_teacher_limit(self):
        ks = [map_energy_fusion(GaussianPairInstance(0, 0, s, 1.0), [0.0], [0.0])[1] for s in (1e-1, 1e-3, 1e-6)]
        assert ks[0] > ks[1] > ks[2] and ks[2] < 1e-11

    def test_golden_section(self):
        x = oracles.golden_section_min(lambda a, b: (a - b) * (a + b - 2 * 0.3), -2.0, 2.0)
        assert x == pytest.approx(0.3, abs=1e-12)

    def test_suite_passes(self):
        rep = oracles.verify_energy_fusion(n=200)
        assert rep.ok and rep.max_dev <= 1e-8


class TestEntropyRatioSelection:
    def test_gain_example(self):
        # teacher precision tau_T, student tau_S = 2 tau_T, k = 0.03
        tau_t = 1.7
        tau_k = 0.97 * tau_t + 0.03 * 2 * tau_t
        direct = gaussian_entropy(tau_t) - gaussian_entropy(tau_k)
        assert direct == pytest.approx(0.5 * math.log(1.03), abs=1e-12)
        assert information_gain(2.0, 0.03) == pytest.approx(direct, abs=1e-12)

    def test_ratio_one_gives_zero(self):
        assert information_gain(1.0, 0.4, 1.7) == 0.0

    def test_suite_passes(self):
        assert oracles.verify_entropy_ratio_selection(n=1000).ok

    def test_detects_sign_mutation(self):
        rep = oracles.verify_entropy_ratio_selection(n=50, interpolate_fn=_flipped_interpolation)
        assert not rep.ok
        assert rep.checks["interpolation_energy_identity"].failed > 0


class TestPosteriorOracles:
    def test_antipodal_gap(self):
        post = np.array([0.5, 0.5])
        q = np.array([[0.99, 0.01], [0.01, 0.99]])
        gap = mutual_information(post, q)
        direct = math.log(2) - (-(0.99 * math.log(0.99) + 0.01 * math.log(0.01)))
        assert gap == pytest.approx(direct, abs=1e-14) and gap > 0.5

    def test_identical_blocks_zero_information(self):
        q = np.tile([0.2, 0.3, 0.5], (3, 1))
        assert abs(mutual_information(np.array([0.2, 0.3, 0.5]), q)) < 1e-15

    def test_student_at_mixture(self):
        rng = named_rng(3, "t")
        inst = oracles.random_posterior_instance(rng)
        mix = inst.mixture
        lhs = sum(w * np.sum(q * np.log(q / mix)) for w, q in zip(inst.posterior, inst.targets))
        assert lhs == pytest.approx(mutual_information(inst.posterior, inst.targets), abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            MaskedPosteriorInstance(np.array([0.5, 0.6]), np.full((2, 2), 0.5), np.array([0.5, 0.5]))

    @pytest.mark.parametrize("name", ["entropy_smoothing", "kl_decomposition", "rao_blackwell"])
    def test_suites_pass(self, name):
        rep = oracles.ORACLES[name](n=200)
        assert rep.ok and rep.n >= 200


class TestDuality:
    def test_markov_instance_argmin(self):
        inst = markov_duality_instance(named_rng(0, "t"), T=6, k=2)
        prof = gamma_profile(inst)
        gam = [g for _, g, _ in prof]
        assert [t for t, _, _ in prof] == [1, 2, 3, 4, 5]
        assert int(np.argmin(gam)) + 1 == 5
        assert all(b <= a + 1e-12 for a, b in zip(gam, gam[1:]))

    def test_independent_reference(self):
        inst = markov_duality_instance(named_rng(1, "t"), independent=True)
        assert max(abs(g) for _, g, _ in gamma_profile(inst)) < 1e-12

    def test_whole_reference_hidden(self):
        inst = markov_duality_instance(named_rng(2, "t"), T=4, k=4)
        prof = gamma_profile(inst)
        assert len(prof) == 1 and prof[0][1] == pytest.approx(oracles.duality_constant(inst), abs=1e-12)

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            oracles.DualityInstance(np.full((1, 4, 2), 1 / 8), 2, 3)


class TestSuite:
    def test_all_pass_quickly_and_deterministically(self):
        t0 = time.perf_counter()
        reports = oracles.run_suite(0)
        assert time.perf_counter() - t0 < 300
        assert [r.name for r in reports] == list(oracles.ORACLES)
        assert all(r.ok for r in reports)
        a = oracles.suite_json(reports, 0)
        assert a == oracles.suite_json(oracles.run_suite(0), 0)
        for entry in json.loads(a)["oracles"]:
            assert {"name", "n", "pass", "max_dev", "tolerance"} <= set(entry)

    def test_unknown_oracle(self):
        with pytest.raises(ValueError):
            oracles.run_suite(0, ["nope"])

    def test_table(self):
        table = oracles.summary_table(oracles.run_suite(0, ["gibbs"], gibbs={"n": 5}))
        assert "gibbs" in table and "PASS" in table
