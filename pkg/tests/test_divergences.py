import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from aikd.divergences import (
    DiscreteDistribution,
    DistanceReport,
    js_divergence,
    kl_divergence,
    parallel_lines_case,
    total_variation,
    wasserstein,
)


def dist(support, mass):
    return DiscreteDistribution(support, mass)


def random_pair(rng, n_points=4, dim=1):
    shape = (n_points,) if dim == 1 else (n_points, dim)
    support = rng.uniform(-3, 3, size=shape)
    p = rng.dirichlet(np.ones(n_points))
    q = rng.dirichlet(np.ones(n_points))
    return dist(support, p), dist(support, q)


class TestInvariants:
    def test_mass_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            dist([0.0, 1.0], [0.5, 0.6])

    def test_negative_mass_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            dist([0.0, 1.0], [1.5, -0.5])

    def test_duplicate_support_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            dist([1.0, 1.0], [0.5, 0.5])

    def test_report_bounds(self):
        with pytest.raises(ValueError):
            DistanceReport(tv=1.5, kl=0.0, js=0.0, wasserstein=0.0)
        with pytest.raises(ValueError):
            DistanceReport(tv=0.0, kl=-1.0, js=0.0, wasserstein=0.0)


class TestTotalVariation:
    def test_identical(self):
        p = dist([0.0, 2.0, 5.0], [0.2, 0.3, 0.5])
        assert total_variation(p, p) == 0.0

    def test_disjoint_supports_saturate(self):
        p = dist([0.0, 1.0], [0.4, 0.6])
        q = dist([2.0, 3.0], [0.9, 0.1])
        assert total_variation(p, q) == pytest.approx(1.0, abs=1e-15)

    def test_two_point_case_vs_event_enumeration(self):
        # Oracle: the sup over all 2^n events of |P(A) - Q(A)|.
        pm, qm = np.array([0.7, 0.3]), np.array([0.4, 0.6])
        best = 0.0
        for r in range(3):
            for event in itertools.combinations(range(2), r):
                event = list(event)
                best = max(best, abs(pm[event].sum() - qm[event].sum()))
        p = dist([0.0, 1.0], pm)
        q = dist([0.0, 1.0], qm)
        assert total_variation(p, q) == pytest.approx(best, abs=1e-12)
        assert best == pytest.approx(0.3, abs=1e-12)

    def test_matches_event_enumeration_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p, q = random_pair(rng, n_points=5)
            pm, qm = p.mass, q.mass
            best = max(
                abs(pm[list(event)].sum() - qm[list(event)].sum())
                for r in range(6)
                for event in itertools.combinations(range(5), r)
            )
            assert total_variation(p, q) == pytest.approx(best, abs=1e-12)


class TestKL:
    def test_identical(self):
        p = dist([0.0, 1.0, 2.0], [0.1, 0.4, 0.5])
        assert kl_divergence(p, p) == 0.0

    def test_disjoint_is_infinite(self):
        p = dist([0.0], [1.0])
        q = dist([1.0], [1.0])
        assert kl_divergence(p, q) == math.inf
        assert kl_divergence(q, p) == math.inf

    def test_hand_value(self):
        p = dist([0.0, 1.0], [0.5, 0.5])
        q = dist([0.0, 1.0], [0.25, 0.75])
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)

    def test_zero_p_mass_contributes_nothing(self):
        p = dist([0.0, 1.0], [1.0, 0.0])
        q = dist([0.0, 1.0], [0.5, 0.5])
        assert kl_divergence(p, q) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_asymmetry_witness(self):
        p = dist([0.0, 1.0], [0.8, 0.2])
        q = dist([0.0, 1.0], [0.5, 0.5])
        assert abs(kl_divergence(p, q) - kl_divergence(q, p)) > 1e-3


class TestJS:
    def test_identical(self):
        p = dist([0.0, 1.0], [0.3, 0.7])
        assert js_divergence(p, p) == 0.0

    def test_disjoint_hits_unhalved_ceiling(self):
        p = dist([0.0], [1.0])
        q = dist([9.0], [1.0])
        assert js_divergence(p, q) == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_ratio_to_conventional_halved_form_is_two(self):
        # This implementation keeps both KL-vs-mixture terms unhalved; the
        # conventional definition halves them.
        rng = np.random.default_rng(3)
        for _ in range(10):
            p, q = random_pair(rng)
            pm, qm = p.mass, q.mass
            mm = 0.5 * (pm + qm)
            halved = 0.5 * sum(
                float(np.sum(m[m > 0] * np.log(m[m > 0] / mm[m > 0]))) for m in (pm, qm)
            )
            assert js_divergence(p, q) == pytest.approx(2.0 * halved, rel=1e-12)

    def test_point_vs_even_pair(self):
        p = dist([0.0, 1.0], [1.0, 0.0])
        q = dist([0.0, 1.0], [0.5, 0.5])
        # term-by-term: KL(p||m) = ln(4/3), KL(q||m) = 0.5 ln(2/3) + 0.5 ln 2
        expected = math.log(4.0 / 3.0) + 0.5 * math.log(2.0 / 3.0) + 0.5 * math.log(2.0)
        assert js_divergence(p, q) == pytest.approx(expected, abs=1e-15)

    def test_never_infinite(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = dist(rng.normal(size=3), rng.dirichlet(np.ones(3)))
            q = dist(rng.normal(size=4), rng.dirichlet(np.ones(4)))
            assert math.isfinite(js_divergence(p, q))


def lp_transport_cost(p, q):
    """Independent brute-force minimum-cost transport oracle."""
    sup_p = np.atleast_2d(np.asarray(p.support, dtype=float).reshape(len(p.support), -1))
    sup_q = np.atleast_2d(np.asarray(q.support, dtype=float).reshape(len(q.support), -1))
    n, m = len(sup_p), len(sup_q)
    cost = np.linalg.norm(sup_p[:, None, :] - sup_q[None, :, :], axis=2).reshape(-1)
    rows = [np.repeat(np.eye(n), m, axis=1)[i] for i in range(n)]
    cols = [np.tile(np.eye(m), n)[j] for j in range(m)]
    a_eq = np.vstack(rows + cols)
    b_eq = np.concatenate([p.mass, q.mass])
    res = linprog(cost, A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


class TestWasserstein:
    def test_identical(self):
        p = dist([0.0, 1.0], [0.5, 0.5])
        assert wasserstein(p, p) == 0.0

    def test_unit_mass_unit_distance(self):
        assert wasserstein(dist([0.0], [1.0]), dist([1.0], [1.0])) == pytest.approx(1.0)

    def test_split_to_center(self):
        p = dist([0.0, 1.0], [0.5, 0.5])
        q = dist([0.5], [1.0])
        assert wasserstein(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        p = dist([0.0, 1.0], [0.5, 0.5])
        q = dist([[0.0, 0.0], [1.0, 1.0]], [0.5, 0.5])
        with pytest.raises(ValueError, match="dimension"):
            wasserstein(p, q)

    def test_1d_matches_lp_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n, m = rng.integers(1, 7), rng.integers(1, 7)
            p = dist(np.sort(rng.uniform(-5, 5, n)), rng.dirichlet(np.ones(n)))
            q = dist(np.sort(rng.uniform(-5, 5, m)), rng.dirichlet(np.ones(m)))
            assert wasserstein(p, q) == pytest.approx(lp_transport_cost(p, q), abs=1e-9)

    def test_2d_matches_lp_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            p = dist(rng.uniform(-2, 2, (4, 2)), rng.dirichlet(np.ones(4)))
            q = dist(rng.uniform(-2, 2, (3, 2)), rng.dirichlet(np.ones(3)))
            assert wasserstein(p, q) == pytest.approx(lp_transport_cost(p, q), abs=1e-9)


class TestSymmetryAndIdentity:
    def test_symmetric_distances(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            p, q = random_pair(rng, n_points=5)
            assert abs(total_variation(p, q) - total_variation(q, p)) <= 1e-12
            assert abs(js_divergence(p, q) - js_divergence(q, p)) <= 1e-12
            assert abs(wasserstein(p, q) - wasserstein(q, p)) <= 1e-12

    def test_zero_iff_equal_up_to_reordering(self):
        p = dist([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
        q = dist([2.0, 0.0, 1.0], [0.5, 0.2, 0.3])  # same distribution, reordered
        assert total_variation(p, q) == 0.0
        assert kl_divergence(p, q) == 0.0
        assert js_divergence(p, q) == 0.0
        assert wasserstein(p, q) == 0.0

    def test_nonzero_when_different(self):
        p = dist([0.0, 1.0], [0.2, 0.8])
        q = dist([0.0, 1.0], [0.2001, 0.7999])
        assert total_variation(p, q) > 0
        assert kl_divergence(p, q) > 0
        assert js_divergence(p, q) > 0
        assert wasserstein(p, q) > 0


class TestParallelLines:
    def test_theta_zero_all_zero(self):
        report = parallel_lines_case(0.0)
        assert (report.tv, report.kl, report.js, report.wasserstein) == (0.0, 0.0, 0.0, 0.0)

    @pytest.mark.parametrize("theta", [0.1, 0.5, 2.0])
    def test_saturation_vs_transport(self, theta):
        report = parallel_lines_case(theta)
        assert report.tv == 1.0
        assert report.kl == math.inf
        assert report.js == pytest.approx(2.0 * math.log(2.0), abs=1e-12)
        assert report.wasserstein == pytest.approx(abs(theta), abs=1e-9)

    def test_negative_theta_symmetric(self):
        assert parallel_lines_case(-2.0).wasserstein == pytest.approx(2.0, abs=1e-9)

    def test_js_constant_in_theta(self):
        values = [parallel_lines_case(t).js for t in (0.1, 0.5, 2.0)]
        assert max(values) - min(values) <= 1e-10

    def test_custom_grid(self):
        report = parallel_lines_case(0.25, grid=32)
        assert report.wasserstein == pytest.approx(0.25, abs=1e-9)
        with pytest.raises(ValueError):
            parallel_lines_case(0.5, grid=1)

    def test_json_serialization_of_infinity(self):
        doc = parallel_lines_case(1.0).to_json_dict()
        assert doc["kl"] == "inf"
        assert set(doc) == {"tv", "kl", "js", "wasserstein"}
