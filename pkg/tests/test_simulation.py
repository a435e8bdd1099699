import math

import numpy as np
import pytest

from drbayes.estimators import ABS_STANDARDIZED, ABS_STD_SCALE, IDENTITY
from drbayes.numerics import RngStream, expit
from drbayes.simulation import (
    SCENARIOS,
    SimConfig,
    apply_scenario,
    generate_data,
    run_replication,
    run_simulation,
    summarize,
    ReplicationRecord,
)

FAST_ESTIMATORS = ("naive", "adjusted", "dr", "is")


def _fast_config(**kw):
    base = dict(
        n=100,
        reps=4,
        seed=90,
        scenario="I",
        estimators=FAST_ESTIMATORS,
        n_draws=8,
        n_boot=8,
    )
    base.update(kw)
    return SimConfig(**base)


class TestGenerateData:
    def test_shapes_and_names(self):
        data = generate_data(200, RngStream(1, 0))
        assert data.x.shape == (200, 4)
        assert data.column_names == ("x1", "x2", "x3", "x4")
        assert set(np.unique(data.z)) <= {0.0, 1.0}

    def test_deterministic_in_stream(self):
        a = generate_data(50, RngStream(2, 3))
        b = generate_data(50, RngStream(2, 3))
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.z, b.z)

    def test_transformed_first_covariate_moments(self):
        # The analytic mean of |X|/sqrt(1 - 2/pi) for standard normal X is
        # sqrt(2/pi)/sqrt(1 - 2/pi); its variance is one by construction.
        data = generate_data(1_000_000, RngStream(3, 1))
        c1 = np.abs(data.x[:, 0]) * ABS_STD_SCALE
        target = math.sqrt(2.0 / math.pi) / math.sqrt(1.0 - 2.0 / math.pi)
        assert c1.mean() == pytest.approx(target, abs=0.003)
        assert c1.var() == pytest.approx(1.0, abs=0.01)

    def test_treated_fraction_matches_quadrature_oracle(self):
        # Independent oracle: integrate expit(0.4 c1 + t) over the half-normal
        # law of c1 and t ~ N(0, 0.4^2 + 0.8^2) by Gauss-Hermite quadrature.
        nodes, weights = np.polynomial.hermite_e.hermegauss(120)
        whalf = weights / math.sqrt(2.0 * math.pi)
        c1_nodes = np.abs(nodes) * ABS_STD_SCALE
        t_sd = math.sqrt(0.4**2 + 0.8**2)
        grid = 0.4 * c1_nodes[:, None] + t_sd * nodes[None, :]
        oracle = float(whalf @ expit(grid) @ whalf)
        data = generate_data(1_000_000, RngStream(4, 2))
        assert data.z.mean() == pytest.approx(oracle, abs=0.003)

    def test_outcome_mechanism_additive_unit_effect(self):
        # Rebuild the conditional mean from the stored covariates: the
        # residual y - (z - c1 - x2 - x3) must be standard normal noise,
        # independent of z, so the treatment effect is additive and equals 1.
        data = generate_data(500_000, RngStream(5, 4))
        c1 = np.abs(data.x[:, 0]) * ABS_STD_SCALE
        resid = data.y - (data.z - c1 - data.x[:, 1] - data.x[:, 2])
        assert resid.mean() == pytest.approx(0.0, abs=0.005)
        assert resid.std() == pytest.approx(1.0, abs=0.005)
        assert abs(resid[data.z == 1].mean() - resid[data.z == 0].mean()) < 0.01


class TestApplyScenario:
    def test_scenario_one_sets(self):
        spec = SCENARIOS["I"]
        assert spec.s_columns == ((0, IDENTITY), (1, IDENTITY), (2, IDENTITY))
        assert spec.b_columns == ((0, ABS_STANDARDIZED), (1, IDENTITY), (3, IDENTITY))

    def test_scenario_two_sets(self):
        spec = SCENARIOS["II"]
        assert spec.s_columns[0] == (0, ABS_STANDARDIZED)
        assert spec.b_columns == ((0, IDENTITY), (1, IDENTITY), (3, IDENTITY))

    def test_round_trip_column_means(self):
        data = generate_data(200_000, RngStream(6, 0))
        svals, labels = apply_scenario(data, "II").s_matrix(data)
        target = math.sqrt(2.0 / math.pi) / math.sqrt(1.0 - 2.0 / math.pi)
        assert svals[:, 0].mean() == pytest.approx(target, abs=0.01)
        assert svals[:, 1].mean() == pytest.approx(0.0, abs=0.01)
        assert labels[0] == "abs(x1)"

    def test_unknown_scenario_rejected(self):
        data = generate_data(60, RngStream(7, 0))
        with pytest.raises(KeyError):
            apply_scenario(data, "III")


class TestRunReplication:
    def test_same_index_same_records(self):
        config = _fast_config()
        a = run_replication(config, 2)
        b = run_replication(config, 2)
        assert a == b

    def test_different_index_different_data(self):
        config = _fast_config()
        a = run_replication(config, 0)
        b = run_replication(config, 1)
        assert a[0].point != b[0].point

    def test_covered_flag_consistent(self):
        config = _fast_config(reps=3)
        for rec in run_replication(config, 1):
            assert rec.covered == (abs(rec.point - 1.0) <= 1.96 * rec.se)


class TestSummarize:
    def test_degenerate_points(self):
        recs = [
            ReplicationRecord(r, "naive", 1.0, 0.1, True) for r in range(16)
        ]
        row = summarize(recs)[0]
        assert row.mean_point == 1.0
        assert row.rel_bias_pct == 0.0
        assert row.mc_sd == 0.0
        assert row.coverage_pct == 100.0
        assert row.mc_error == 0.0

    def test_two_point_arithmetic(self):
        recs = [
            ReplicationRecord(0, "e", 0.9, 0.2, True),
            ReplicationRecord(1, "e", 1.1, 0.4, True),
        ]
        row = summarize(recs)[0]
        assert row.mean_point == pytest.approx(1.0)
        assert row.mc_sd == pytest.approx(0.1414, abs=5e-4)
        assert row.mean_se == pytest.approx(0.3)
        assert math.isnan(row.mc_error)  # too few replications for batches

    def test_coverage_definition(self):
        recs = [
            ReplicationRecord(0, "e", 1.0, 0.1, True),
            ReplicationRecord(1, "e", 1.3, 0.1, False),
        ]
        assert summarize(recs)[0].coverage_pct == 50.0

    def test_failures_flagged_incomplete(self):
        recs = [ReplicationRecord(r, "e", 1.0, 0.1, True) for r in range(8)]
        recs += [
            ReplicationRecord(8 + i, "e", float("nan"), float("nan"), False, error="x")
            for i in range(2)
        ]
        row = summarize(recs)[0]
        assert row.n_failed == 2
        assert row.incomplete  # 20% failures

    def test_batch_count_rule(self):
        gen = RngStream(8).generator()
        recs = [
            ReplicationRecord(r, "e", float(gen.standard_normal() + 1.0), 0.1, True)
            for r in range(100)
        ]
        row = summarize(recs)[0]
        from drbayes.numerics import batch_means_error

        points = np.array([r.point for r in recs])
        assert row.mc_error == pytest.approx(batch_means_error(points, 10))


TREND_SIZES = ((250, 300), (1000, 150), (4000, 75))


@pytest.fixture(scope="module")
def rows_by_n():
    out = {}
    for n, reps in TREND_SIZES:
        res = run_simulation(
            SimConfig(
                n=n,
                reps=reps,
                seed=424242,
                scenario="I",
                estimators=("naive", "adjusted", "dr", "or_ps_info"),
                n_draws=2,
                n_boot=2,
            )
        )
        out[n] = {row.estimator: row for row in res.rows}
    return out


class TestConsistencyTrends:
    # Mean points of consistent estimators drift toward the truth as n
    # grows, while the confounded estimators sit at n-free limits.

    @pytest.mark.parametrize("tag", ["dr", "or_ps_info"])
    def test_consistent_estimators_bias_shrinks(self, rows_by_n, tag):
        small, large = rows_by_n[250][tag], rows_by_n[4000][tag]
        slack = 2.0 * (small.mc_error + large.mc_error)
        assert abs(large.mean_point - 1.0) <= abs(small.mean_point - 1.0) + slack

    @pytest.mark.parametrize("tag", ["naive", "adjusted"])
    def test_confounded_estimators_stable_across_n(self, rows_by_n, tag):
        means = [rows_by_n[n][tag] for n, _ in TREND_SIZES]
        for a, b in zip(means, means[1:]):
            gap = abs(a.mean_point - b.mean_point)
            assert gap <= 4.0 * math.hypot(a.mc_error, b.mc_error)


class TestRunSimulation:
    def test_serial_two_workers_identical(self):
        config = _fast_config(reps=4)
        serial = run_simulation(config)
        parallel = run_simulation(_fast_config(reps=4, threads=2))
        assert serial.records == parallel.records
        for a, b in zip(serial.rows, parallel.rows):
            assert a == b

    def test_estimator_filtering(self):
        result = run_simulation(_fast_config(estimators=("naive", "dr")))
        assert [row.estimator for row in result.rows] == ["naive", "dr"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(n=10)
        with pytest.raises(ValueError):
            SimConfig(reps=1)
        with pytest.raises(ValueError):
            SimConfig(scenario="X")
        with pytest.raises(ValueError):
            SimConfig(estimators=("nope",))
