import numpy as np
import pytest

from drbayes.glm import (
    DesignMatrix,
    SingularDesignError,
    clever_covariate,
    cubic_ps_basis,
    fd_mean_score_cross_derivative,
    fit_linear_weighted,
    fit_linear_weighted_many,
    fit_logistic_weighted,
    fit_logistic_weighted_many,
    observed_info_se_treatment,
    propensity,
    ps_adjusted_treatment_variance,
)
from drbayes.numerics import RngStream, expit


def _logistic_data(n, gamma, seed=0):
    gen = RngStream(seed, 100).generator()
    x = np.column_stack([np.ones(n), gen.standard_normal((n, len(gamma) - 1))])
    z = (gen.random(n) < expit(x @ np.asarray(gamma))).astype(float)
    return x, z


class TestDesignMatrix:
    def test_requires_intercept_first(self):
        with pytest.raises(ValueError, match="intercept"):
            DesignMatrix(np.arange(6.0).reshape(3, 2), ["intercept", "a"])

    def test_label_count_checked(self):
        with pytest.raises(ValueError, match="column_labels"):
            DesignMatrix(np.ones((3, 2)), ["intercept"])


class TestLogisticFit:
    def test_intercept_only_analytic(self):
        z = np.array([1.0, 0.0, 0.0, 0.0] * 50)
        fit = fit_logistic_weighted(np.ones((200, 1)), z)
        assert fit.converged
        assert fit.gamma[0] == pytest.approx(np.log(0.25 / 0.75), abs=1e-6)

    def test_duplicate_rows_halved_weights_invariant(self):
        x, z = _logistic_data(120, [0.3, 0.7, -0.5], seed=1)
        fit1 = fit_logistic_weighted(x, z)
        x2 = np.vstack([x, x])
        z2 = np.concatenate([z, z])
        fit2 = fit_logistic_weighted(x2, z2, weights=np.full(240, 0.5))
        np.testing.assert_allclose(fit1.gamma, fit2.gamma, atol=1e-9)
        np.testing.assert_allclose(fit1.cov, fit2.cov, atol=1e-9)

    def test_recovers_coefficients_within_4_se(self):
        gamma_true = np.array([0.0, 0.4, 0.4, 0.8])
        x, z = _logistic_data(2000, gamma_true, seed=2)
        fit = fit_logistic_weighted(x, z)
        se = np.sqrt(np.diag(fit.cov))
        assert np.all(np.abs(fit.gamma - gamma_true) < 4 * se)

    def test_converged_score_below_tolerance(self):
        x, z = _logistic_data(200, [0.2, 0.5], seed=3)
        fit = fit_logistic_weighted(x, z)
        mu = expit(x @ fit.gamma)
        score = x.T @ (z - mu)
        assert np.abs(score).max() < 1e-8
        assert fit.max_abs_score < 1e-8

    def test_row_permutation_invariance(self):
        gen = RngStream(4).generator()
        x, z = _logistic_data(150, [0.1, -0.6, 0.4], seed=4)
        w = gen.random(150) + 0.5
        fit = fit_logistic_weighted(x, z, weights=w)
        perm = gen.permutation(150)
        fit_p = fit_logistic_weighted(x[perm], z[perm], weights=w[perm])
        np.testing.assert_allclose(fit.gamma, fit_p.gamma, atol=1e-10)

    def test_separation_sets_warning_flag(self):
        # Perfectly separated data on a small-scale covariate drives the
        # coefficient far beyond the warning bound before the score vanishes.
        x = np.column_stack([np.ones(8), 0.1 * np.r_[-np.ones(4), np.ones(4)]])
        z = np.r_[np.zeros(4), np.ones(4)]
        fit = fit_logistic_weighted(x, z)
        assert fit.separation
        assert fit.converged

    def test_all_zero_weights_rejected(self):
        x, z = _logistic_data(20, [0.0, 0.3], seed=5)
        with pytest.raises(ValueError, match="weights"):
            fit_logistic_weighted(x, z, weights=np.zeros(20))

    def test_batch_matches_single_fits(self):
        x, z = _logistic_data(150, [0.2, 0.5, -0.3], seed=6)
        gen = RngStream(7).generator()
        weights = gen.dirichlet(np.ones(150), size=12)
        batch = fit_logistic_weighted_many(x, z, weights)
        assert batch.converged.all()
        for k in range(12):
            single = fit_logistic_weighted(x, z, weights=weights[k])
            np.testing.assert_allclose(batch.gamma[k], single.gamma, atol=1e-8)

    def test_batch_warm_start_same_optimum(self):
        x, z = _logistic_data(150, [0.2, 0.5, -0.3], seed=8)
        gen = RngStream(9).generator()
        weights = gen.dirichlet(np.ones(150), size=6)
        cold = fit_logistic_weighted_many(x, z, weights)
        warm = fit_logistic_weighted_many(x, z, weights, start=fit_logistic_weighted(x, z).gamma)
        np.testing.assert_allclose(cold.gamma, warm.gamma, atol=1e-7)


class TestLinearFit:
    def test_exact_interpolation(self):
        gen = RngStream(10).generator()
        x = np.column_stack([np.ones(12), gen.standard_normal((12, 2))])
        phi_true = np.array([1.0, -2.0, 0.5])
        y = x @ phi_true
        fit = fit_linear_weighted(x, y, weights=gen.random(12) + 0.1)
        np.testing.assert_allclose(fit.phi, phi_true, atol=1e-10)
        assert fit.sigma2 == pytest.approx(0.0, abs=1e-20)

    def test_unit_weights_match_normal_equations(self):
        gen = RngStream(11).generator()
        x = np.column_stack([np.ones(10), gen.standard_normal((10, 3))])
        y = gen.standard_normal(10)
        fit = fit_linear_weighted(x, y)
        oracle = np.linalg.solve(x.T @ x, x.T @ y)
        np.testing.assert_allclose(fit.phi, oracle, atol=1e-12)

    def test_weight_scale_invariance_of_phi_and_cov(self):
        gen = RngStream(12).generator()
        x = np.column_stack([np.ones(30), gen.standard_normal((30, 2))])
        y = gen.standard_normal(30)
        w = gen.random(30) + 0.2
        fit1 = fit_linear_weighted(x, y, weights=w)
        fit7 = fit_linear_weighted(x, y, weights=7.0 * w)
        np.testing.assert_allclose(fit1.phi, fit7.phi, atol=1e-12)
        np.testing.assert_allclose(fit1.cov, fit7.cov, atol=1e-12)
        assert fit7.n_effective == pytest.approx(7.0 * fit1.n_effective)

    def test_normal_equation_residual_invariant(self):
        gen = RngStream(13).generator()
        x = np.column_stack([np.ones(80), gen.standard_normal((80, 4))])
        y = gen.standard_normal(80)
        w = gen.random(80) + 0.1
        fit = fit_linear_weighted(x, y, weights=w)
        resid = x.T @ (w * (y - x @ fit.phi))
        assert np.abs(resid).max() < 1e-8 * max(np.abs(x.T @ (w * y)).max(), 1.0)

    def test_singular_design_names_columns(self):
        x = np.column_stack([np.ones(10), np.arange(10.0), 2.0 * np.arange(10.0)])
        design = DesignMatrix(x, ["intercept", "a", "a_copy"])
        with pytest.raises(SingularDesignError) as exc:
            fit_linear_weighted(design, np.arange(10.0))
        assert set(exc.value.columns) & {"a", "a_copy"}

    def test_batch_matches_single_fits(self):
        gen = RngStream(14).generator()
        x = np.column_stack([np.ones(60), gen.standard_normal((60, 2))])
        y = gen.standard_normal(60)
        weights = gen.random((9, 60)) + 0.05
        batch = fit_linear_weighted_many(x, y, weights)
        assert batch.ok.all()
        for k in range(9):
            single = fit_linear_weighted(x, y, weights=weights[k])
            np.testing.assert_allclose(batch.phi[k], single.phi, atol=1e-10)
            np.testing.assert_allclose(batch.sigma2[k], single.sigma2, atol=1e-10)
            np.testing.assert_allclose(batch.cov[k], single.cov, atol=1e-8)

    def test_batch_per_draw_designs(self):
        gen = RngStream(15).generator()
        designs = np.empty((5, 40, 3))
        designs[:, :, 0] = 1.0
        designs[:, :, 1:] = gen.standard_normal((5, 40, 2))
        y = gen.standard_normal(40)
        batch = fit_linear_weighted_many(designs, y)
        for k in range(5):
            single = fit_linear_weighted(designs[k], y)
            np.testing.assert_allclose(batch.phi[k], single.phi, atol=1e-10)


class TestPropensityAndBases:
    def test_zero_coefficients_give_half(self):
        x, z = _logistic_data(20, [0.0, 0.0], seed=16)
        fit = fit_logistic_weighted(x, z)
        fit.gamma[:] = 0.0
        np.testing.assert_allclose(propensity(fit, x), 0.5)

    def test_monotone_in_positive_coefficient(self):
        x = np.column_stack([np.ones(50), np.linspace(-3, 3, 50)])
        fit = fit_logistic_weighted(*_logistic_data(50, [0.1, 0.9], seed=17))
        probs = propensity(fit, x)
        if fit.gamma[1] > 0:
            assert np.all(np.diff(probs) > 0)
        else:
            assert np.all(np.diff(probs) < 0)

    def test_single_row_matches_hand_expit(self):
        x, z = _logistic_data(60, [0.3, -0.4], seed=18)
        fit = fit_logistic_weighted(x, z)
        row = np.array([[1.0, 2.5]])
        assert propensity(fit, row)[0] == pytest.approx(
            float(expit(fit.gamma[0] + 2.5 * fit.gamma[1])), abs=1e-12
        )

    def test_dimension_mismatch(self):
        x, z = _logistic_data(30, [0.0, 0.5], seed=19)
        fit = fit_logistic_weighted(x, z)
        with pytest.raises(ValueError, match="columns"):
            propensity(fit, np.ones((4, 3)))

    def test_cubic_basis_centering(self):
        e = np.array([0.2, 0.8])
        basis = cubic_ps_basis(e)
        np.testing.assert_allclose(basis[:, 0], [-0.3, 0.3])
        assert basis[:, 0].mean() == pytest.approx(0.0, abs=1e-15)

    def test_cubic_basis_constant_input_gives_zeros(self):
        basis = cubic_ps_basis(np.full(10, 0.4))
        np.testing.assert_array_equal(basis, np.zeros((10, 3)))

    def test_cubic_basis_domain(self):
        with pytest.raises(ValueError):
            cubic_ps_basis(np.array([0.0, 0.5]))

    def test_clever_covariate_values(self):
        assert clever_covariate(1.0, 0.5) == pytest.approx(2.0)
        assert clever_covariate(0.0, 0.25) == pytest.approx(-4.0 / 3.0)
        assert clever_covariate(1.0, 0.25) == pytest.approx(4.0)


def _sandwich_instance(n, seed):
    """Outcome linear in (1, z, s, cubic basis of fitted probabilities)."""
    gen = RngStream(seed, 55).generator()
    s = gen.standard_normal(n)
    b = gen.standard_normal(n)
    bdes = np.column_stack([np.ones(n), b])
    z = (gen.random(n) < expit(0.3 + 0.8 * b)).astype(float)
    y = 1.0 + z - s + 0.5 * b + gen.standard_normal(n)
    ps_fit = fit_logistic_weighted(bdes, z)

    def build(gamma):
        e = expit(bdes @ gamma)
        return np.column_stack([np.ones(n), z, s, cubic_ps_basis(e)])

    x_out = build(ps_fit.gamma)
    outcome_fit = fit_linear_weighted(x_out, y)
    return y, z, s, bdes, ps_fit, outcome_fit, build


class TestSandwich:
    def test_observed_info_matches_classical_formula(self):
        gen = RngStream(20).generator()
        x = np.column_stack([np.ones(40), gen.standard_normal((40, 2))])
        y = gen.standard_normal(40)
        fit = fit_linear_weighted(x, y)
        resid = y - x @ fit.phi
        sigma2 = float(resid @ resid / 40)
        oracle = np.sqrt(sigma2 * np.linalg.inv(x.T @ x)[1, 1])
        assert observed_info_se_treatment(fit) == pytest.approx(oracle, rel=1e-10)

    def test_correction_free_variant_equals_hc0(self):
        y, z, s, bdes, ps_fit, outcome_fit, build = _sandwich_instance(300, seed=21)
        x_out = build(ps_fit.gamma)
        var = ps_adjusted_treatment_variance(
            outcome_fit, ps_fit, y, z, bdes, build, include_ps_correction=False
        )
        resid = y - x_out @ outcome_fit.phi
        bread = np.linalg.inv(x_out.T @ x_out)
        meat = (x_out * resid[:, None]).T @ (x_out * resid[:, None])
        hc0 = (bread @ meat @ bread)[1, 1]
        assert var == pytest.approx(hc0, rel=1e-8)

    def test_design_constant_in_gamma_recovers_hc0(self):
        # With no propensity terms in the outcome design the correction
        # vanishes and the adjusted sandwich equals the conventional one.
        gen = RngStream(22).generator()
        n = 200
        s = gen.standard_normal(n)
        b = gen.standard_normal(n)
        bdes = np.column_stack([np.ones(n), b])
        z = (gen.random(n) < expit(0.4 * b)).astype(float)
        y = z + s + gen.standard_normal(n)
        ps_fit = fit_logistic_weighted(bdes, z)
        x_out = np.column_stack([np.ones(n), z, s])
        outcome_fit = fit_linear_weighted(x_out, y)

        def build(gamma):
            return x_out

        with_corr = ps_adjusted_treatment_variance(
            outcome_fit, ps_fit, y, z, bdes, build, include_ps_correction=True
        )
        without = ps_adjusted_treatment_variance(
            outcome_fit, ps_fit, y, z, bdes, build, include_ps_correction=False
        )
        assert with_corr == pytest.approx(without, abs=1e-8)

    def test_fd_cross_derivative_matches_analytic(self):
        # Analytic chain-rule oracle on a 5-row instance: the design depends
        # on gamma only through the centered cubic basis of e = expit(B g).
        # The derivative is a property of the score map, so fixed coefficient
        # values serve (no fit is required on 5 rows).
        gen = RngStream(23, 55).generator()
        n = 5
        s = gen.standard_normal(n)
        b = gen.standard_normal(n)
        z = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
        y = gen.standard_normal(n) + z
        bdes = np.column_stack([np.ones(n), b])
        gamma = np.array([0.2, 0.6])
        phi = np.array([0.5, 1.0, -0.7, 0.4, -0.3, 0.2])
        sigma2 = 0.7

        def build(g):
            e = expit(bdes @ g)
            return np.column_stack([np.ones(n), z, s, cubic_ps_basis(e)])

        fd = fd_mean_score_cross_derivative(build, gamma, phi, sigma2, y)

        e = np.asarray(expit(bdes @ gamma))
        d = e - e.mean()
        x_out = build(gamma)
        resid = y - x_out @ phi
        p_phi, p_gam = x_out.shape[1], bdes.shape[1]
        analytic = np.zeros((p_phi, p_gam))
        for j in range(p_gam):
            de = e * (1.0 - e) * bdes[:, j]
            dd = de - de.mean()
            dx = np.zeros((n, p_phi))
            dx[:, 3] = dd
            dx[:, 4] = 2.0 * d * dd
            dx[:, 5] = 3.0 * d**2 * dd
            du = (dx * resid[:, None] + x_out * (-(dx @ phi))[:, None]) / sigma2
            analytic[:, j] = du.mean(axis=0)
        np.testing.assert_allclose(fd, analytic, atol=1e-6)

    def test_adjusted_variance_below_unadjusted_on_average(self):
        # Estimating the treatment probabilities reduces the variance of the
        # treatment coefficient; check the estimated quantities on average.
        from drbayes.estimators import ps_outcome_design, treatment_design
        from drbayes.simulation import apply_scenario, generate_data

        adj, unadj = [], []
        for rep in range(100):
            data = generate_data(5000, RngStream(1234, rep))
            spec = apply_scenario(data, "I")
            bdes = treatment_design(data, spec)
            ps_fit = fit_logistic_weighted(bdes, data.z)

            def build(gamma, data=data, spec=spec, bdes=bdes):
                return ps_outcome_design(data, spec, expit(bdes.values @ gamma)).values

            outcome_fit = fit_linear_weighted(build(ps_fit.gamma), data.y)
            adj.append(
                ps_adjusted_treatment_variance(
                    outcome_fit, ps_fit, data.y, data.z, bdes, build
                )
            )
            unadj.append(
                ps_adjusted_treatment_variance(
                    outcome_fit, ps_fit, data.y, data.z, bdes, build,
                    include_ps_correction=False,
                )
            )
        assert np.mean(adj) < np.mean(unadj)
