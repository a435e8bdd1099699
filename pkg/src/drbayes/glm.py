"""Weighted generalized linear model fitting and variance estimators.

Two model families are supported: logistic regression fit by iteratively
reweighted least squares, and Gaussian linear regression fit by weighted
least squares in closed form.  Weights are treated as relative throughout:
rescaling all weights by a positive constant leaves coefficients, residual
variance, and reported covariance unchanged.

Batched variants (``*_many``) fit one model per row of a weight matrix
against a shared (or per-row) design.  They exist because the resampling
estimators refit the same small model hundreds of times per dataset; a
row-batched Newton step is an order of magnitude faster than a Python loop
over fits, and the batched results agree with the single fits to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.special import expit as _expit_raw

from .numerics import expit

__all__ = [
    "DesignMatrix",
    "FittedLogistic",
    "FittedLinear",
    "GlmError",
    "NonConvergenceError",
    "SingularDesignError",
    "SingularInformationError",
    "fit_logistic_weighted",
    "fit_logistic_weighted_many",
    "fit_linear_weighted",
    "fit_linear_weighted_many",
    "BatchLogistic",
    "BatchLinear",
    "propensity",
    "cubic_ps_basis",
    "clever_covariate",
    "observed_info_se_treatment",
    "fd_mean_score_cross_derivative",
    "ps_adjusted_treatment_variance",
]

SEPARATION_BOUND = 30.0
MAX_IRLS_ITERATIONS = 100
SCORE_TOL = 1e-8
LOGLIK_TOL = 1e-10


class GlmError(Exception):
    """Base class for model-fitting failures."""


class NonConvergenceError(GlmError):
    """IRLS failed to converge; the last iterate is attached as ``last_fit``."""

    def __init__(self, message, last_fit=None):
        super().__init__(message)
        self.last_fit = last_fit


class SingularDesignError(GlmError):
    """The (weighted) design is rank deficient; suspects in ``columns``."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingularInformationError(GlmError):
    """An information matrix required to be invertible is singular."""


@dataclass
class DesignMatrix:
    """Dense design with an explicit intercept and labelled columns."""

    values: np.ndarray
    column_labels: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"design must be 2-d, got shape {self.values.shape}")
        if len(self.column_labels) != self.values.shape[1]:
            raise ValueError("column_labels length does not match design width")
        if not np.all(self.values[:, 0] == 1.0):
            raise ValueError("first design column must be the intercept (all ones)")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]


@dataclass
class FittedLogistic:
    """Logistic regression estimate with convergence metadata."""

    gamma: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    separation: bool = False


@dataclass
class FittedLinear:
    """Weighted least squares estimate."""

    phi: np.ndarray
    sigma2: float
    cov: np.ndarray
    n_effective: float
    dropped_columns: tuple[str, ...] = field(default=())


def _as_values(design):
    return design.values if isinstance(design, DesignMatrix) else np.asarray(design, float)


def _labels(design, p):
    if isinstance(design, DesignMatrix):
        return list(design.column_labels)
    return [f"col{j}" for j in range(p)]


def _collinear_columns(xw, labels):
    """Labels of columns beyond the numerical rank of ``xw`` (QR pivoting)."""
    _, r, perm = qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max(initial=0.0) * max(xw.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    return [labels[j] for j in sorted(perm[rank:])]


# Relative eigenvalue floor, on the correlation scale, below which normal
# equations are treated as rank deficient.  Scale-invariant, so small but
# informative columns (cubic basis terms) are not misflagged.
RANK_TOL = 1e-10


def _gram_is_well_posed(a):
    """Numerical full-rank check of a Gram matrix, on the correlation scale."""
    diag = np.diagonal(a)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        return False
    scale = np.sqrt(diag)
    corr = a / np.outer(scale, scale)
    eigvals = np.linalg.eigvalsh(corr)
    return bool(eigvals[0] > RANK_TOL)


def _gram_rows_well_posed(a):
    """Vectorized version of :func:`_gram_is_well_posed` for (m, p, p)."""
    diag = np.diagonal(a, axis1=1, axis2=2)
    good = np.all(np.isfinite(diag), axis=1) & np.all(diag > 0.0, axis=1)
    scale = np.sqrt(np.where(diag > 0.0, diag, 1.0))
    corr = a / (scale[:, :, None] * scale[:, None, :])
    corr[~good] = np.eye(a.shape[1])
    eigvals = np.linalg.eigvalsh(corr)
    return good & (eigvals[:, 0] > RANK_TOL)


def _scatter_symmetric(flat, p, iu):
    """Unpack rows of upper-triangle entries into symmetric (m, p, p)."""
    out = np.empty((flat.shape[0], p, p))
    out[:, iu[0], iu[1]] = flat
    out[:, iu[1], iu[0]] = flat
    return out


def _check_weights(weights, n):
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ValueError(f"weights shape {weights.shape} does not match n={n}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must not be all zero")
    return weights


def fit_logistic_weighted(
    x,
    z,
    weights=None,
    max_iter=MAX_IRLS_ITERATIONS,
    score_tol=SCORE_TOL,
    loglik_tol=LOGLIK_TOL,
):
    """Weighted logistic maximum likelihood via IRLS.

    Parameters
    ----------
    x : DesignMatrix or ndarray
        n x p design, intercept first.
    z : ndarray
        Binary response in {0, 1}.
    weights : ndarray, optional
        Relative observation weights (not all zero).

    Returns
    -------
    FittedLogistic
        Convergence is declared when the maximum absolute entry of the
        weighted score drops below ``score_tol`` or the relative change in
        weighted log-likelihood drops below ``loglik_tol``.  ``cov`` is the
        inverse weighted observed information.  A coefficient exceeding
        30 in absolute value sets the ``separation`` warning flag.

    Raises
    ------
    NonConvergenceError
        After ``max_iter`` iterations; the last iterate rides along.
    SingularDesignError
        When the weighted information is rank deficient.
    """
    xv = _as_values(x)
    z = np.asarray(z, dtype=float)
    n, p = xv.shape
    weights = _check_weights(weights, n)
    wnorm = weights / weights.mean()

    gamma = np.zeros(p)
    loglik_prev = -np.inf
    iterations = 0
    max_score = np.inf
    converged = False
    for iterations in range(1, max_iter + 1):
        mu = expit(xv @ gamma)
        score = xv.T @ (wnorm * (z - mu))
        max_score = float(np.abs(score).max())
        loglik = float(np.sum(wnorm * (z * np.log(mu) + (1.0 - z) * np.log1p(-mu))))
        if max_score < score_tol:
            converged = True
            break
        if np.isfinite(loglik_prev) and abs(loglik - loglik_prev) <= loglik_tol * (
            1.0 + abs(loglik)
        ):
            converged = True
            break
        loglik_prev = loglik
        irls_w = wnorm * mu * (1.0 - mu)
        info = (xv * irls_w[:, None]).T @ xv
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            suspects = _collinear_columns(xv * np.sqrt(irls_w)[:, None], _labels(x, p))
            raise SingularDesignError(
                f"singular weighted information; collinear columns: {suspects}",
                columns=suspects,
            ) from None
        gamma = gamma + step
        if not np.all(np.isfinite(gamma)):
            break

    mu = expit(xv @ gamma)
    # Covariance from the observed information at the raw weights (frequency
    # weights), so duplicating rows while halving weights changes nothing.
    info = (xv * (weights * mu * (1.0 - mu))[:, None]).T @ xv
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
    fit = FittedLogistic(
        gamma=gamma,
        cov=cov,
        converged=converged,
        iterations=iterations,
        max_abs_score=max_score,
        separation=bool(np.any(np.abs(gamma) > SEPARATION_BOUND)),
    )
    if not converged:
        raise NonConvergenceError(
            f"IRLS did not converge in {max_iter} iterations "
            f"(max |score| = {max_score:.3e})",
            last_fit=fit,
        )
    return fit


@dataclass
class BatchLogistic:
    """Row-batched logistic fits: one coefficient vector per weight row."""

    gamma: np.ndarray  # (m, p)
    converged: np.ndarray  # (m,) bool
    separation: np.ndarray  # (m,) bool
    iterations: int


def fit_logistic_weighted_many(
    x,
    z,
    weights,
    max_iter=MAX_IRLS_ITERATIONS,
    score_tol=SCORE_TOL,
    start=None,
):
    """IRLS for many weight vectors against one shared design.

    ``weights`` has shape (m, n); row k defines its own fit.  Rows that fail
    (singular information, divergence) are reported unconverged rather than
    raising, since resampling callers skip and count such draws.  Converged
    rows drop out of the working set, so late iterations only pay for the
    stragglers.  ``start`` warm-starts all rows (typically the full-sample
    estimate, since reweighted fits are small perturbations of it); the
    optimum is unchanged.
    """
    xv = _as_values(x)
    z = np.asarray(z, dtype=float)
    m, n = weights.shape
    p = xv.shape[1]
    row_means = weights.mean(axis=1, keepdims=True)
    wnorm = weights / np.where(row_means > 0, row_means, 1.0)

    if start is None:
        gamma = np.zeros((m, p))
    else:
        gamma = np.tile(np.asarray(start, dtype=float), (m, 1))
    iu = np.triu_indices(p)
    pairs = xv[:, iu[0]] * xv[:, iu[1]]
    converged = np.zeros(m, dtype=bool)
    active = np.flatnonzero(row_means[:, 0] > 0)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if active.size == 0:
            break
        wa = wnorm[active]
        mu = _expit_raw(gamma[active] @ xv.T)
        score = (wa * (z - mu)) @ xv
        done = np.abs(score).max(axis=1) < score_tol
        converged[active[done]] = True
        keep = ~done
        active = active[keep]
        if active.size == 0:
            break
        mu = mu[keep]
        score = score[keep]
        irls_w = wa[keep] * mu * (1.0 - mu)
        info = _scatter_symmetric(irls_w @ pairs, p, iu)
        try:
            step = np.linalg.solve(info, score[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.zeros((active.size, p))
            dead = np.zeros(active.size, dtype=bool)
            for row in range(active.size):
                try:
                    step[row] = np.linalg.solve(info[row], score[row])
                except np.linalg.LinAlgError:
                    dead[row] = True
            gamma[active[dead]] = np.nan
            active = active[~dead]
            step = step[~dead]
        gnew = gamma[active] + step
        bad = ~np.all(np.isfinite(gnew), axis=1) | (np.abs(gnew).max(axis=1) > 1e3)
        gnew[bad] = np.nan
        gamma[active] = gnew
        active = active[~bad]
    return BatchLogistic(
        gamma=gamma,
        converged=converged,
        separation=np.abs(np.where(np.isfinite(gamma), gamma, 0.0)).max(axis=1)
        > SEPARATION_BOUND,
        iterations=iterations,
    )


def fit_linear_weighted(x, y, weights=None):
    """Weighted least squares in closed form.

    ``sigma2`` is the weighted residual sum of squares divided by the total
    weight (maximum-likelihood scale), and ``cov = sigma2 * (X'WX)^{-1}``
    with the weights normalized to mean one, so both are invariant to
    rescaling all weights.  ``n_effective`` is the raw weight total.

    Raises :class:`SingularDesignError` naming collinear columns when the
    weighted normal equations are rank deficient.
    """
    xv = _as_values(x)
    y = np.asarray(y, dtype=float)
    n, p = xv.shape
    weights = _check_weights(weights, n)
    wnorm = weights / weights.mean()

    xw = xv * wnorm[:, None]
    a = xw.T @ xv
    b = xw.T @ y
    if not _gram_is_well_posed(a):
        suspects = _collinear_columns(xv * np.sqrt(wnorm)[:, None], _labels(x, p))
        raise SingularDesignError(
            f"rank-deficient weighted design; collinear columns: {suspects}",
            columns=suspects,
        )
    phi = np.linalg.solve(a, b)
    resid = y - xv @ phi
    sigma2 = float(wnorm @ resid**2 / n)
    a_inv = np.linalg.inv(a)
    return FittedLinear(
        phi=phi,
        sigma2=sigma2,
        cov=sigma2 * a_inv,
        n_effective=float(weights.sum()),
    )


@dataclass
class BatchLinear:
    """Row-batched WLS fits."""

    phi: np.ndarray  # (m, p)
    sigma2: np.ndarray  # (m,)
    cov: np.ndarray  # (m, p, p)
    ok: np.ndarray  # (m,) bool


def fit_linear_weighted_many(x, y, weights=None):
    """Closed-form WLS for many weight rows and/or per-row designs.

    ``x`` may be (n, p) shared across rows or (m, n, p); ``weights`` is
    (m, n) or None for unweighted fits.  Singular rows are flagged in ``ok``
    instead of raising.
    """
    xv = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shared_design = xv.ndim == 2
    if shared_design:
        n, p = xv.shape
        if weights is None:
            raise ValueError("shared design with no weights is a single fit")
        m = weights.shape[0]
    else:
        m, n, p = xv.shape

    if weights is None:
        wnorm = np.ones((m, n))
    else:
        row_means = weights.mean(axis=1, keepdims=True)
        wnorm = weights / np.where(row_means > 0, row_means, 1.0)

    if shared_design:
        iu = np.triu_indices(p)
        a = _scatter_symmetric(wnorm @ (xv[:, iu[0]] * xv[:, iu[1]]), p, iu)
        b = (wnorm * y) @ xv
    else:
        xw = wnorm[:, :, None] * xv
        a = np.matmul(xv.transpose(0, 2, 1), xw)
        b = np.matmul(xv.transpose(0, 2, 1), (wnorm * y)[:, :, None])[:, :, 0]

    phi = np.empty((m, p))
    cov = np.empty((m, p, p))
    sigma2 = np.empty(m)
    ok = _gram_rows_well_posed(a)
    a_solvable = np.where(ok[:, None, None], a, np.eye(p)[None])
    try:
        phi = np.linalg.solve(a_solvable, b[:, :, None])[:, :, 0]
        a_inv = np.linalg.inv(a_solvable)
    except np.linalg.LinAlgError:
        a_inv = np.empty((m, p, p))
        for k in range(m):
            try:
                phi[k] = np.linalg.solve(a_solvable[k], b[k])
                a_inv[k] = np.linalg.inv(a_solvable[k])
            except np.linalg.LinAlgError:
                ok[k] = False
                phi[k] = np.nan
                a_inv[k] = np.nan
    phi[~ok] = np.nan
    if shared_design:
        resid = y - phi @ xv.T
    else:
        resid = y - np.matmul(xv, phi[:, :, None])[:, :, 0]
    sigma2 = np.sum(wnorm * resid**2, axis=1) / n
    cov = sigma2[:, None, None] * a_inv
    ok &= np.all(np.isfinite(phi), axis=1)
    return BatchLinear(phi=phi, sigma2=sigma2, cov=cov, ok=ok)


def propensity(fit, design):
    """Fitted treatment probabilities ``expit(X @ gamma)`` under ``fit``."""
    xv = _as_values(design)
    if xv.shape[1] != fit.gamma.shape[0]:
        raise ValueError(
            f"design has {xv.shape[1]} columns but fit has {fit.gamma.shape[0]} coefficients"
        )
    return expit(xv @ fit.gamma)


def cubic_ps_basis(e):
    """Centered cubic polynomial basis of a probability vector.

    Columns are ``(e - mean(e)) ** k`` for k = 1, 2, 3.  Centering only
    reparametrizes the regression (same fitted values) but keeps the normal
    equations well conditioned.
    """
    e = np.asarray(e, dtype=float)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise ValueError("basis requires probabilities strictly inside (0, 1)")
    d = e - e.mean()
    return np.column_stack([d, d**2, d**3])


def clever_covariate(z, e):
    """Derived regressor ``z / e - (1 - z) / (1 - e)``."""
    z = np.asarray(z, dtype=float)
    e = np.asarray(e, dtype=float)
    return z / e - (1.0 - z) / (1.0 - e)


def observed_info_se_treatment(outcome_fit, treatment_col=1):
    """Model-based standard error of the treatment coefficient.

    Square root of the corresponding diagonal entry of the fit covariance;
    the propensity scores entering the design are treated as fixed.
    """
    return float(np.sqrt(outcome_fit.cov[treatment_col, treatment_col]))


def fd_mean_score_cross_derivative(build_outcome_design, gamma, phi, sigma2, y, fd_step=1e-5):
    """Average derivative of the per-observation outcome score with respect
    to the propensity coefficients, by central finite differences with step
    ``fd_step * (1 + |coef|)`` per coordinate.

    Returns a (p_outcome, p_propensity) matrix.
    """
    gamma = np.asarray(gamma, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    probe = np.asarray(build_outcome_design(gamma), dtype=float)
    cross = np.empty((probe.shape[1], gamma.shape[0]))
    for j in range(gamma.shape[0]):
        h = fd_step * (1.0 + abs(gamma[j]))
        gp = gamma.copy()
        gp[j] += h
        gm = gamma.copy()
        gm[j] -= h
        xp = np.asarray(build_outcome_design(gp), dtype=float)
        xm = np.asarray(build_outcome_design(gm), dtype=float)
        up = xp.T @ (y - xp @ phi) / (n * sigma2)
        um = xm.T @ (y - xm @ phi) / (n * sigma2)
        cross[:, j] = (up - um) / (2.0 * h)
    return cross


def ps_adjusted_treatment_variance(
    outcome_fit,
    ps_fit,
    y,
    z,
    ps_design,
    build_outcome_design,
    treatment_col=1,
    fd_step=1e-5,
    include_ps_correction=True,
):
    """Sandwich variance of the treatment coefficient, propagating the
    first-stage propensity fit.

    The outcome-score/propensity-parameter cross derivative is obtained by
    central finite differences of the per-observation outcome score with
    respect to each propensity coefficient (step ``fd_step * (1 + |coef|)``),
    using ``build_outcome_design`` to rebuild the outcome design at perturbed
    coefficients.  All expectations are replaced by sample means.  With
    ``include_ps_correction=False`` the correction term is dropped and the
    result is the conventional robust (HC0) sandwich of the outcome fit.

    Returns the variance (not the standard error) of the treatment
    coefficient.
    """
    if not ps_fit.converged:
        raise ValueError("propensity fit has not converged")
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    phi = outcome_fit.phi
    sigma2 = outcome_fit.sigma2
    if sigma2 <= 0.0:
        return 0.0
    xout = np.asarray(build_outcome_design(ps_fit.gamma), dtype=float)
    n = xout.shape[0]
    resid = y - xout @ phi
    u_phi = xout * resid[:, None] / sigma2
    a_phi = xout.T @ xout / (n * sigma2)

    if include_ps_correction:
        bv = _as_values(ps_design)
        e = expit(bv @ ps_fit.gamma)
        u_gam = bv * (z - e)[:, None]
        a_gam = (bv * (e * (1.0 - e))[:, None]).T @ bv / n
        cross = fd_mean_score_cross_derivative(
            build_outcome_design, ps_fit.gamma, phi, sigma2, y, fd_step
        )
        try:
            b_mat = u_phi + u_gam @ np.linalg.solve(a_gam, cross.T)
        except np.linalg.LinAlgError:
            raise SingularInformationError(
                "propensity information matrix is singular"
            ) from None
    else:
        b_mat = u_phi

    v_b = b_mat.T @ b_mat / n
    tmp = np.linalg.solve(a_phi, v_b)
    avar = np.linalg.solve(a_phi, tmp.T).T
    return float(avar[treatment_col, treatment_col] / n)
