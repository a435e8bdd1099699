"""Estimators of the marginal causal contrast E(Y1) - E(Y0).

Thirteen estimators for a binary point treatment are provided, from the
naive arm-mean difference through doubly robust and Bayesian-bootstrap
procedures.  Every estimator shares the signature
``(data, spec, cfg, rng) -> EstimateResult`` and is a pure function of its
arguments: resampling draws come from sub-streams of ``rng``, so results
are reproducible and independent of any process-level RNG state.

Conventions used throughout:

* outcome designs are ``(1, z, s-columns, extras)``, so the treatment
  coefficient always sits at column ``Z_COL``;
* fitted treatment probabilities are clipped to
  ``[WEIGHT_CLIP, 1 - WEIGHT_CLIP]`` before entering any inverse weight,
  bounding single-observation weights by 1e6;
* nonparametric-bootstrap refits are computed as count-weighted fits on the
  original rows, which is likelihood-identical to refitting on the
  physically resampled data;
* intervals are Wald, ``point +/- 1.96 * se``, with the posterior standard
  deviation playing the role of the standard error for the
  resampling-based methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .glm import (
    DesignMatrix,
    NonConvergenceError,
    SingularDesignError,
    clever_covariate,
    cubic_ps_basis,
    fit_linear_weighted,
    fit_linear_weighted_many,
    fit_logistic_weighted,
    fit_logistic_weighted_many,
    observed_info_se_treatment,
    propensity,
    ps_adjusted_treatment_variance,
)
from .numerics import RngStream, _psd_factor, as_generator, expit

__all__ = [
    "Dataset",
    "CovariateSpec",
    "ResamplingConfig",
    "EstimateResult",
    "EstimatorError",
    "DrawFailureError",
    "ABS_STD_SCALE",
    "Z_COL",
    "WEIGHT_CLIP",
    "treatment_design",
    "plain_outcome_design",
    "ps_outcome_design",
    "clever_outcome_design",
    "dr_contrast",
    "naive",
    "g_formula_adjusted",
    "iptw",
    "or_ps_info",
    "or_ps_sandwich",
    "dr",
    "clever_covariate_regression",
    "or_iptw",
    "two_step_forward",
    "two_step_vardecomp",
    "joint_estimation",
    "importance_sampling",
    "importance_sampling_dr",
    "importance_sampling_value",
    "importance_sampling_dr_value",
    "bootstrap_se",
    "ESTIMATORS",
    "ESTIMATOR_ORDER",
    "ESTIMATOR_LABELS",
    "POINT_FUNCTIONS",
    "STREAM_KEYS",
]

Z_COL = 1
WEIGHT_CLIP = 1e-6
CI_MULT = 1.96

# Scaling that gives the absolute value of a standard normal unit variance.
ABS_STD_SCALE = 1.0 / math.sqrt(1.0 - 2.0 / math.pi)

IDENTITY = "identity"
ABS_STANDARDIZED = "abs_standardized"
_TRANSFORMS = (IDENTITY, ABS_STANDARDIZED)

# Sub-stream indices: estimators draw resampling weights and posterior noise
# from separate children of their stream so that procedures sharing weight
# draws (the two two-step variants) see identical weight sequences.
_SUB_WEIGHTS = 0
_SUB_NOISE = 1


class EstimatorError(Exception):
    """An estimator could not produce a valid result."""


class DrawFailureError(EstimatorError):
    """More than 10% of resampling draws failed."""


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class Dataset:
    """Observed sample: outcome, binary treatment, raw covariate matrix."""

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"covariates must be 2-d, got shape {x.shape}")
        if not (y.shape[0] == z.shape[0] == x.shape[0]):
            raise ValueError("y, z, x must have equal length")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError("missing or non-finite values are not supported")
        if not np.all((z == 0.0) | (z == 1.0)):
            raise ValueError("treatment must be binary in {0, 1}")
        if z.sum() == 0 or z.sum() == z.shape[0]:
            raise ValueError("both treatment arms must be non-empty")
        names = tuple(self.column_names) or tuple(
            f"x{j + 1}" for j in range(x.shape[1])
        )
        if len(names) != x.shape[1]:
            raise ValueError("column_names length does not match covariate count")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "Dataset":
        """Row subset (used by the physical bootstrap)."""
        return Dataset(self.y[idx], self.z[idx], self.x[idx], self.column_names)


@dataclass(frozen=True)
class CovariateSpec:
    """Which covariate columns (and transforms) form the outcome set and the
    treatment-assignment set.

    Each entry is ``(column_index, transform)`` with transform one of
    ``"identity"`` or ``"abs_standardized"`` (|x| divided by
    ``sqrt(1 - 2/pi)``).
    """

    s_columns: tuple[tuple[int, str], ...]
    b_columns: tuple[tuple[int, str], ...]

    def __post_init__(self):
        for cols in (self.s_columns, self.b_columns):
            for idx, transform in cols:
                if transform not in _TRANSFORMS:
                    raise ValueError(f"unknown transform {transform!r}")
                if idx < 0:
                    raise ValueError(f"negative column index {idx}")

    def _matrix(self, data: Dataset, cols):
        values = np.empty((data.n, len(cols)))
        labels = []
        for j, (idx, transform) in enumerate(cols):
            if idx >= data.x.shape[1]:
                raise ValueError(
                    f"column index {idx} out of range for {data.x.shape[1]} covariates"
                )
            col = data.x[:, idx]
            name = data.column_names[idx]
            if transform == ABS_STANDARDIZED:
                values[:, j] = np.abs(col) * ABS_STD_SCALE
                labels.append(f"abs({name})")
            else:
                values[:, j] = col
                labels.append(name)
        return values, labels

    def s_matrix(self, data: Dataset):
        return self._matrix(data, self.s_columns)

    def b_matrix(self, data: Dataset):
        return self._matrix(data, self.b_columns)


@dataclass(frozen=True)
class ResamplingConfig:
    """Monte Carlo settings: posterior draws, bootstrap resamples, weight
    stabilization (marginal treatment probability in the numerator)."""

    n_draws: int = 200
    n_boot: int = 200
    stabilize: bool = True

    def __post_init__(self):
        if self.n_draws < 2 or self.n_boot < 2:
            raise ValueError("n_draws and n_boot must both be at least 2")


@dataclass
class EstimateResult:
    """Point estimate, standard error, Wald interval, optional draws."""

    method: str
    point: float
    se: float
    ci: tuple[float, float]
    draws: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _result(method, point, se, draws=None, diagnostics=None):
    point = float(point)
    se = float(se)
    return EstimateResult(
        method=method,
        point=point,
        se=se,
        ci=(point - CI_MULT * se, point + CI_MULT * se),
        draws=draws,
        diagnostics=diagnostics or {},
    )


def _result_from_draws(method, draws, diagnostics=None):
    draws = np.asarray(draws, dtype=float)
    return _result(
        method,
        draws.mean(),
        draws.std(ddof=1),
        draws=draws,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# design construction


def treatment_design(data: Dataset, spec: CovariateSpec) -> DesignMatrix:
    """Propensity design ``(1, b-columns)``."""
    bvals, blabels = spec.b_matrix(data)
    values = np.column_stack([np.ones(data.n), bvals])
    return DesignMatrix(values, ["intercept", *blabels])


def plain_outcome_design(data: Dataset, spec: CovariateSpec) -> DesignMatrix:
    """Outcome design ``(1, z, s-columns)``."""
    svals, slabels = spec.s_matrix(data)
    values = np.column_stack([np.ones(data.n), data.z, svals])
    return DesignMatrix(values, ["intercept", "z", *slabels])


def ps_outcome_design(data: Dataset, spec: CovariateSpec, e) -> DesignMatrix:
    """Outcome design augmented with the centered cubic basis of the fitted
    treatment probabilities."""
    base = plain_outcome_design(data, spec)
    values = np.column_stack([base.values, cubic_ps_basis(e)])
    return DesignMatrix(values, [*base.column_labels, "ps^1", "ps^2", "ps^3"])


def clever_outcome_design(data: Dataset, spec: CovariateSpec, e) -> DesignMatrix:
    """Outcome design augmented with the derived inverse-probability
    regressor ``z/e - (1-z)/(1-e)``."""
    base = plain_outcome_design(data, spec)
    values = np.column_stack([base.values, clever_covariate(data.z, e)])
    return DesignMatrix(values, [*base.column_labels, "clever"])


def _clamp_ps(e):
    return np.clip(e, WEIGHT_CLIP, 1.0 - WEIGHT_CLIP)


def _ps_fit(data: Dataset, spec: CovariateSpec):
    """Fit the treatment model, tolerating non-convergence (flagged)."""
    design = treatment_design(data, spec)
    try:
        fit = fit_logistic_weighted(design, data.z)
    except NonConvergenceError as err:
        fit = err.last_fit
    e = propensity(fit, design)
    diag = {
        "ps_converged": bool(fit.converged),
        "ps_iterations": int(fit.iterations),
        "ps_separation": bool(fit.separation),
        "ps_coef": tuple(float(g) for g in fit.gamma),
    }
    return design, fit, e, diag


def _stabilizer(z, stabilize, weights=None):
    """Numerator of the treatment weights: the (weighted) marginal treated
    fraction when stabilizing, one otherwise."""
    if not stabilize:
        return 1.0, 1.0
    if weights is None:
        pbar = float(np.mean(z))
    else:
        pbar = float(np.sum(weights * z) / np.sum(weights))
    return pbar, 1.0 - pbar


def _treatment_weights(z, e, stabilize, xi=None):
    num1, num0 = _stabilizer(z, stabilize, weights=xi)
    return np.where(z == 1.0, num1 / e, num0 / (1.0 - e))


def dr_contrast(y, z, e, m_obs, m1, m0, weights):
    """Doubly robust contrast: inverse-probability-weighted residual term
    plus model-based standardization term, both averaged with ``weights``
    (which should sum to one).

    Returns ``(value, residual_term, model_term)``.
    """
    cc = clever_covariate(z, e)
    residual_term = float(np.sum(weights * (y - m_obs) * cc))
    model_term = float(np.sum(weights * (m1 - m0)))
    return residual_term + model_term, residual_term, model_term


# ---------------------------------------------------------------------------
# bootstrap plumbing


def _resample_index_matrix(z, n_boot, gen, max_tries=1000):
    """Index matrix of ``n_boot`` resamples, each containing both arms.

    Drawn as one block; single-arm rows are then redrawn sequentially (the
    estimand is undefined on them).  Returns ``(idx, n_redraws)``.
    """
    n = z.shape[0]
    idx = gen.integers(0, n, size=(n_boot, n))
    treated = z[idx].sum(axis=1)
    redraws = 0
    for row in np.flatnonzero((treated <= 0.0) | (treated >= n)):
        for _ in range(max_tries):
            candidate = gen.integers(0, n, size=n)
            redraws += 1
            t = z[candidate].sum()
            if 0.0 < t < n:
                idx[row] = candidate
                break
        else:
            raise EstimatorError("could not draw a resample containing both arms")
    return idx, redraws


def _bootstrap_counts(z, n_boot, gen):
    """Count-weight matrix for ``n_boot`` resamples (rows sum to n).

    Count-weighted refits are likelihood-identical to refitting on the
    physically resampled rows.
    """
    n = z.shape[0]
    idx, redraws = _resample_index_matrix(z, n_boot, gen)
    offsets = np.arange(n_boot)[:, None] * n
    counts = np.bincount((idx + offsets).ravel(), minlength=n_boot * n).reshape(
        n_boot, n
    )
    return counts.astype(float), redraws


def _check_draw_failures(n_failed, total, what):
    if n_failed > 0.1 * total:
        raise DrawFailureError(
            f"{n_failed} of {total} {what} failed (more than 10%)"
        )


def _batch_ps(design_values, z, weights, start=None):
    """Batched treatment-model refits; returns clipped probabilities."""
    batch = fit_logistic_weighted_many(design_values, z, weights, start=start)
    with np.errstate(invalid="ignore"):
        e = _clamp_ps(expit(np.where(np.isfinite(batch.gamma), batch.gamma, 0.0) @ design_values.T))
    return batch, e


def bootstrap_se(point_fn, data, spec, cfg, rng):
    """Nonparametric bootstrap standard error of an arbitrary point estimator.

    ``point_fn(data, spec, cfg) -> float`` is re-evaluated on ``cfg.n_boot``
    resamples drawn with replacement (single-arm resamples redrawn).  Errors
    on individual resamples are tolerated up to 10%.

    Returns ``(se, diagnostics)``.
    """
    gen = rng.child(_SUB_WEIGHTS).generator() if isinstance(rng, RngStream) else as_generator(rng)
    idx, redraws = _resample_index_matrix(data.z, cfg.n_boot, gen)
    points = []
    failures = 0
    for b in range(cfg.n_boot):
        try:
            points.append(float(point_fn(data.subset(idx[b]), spec, cfg)))
        except Exception:
            failures += 1
    _check_draw_failures(failures, cfg.n_boot, "bootstrap resamples")
    se = float(np.std(points, ddof=1))
    return se, {"boot_failures": failures, "boot_degenerate_redraws": redraws}


# ---------------------------------------------------------------------------
# simple estimators


def naive(data, spec=None, cfg=None, rng=None):
    """Unadjusted difference of arm means; two-sample standard error."""
    y1 = data.y[data.z == 1.0]
    y0 = data.y[data.z == 0.0]
    point = y1.mean() - y0.mean()
    se = math.sqrt(y1.var(ddof=1) / y1.shape[0] + y0.var(ddof=1) / y0.shape[0])
    return _result("naive", point, se)


def g_formula_adjusted(data, spec, cfg=None, rng=None):
    """Covariate-adjusted regression estimate: fit the outcome model by
    least squares and standardize over the empirical covariate distribution
    (equal to the treatment coefficient for this additive design)."""
    fit = fit_linear_weighted(plain_outcome_design(data, spec), data.y)
    point = fit.phi[Z_COL]
    se = observed_info_se_treatment(fit)
    return _result("adjusted", point, se)


def iptw(data, spec, cfg, rng):
    """Inverse probability of treatment weighting with unstabilized weights;
    bootstrap standard error refitting the treatment model per resample."""
    design, fit, e_raw, diag = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    y, z, n = data.y, data.z, data.n
    point = float(np.mean(y * z / e - y * (1.0 - z) / (1.0 - e)))
    diag["weight_min"] = float(np.min(np.where(z == 1.0, 1.0 / e, 1.0 / (1.0 - e))))
    diag["weight_max"] = float(np.max(np.where(z == 1.0, 1.0 / e, 1.0 / (1.0 - e))))

    gen = rng.child(_SUB_WEIGHTS).generator()
    counts, redraws = _bootstrap_counts(z, cfg.n_boot, gen)
    batch, e_b = _batch_ps(design.values, z, counts, start=fit.gamma)
    pts = np.sum(counts * (y * z / e_b - y * (1.0 - z) / (1.0 - e_b)), axis=1) / n
    ok = batch.converged
    _check_draw_failures(int((~ok).sum()), cfg.n_boot, "bootstrap refits")
    diag["boot_failures"] = int((~ok).sum())
    diag["boot_degenerate_redraws"] = redraws
    se = float(np.std(pts[ok], ddof=1))
    return _result("iptw", point, se, diagnostics=diag)


# ---------------------------------------------------------------------------
# outcome regression with propensity adjustment


def _fit_outcome_with_fallback(design, y, weights=None, droppable=()):
    """Least squares fit that falls back to dropping the discretionary
    ``droppable`` columns when the design is collinear.

    A rank deficiency can be attributed to any member of a collinear group,
    so on failure every droppable column is removed (they are the derived
    augmentation; the base columns are part of the estimator's contract).
    """
    try:
        return fit_linear_weighted(design, y, weights), design, ()
    except SingularDesignError:
        dropped = tuple(c for c in design.column_labels if c in droppable)
        if not dropped:
            raise
        keep = [j for j, lab in enumerate(design.column_labels) if lab not in dropped]
        reduced = DesignMatrix(
            design.values[:, keep], [design.column_labels[j] for j in keep]
        )
        return fit_linear_weighted(reduced, y, weights), reduced, dropped


@dataclass
class _OrPsParts:
    ps_design: DesignMatrix
    ps_fit: object
    e: np.ndarray
    outcome_design: DesignMatrix
    outcome_fit: object
    dropped: tuple
    diag: dict


def _or_ps_parts(data, spec):
    ps_design, ps_fit, e, diag = _ps_fit(data, spec)
    design = ps_outcome_design(data, spec, e)
    fit, used, dropped = _fit_outcome_with_fallback(
        design, data.y, droppable=("ps^1", "ps^2", "ps^3")
    )
    if dropped:
        diag["dropped_columns"] = list(dropped)
    return _OrPsParts(ps_design, ps_fit, e, used, fit, dropped, diag)


def or_ps_info(data, spec, cfg=None, rng=None):
    """Propensity-adjusted outcome regression with the model-based
    (observed information) standard error."""
    parts = _or_ps_parts(data, spec)
    point = parts.outcome_fit.phi[Z_COL]
    se = observed_info_se_treatment(parts.outcome_fit)
    return _result("or_ps_info", point, se, diagnostics=parts.diag)


def or_ps_sandwich(data, spec, cfg=None, rng=None):
    """Propensity-adjusted outcome regression with the sandwich standard
    error that propagates first-stage estimation of the propensity model."""
    parts = _or_ps_parts(data, spec)
    point = parts.outcome_fit.phi[Z_COL]
    full_labels = ps_outcome_design(data, spec, parts.e).column_labels
    kept_idx = [j for j, lab in enumerate(full_labels) if lab not in parts.dropped]

    def build(gamma):
        e = expit(parts.ps_design.values @ gamma)
        return ps_outcome_design(data, spec, e).values[:, kept_idx]

    variance = ps_adjusted_treatment_variance(
        parts.outcome_fit,
        parts.ps_fit,
        data.y,
        data.z,
        parts.ps_design,
        build,
        treatment_col=Z_COL,
    )
    return _result(
        "or_ps_sandwich", point, math.sqrt(max(variance, 0.0)), diagnostics=parts.diag
    )


# ---------------------------------------------------------------------------
# doubly robust estimators


def dr(data, spec, cfg, rng):
    """Semi-parametric doubly robust estimator: treatment-model fit on the
    b-columns, outcome model on the s-columns, residual reweighting plus
    standardization; bootstrap standard error refitting both models."""
    ps_design, ps_fit, e_raw, diag = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    outcome_design = plain_outcome_design(data, spec)
    outcome_fit = fit_linear_weighted(outcome_design, data.y)
    y, z, n = data.y, data.z, data.n

    phi = outcome_fit.phi
    m_obs = outcome_design.values @ phi
    m0 = m_obs - z * phi[Z_COL]
    m1 = m0 + phi[Z_COL]
    uniform = np.full(n, 1.0 / n)
    point, residual_term, model_term = dr_contrast(y, z, e, m_obs, m1, m0, uniform)
    diag["residual_term"] = residual_term
    diag["model_term"] = model_term

    gen = rng.child(_SUB_WEIGHTS).generator()
    counts, redraws = _bootstrap_counts(z, cfg.n_boot, gen)
    ps_batch, e_b = _batch_ps(ps_design.values, z, counts, start=ps_fit.gamma)
    lin_batch = fit_linear_weighted_many(outcome_design.values, y, counts)
    ok = ps_batch.converged & lin_batch.ok
    m_obs_b = lin_batch.phi @ outcome_design.values.T
    cc_b = z / e_b - (1.0 - z) / (1.0 - e_b)
    pts = (
        np.sum(counts * (y - m_obs_b) * cc_b, axis=1) / n
        + lin_batch.phi[:, Z_COL]
    )
    _check_draw_failures(int((~ok).sum()), cfg.n_boot, "bootstrap refits")
    diag["boot_failures"] = int((~ok).sum())
    diag["boot_degenerate_redraws"] = redraws
    se = float(np.std(pts[ok], ddof=1))
    return _result("dr", point, se, diagnostics=diag)


def clever_covariate_regression(data, spec, cfg, rng):
    """Outcome regression augmented with the derived inverse-probability
    regressor, standardized over the sample; identical to the doubly robust
    estimator with this outcome model.  Bootstrap standard error."""
    ps_design, ps_fit, e_raw, diag = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    y, z, n = data.y, data.z, data.n
    design = clever_outcome_design(data, spec, e)
    fit, used, dropped = _fit_outcome_with_fallback(design, y, droppable=("clever",))
    if dropped:
        diag["dropped_columns"] = list(dropped)
    # Standardization evaluates the derived regressor at both arms: the
    # between-arm difference of z/e - (1-z)/(1-e) is 1/e + 1/(1-e).
    correction = float(np.mean(1.0 / e + 1.0 / (1.0 - e)))
    diag["max_abs_clever"] = float(np.max(np.abs(clever_covariate(z, e))))
    if dropped:
        point = fit.phi[Z_COL]
    else:
        point = fit.phi[Z_COL] + fit.phi[-1] * correction

    gen = rng.child(_SUB_WEIGHTS).generator()
    counts, redraws = _bootstrap_counts(z, cfg.n_boot, gen)
    ps_batch, e_b = _batch_ps(ps_design.values, z, counts, start=ps_fit.gamma)
    base = plain_outcome_design(data, spec).values
    if dropped:
        # Point fit fell back to the plain design; resample fits follow.
        lin_batch = fit_linear_weighted_many(base, y, counts)
        pts = lin_batch.phi[:, Z_COL]
    else:
        m = cfg.n_boot
        designs = np.empty((m, n, base.shape[1] + 1))
        designs[:, :, :-1] = base
        designs[:, :, -1] = z / e_b - (1.0 - z) / (1.0 - e_b)
        lin_batch = fit_linear_weighted_many(designs, y, counts)
        corr_b = np.sum(counts * (1.0 / e_b + 1.0 / (1.0 - e_b)), axis=1) / n
        pts = lin_batch.phi[:, Z_COL] + lin_batch.phi[:, -1] * corr_b
    ok = ps_batch.converged & lin_batch.ok
    _check_draw_failures(int((~ok).sum()), cfg.n_boot, "bootstrap refits")
    diag["boot_failures"] = int((~ok).sum())
    diag["boot_degenerate_redraws"] = redraws
    se = float(np.std(pts[ok], ddof=1))
    return _result("clever", point, se, diagnostics=diag)


def or_iptw(data, spec, cfg, rng):
    """Outcome regression fit by inverse-probability-weighted least squares,
    standardized over the empirical covariate distribution; bootstrap
    standard error refitting both models."""
    ps_design, ps_fit, e_raw, diag = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    y, z, n = data.y, data.z, data.n
    w = _treatment_weights(z, e, cfg.stabilize)
    diag["weight_min"] = float(w.min())
    diag["weight_max"] = float(w.max())
    outcome_design = plain_outcome_design(data, spec)
    fit = fit_linear_weighted(outcome_design, y, weights=w)
    point = fit.phi[Z_COL]

    gen = rng.child(_SUB_WEIGHTS).generator()
    counts, redraws = _bootstrap_counts(z, cfg.n_boot, gen)
    ps_batch, e_b = _batch_ps(ps_design.values, z, counts, start=ps_fit.gamma)
    if cfg.stabilize:
        pbar_b = (counts @ z) / n
        w_b = np.where(z == 1.0, pbar_b[:, None] / e_b, (1.0 - pbar_b[:, None]) / (1.0 - e_b))
    else:
        w_b = np.where(z == 1.0, 1.0 / e_b, 1.0 / (1.0 - e_b))
    lin_batch = fit_linear_weighted_many(outcome_design.values, y, counts * w_b)
    ok = ps_batch.converged & lin_batch.ok
    pts = lin_batch.phi[:, Z_COL]
    _check_draw_failures(int((~ok).sum()), cfg.n_boot, "bootstrap refits")
    diag["boot_failures"] = int((~ok).sum())
    diag["boot_degenerate_redraws"] = redraws
    se = float(np.std(pts[ok], ddof=1))
    return _result("or_iptw", point, se, diagnostics=diag)


# ---------------------------------------------------------------------------
# two-step posterior sampling


def _plain_ps_start(ps_design, z):
    """Unweighted treatment-model estimate used to warm-start reweighted refits."""
    try:
        return fit_logistic_weighted(ps_design, z).gamma
    except NonConvergenceError as err:
        return err.last_fit.gamma


def _dirichlet_rows(gen, m, n):
    g = np.maximum(gen.standard_exponential((m, n)), 1e-300)
    return g / g.sum(axis=1, keepdims=True)


def _with_cubic_basis(base, e_rows):
    """Stack per-draw outcome designs: shared base plus centered cubic basis
    of each row of fitted probabilities."""
    m, n = e_rows.shape
    d = e_rows - e_rows.mean(axis=1, keepdims=True)
    designs = np.empty((m, n, base.shape[1] + 3))
    designs[:, :, : base.shape[1]] = base
    designs[:, :, base.shape[1]] = d
    designs[:, :, base.shape[1] + 1] = d**2
    designs[:, :, base.shape[1] + 2] = d**3
    return designs


def _batch_cholesky(cov, ok):
    """Per-draw PSD factors with a per-row fallback; updates ``ok``."""
    m, p, _ = cov.shape
    safe = np.where(ok[:, None, None], cov, np.eye(p)[None])
    try:
        return np.linalg.cholesky(safe)
    except np.linalg.LinAlgError:
        factors = np.empty_like(safe)
        for k in range(m):
            if not ok[k]:
                factors[k] = np.eye(p)
                continue
            try:
                factors[k] = _psd_factor(safe[k])
            except Exception:
                ok[k] = False
                factors[k] = np.eye(p)
        return factors


def _two_step_draws(data, spec, cfg, rng):
    """Weighted-likelihood-bootstrap draws of the treatment model followed by
    conditional normal draws of the outcome model.

    Returns per-draw arrays (restricted to successful draws): the plug-in
    treatment contrast, its model-based variance, the contrast under the
    drawn outcome coefficients, and diagnostics.
    """
    y, z, n = data.y, data.z, data.n
    m = cfg.n_draws
    gen_w = rng.child(_SUB_WEIGHTS).generator()
    gen_noise = rng.child(_SUB_NOISE).generator()

    xi = _dirichlet_rows(gen_w, m, n)
    ps_design = treatment_design(data, spec)
    ps_batch = fit_logistic_weighted_many(
        ps_design.values, z, xi, start=_plain_ps_start(ps_design, z)
    )
    with np.errstate(invalid="ignore"):
        e = expit(np.where(np.isfinite(ps_batch.gamma), ps_batch.gamma, 0.0) @ ps_design.values.T)
    base = plain_outcome_design(data, spec).values
    designs = _with_cubic_basis(base, e)
    lin_batch = fit_linear_weighted_many(designs, y, weights=None)
    ok = ps_batch.converged & lin_batch.ok

    contrast_hat = lin_batch.phi[:, Z_COL]
    model_var = lin_batch.cov[:, Z_COL, Z_COL]

    factors = _batch_cholesky(lin_batch.cov, ok)
    noise = gen_noise.standard_normal((m, designs.shape[2]))
    phi_draw = lin_batch.phi + np.matmul(factors, noise[:, :, None])[:, :, 0]
    contrast_draw = phi_draw[:, Z_COL]

    n_failed = int((~ok).sum())
    _check_draw_failures(n_failed, m, "posterior draws")
    diag = {
        "draw_failures": n_failed,
        "ps_coef": tuple(float(g) for g in ps_batch.gamma[0]),
    }
    return contrast_hat[ok], model_var[ok], contrast_draw[ok], diag


def two_step_forward(data, spec, cfg, rng):
    """Two-step posterior: forward sampling.  Treatment-model uncertainty by
    weighted likelihood bootstrap, outcome-model uncertainty by a normal
    draw around the conditional fit; point and standard error are the mean
    and standard deviation of the sampled contrasts."""
    _, _, contrast_draw, diag = _two_step_draws(data, spec, cfg, rng)
    return _result_from_draws("two_step_forward", contrast_draw, diagnostics=diag)


def two_step_vardecomp(data, spec, cfg, rng):
    """Two-step posterior with the variance decomposition formula: the mean
    model-based variance plus the variance of the plug-in contrast across
    treatment-model draws."""
    contrast_hat, model_var, _, diag = _two_step_draws(data, spec, cfg, rng)
    return _vardecomp_result(contrast_hat, model_var, diag)


def _vardecomp_result(contrast_hat, model_var, diag):
    point = float(contrast_hat.mean())
    variance = float(model_var.mean() + contrast_hat.var(ddof=1))
    diag = dict(diag)
    diag["mean_model_variance"] = float(model_var.mean())
    diag["between_draw_variance"] = float(contrast_hat.var(ddof=1))
    return _result("two_step_vardecomp", point, math.sqrt(variance), diagnostics=diag)


def two_step_pair(data, spec, cfg, rng):
    """Both two-step variants from one set of draws.

    The two variants are defined on the same treatment-model draws; this
    helper computes the draws once and returns
    ``(forward_result, vardecomp_result)``, identical to calling the two
    estimators separately with the same stream.
    """
    contrast_hat, model_var, contrast_draw, diag = _two_step_draws(data, spec, cfg, rng)
    forward = _result_from_draws("two_step_forward", contrast_draw, diagnostics=diag)
    return forward, _vardecomp_result(contrast_hat, model_var, diag)


# ---------------------------------------------------------------------------
# joint estimation


def _central_diff_grad(fun, x, rel_step=1e-6):
    grad = np.empty_like(x)
    for j in range(x.shape[0]):
        h = rel_step * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        grad[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


def _central_diff_hessian(fun, x, rel_step=1e-5):
    p = x.shape[0]
    steps = rel_step * (1.0 + np.abs(x))
    hess = np.empty((p, p))
    f0 = fun(x)
    for j in range(p):
        xp = x.copy()
        xp[j] += steps[j]
        xm = x.copy()
        xm[j] -= steps[j]
        hess[j, j] = (fun(xp) - 2.0 * f0 + fun(xm)) / steps[j] ** 2
    for j in range(p):
        for k in range(j + 1, p):
            xpp = x.copy()
            xpp[[j, k]] += steps[[j, k]]
            xpm = x.copy()
            xpm[j] += steps[j]
            xpm[k] -= steps[k]
            xmp = x.copy()
            xmp[j] -= steps[j]
            xmp[k] += steps[k]
            xmm = x.copy()
            xmm[[j, k]] -= steps[[j, k]]
            hess[j, k] = hess[k, j] = (fun(xpp) - fun(xpm) - fun(xmp) + fun(xmm)) / (
                4.0 * steps[j] * steps[k]
            )
    return hess


def joint_estimation(data, spec, cfg, rng, max_outer=500, tol=1e-8):
    """Single joint fit of the outcome and treatment models (the fitted
    treatment probabilities feed the outcome design, and both likelihood
    terms are maximized together), followed by normal posterior draws around
    the joint optimum.

    The outcome block is closed-form least squares given the treatment
    coefficients, so it is concentrated out and the treatment block is
    maximized by quasi-Newton with central-difference gradients; the
    Gaussian variance is profiled throughout.  The search is repeated until
    the joint log-likelihood improves by less than ``tol``.  The draw
    covariance is the inverse central-difference Hessian of the profiled
    joint log-likelihood at the optimum.
    """
    y, z, n = data.y, data.z, data.n
    ps_design = treatment_design(data, spec)
    bvals = ps_design.values
    base = plain_outcome_design(data, spec).values
    p_base = base.shape[1]
    p_phi = p_base + 3

    design_buf = np.empty((n, p_phi))
    design_buf[:, :p_base] = base

    def outcome_fit_at(gamma):
        e = expit(bvals @ gamma)
        d = e - e.mean()
        design_buf[:, p_base] = d
        design_buf[:, p_base + 1] = d * d
        design_buf[:, p_base + 2] = d * d * d
        a = design_buf.T @ design_buf
        phi = np.linalg.solve(a, design_buf.T @ y)
        return phi, design_buf

    def profile_loglik(phi, gamma):
        e = expit(bvals @ gamma)
        d = e - e.mean()
        resid = y - base @ phi[:p_base] - d * (
            phi[p_base] + d * (phi[p_base + 1] + d * phi[p_base + 2])
        )
        s2 = max(float(resid @ resid) / n, 1e-300)
        gauss = -0.5 * n * (math.log(2.0 * math.pi * s2) + 1.0)
        bern = float(z @ np.log(e) + (1.0 - z) @ np.log1p(-e))
        return gauss + bern

    # The outcome block is closed form given the treatment coefficients, so
    # it is folded into the treatment-block objective: the quasi-Newton
    # search runs over the treatment coefficients alone, with the outcome
    # coefficients re-solved inside every evaluation.
    def concentrated(gamma):
        e = expit(bvals @ gamma)
        d = e - e.mean()
        design_buf[:, p_base] = d
        design_buf[:, p_base + 1] = d * d
        design_buf[:, p_base + 2] = d * d * d
        a = design_buf.T @ design_buf
        phi = np.linalg.solve(a, design_buf.T @ y)
        resid = y - design_buf @ phi
        s2 = max(float(resid @ resid) / n, 1e-300)
        gauss = -0.5 * n * (math.log(2.0 * math.pi * s2) + 1.0)
        bern = float(z @ np.log(e) + (1.0 - z) @ np.log1p(-e))
        return gauss + bern

    def neg_concentrated(gamma):
        return -concentrated(gamma)

    try:
        gamma = fit_logistic_weighted(ps_design, z).gamma
    except NonConvergenceError as err:
        gamma = err.last_fit.gamma
    loglik = concentrated(gamma)
    trace = [loglik]
    converged = False
    for _ in range(max_outer):
        res = minimize(
            neg_concentrated,
            gamma,
            jac=lambda g: _central_diff_grad(neg_concentrated, g),
            method="BFGS",
            options={"gtol": 3e-7, "maxiter": 200},
        )
        if -res.fun >= loglik:
            gamma = res.x
        new_loglik = concentrated(gamma)
        trace.append(new_loglik)
        if abs(new_loglik - loglik) < tol:
            converged = True
            loglik = new_loglik
            break
        loglik = new_loglik
    if not converged:
        raise EstimatorError(
            f"joint optimization did not converge in {max_outer} outer iterations; "
            f"last improvements {np.diff(trace[-4:])}"
        )
    phi, _ = outcome_fit_at(gamma)

    theta = np.concatenate([phi, gamma])

    def loglik_theta(t):
        return profile_loglik(t[:p_phi], t[p_phi:])

    hessian = _central_diff_hessian(loglik_theta, theta)
    info = -hessian
    jitter_used = 0.0
    for jitter in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            low = np.linalg.cholesky(info + jitter * np.eye(info.shape[0]))
            jitter_used = jitter
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise EstimatorError("joint information matrix is not positive definite")
    identity = np.eye(info.shape[0])
    low_inv = np.linalg.solve(low, identity)
    cov = low_inv.T @ low_inv

    gen_noise = rng.child(_SUB_NOISE).generator()
    factor = _psd_factor(cov)
    noise = gen_noise.standard_normal((cfg.n_draws, theta.shape[0]))
    contrast_draws = theta[Z_COL] + noise @ factor.T[:, Z_COL]
    diag = {
        "outer_iterations": len(trace) - 1,
        "loglik": loglik,
        "hessian_jitter": jitter_used,
        "ps_coef": tuple(float(g) for g in gamma),
    }
    return _result_from_draws("joint", contrast_draws, diagnostics=diag)


# ---------------------------------------------------------------------------
# importance sampling (Bayesian bootstrap with treatment weights)


def _wlb_batch(data, spec, cfg, rng, weight_outcome_by_w):
    """Per-draw weighted-likelihood-bootstrap fits of both models.

    The treatment model is always fit with the Dirichlet weights alone.
    The outcome fit additionally carries the inverse treatment weights when
    ``weight_outcome_by_w`` is set (the importance-sampling regression
    estimator); the doubly robust variant plugs in the plain
    Dirichlet-weighted outcome fit, whose correction term then does the
    confounding adjustment.
    """
    y, z, n = data.y, data.z, data.n
    m = cfg.n_draws
    gen_w = rng.child(_SUB_WEIGHTS).generator()
    xi = _dirichlet_rows(gen_w, m, n)
    ps_design = treatment_design(data, spec)
    ps_batch = fit_logistic_weighted_many(
        ps_design.values, z, xi, start=_plain_ps_start(ps_design, z)
    )
    with np.errstate(invalid="ignore"):
        e = _clamp_ps(expit(np.where(np.isfinite(ps_batch.gamma), ps_batch.gamma, 0.0) @ ps_design.values.T))
    if cfg.stabilize:
        pbar = (xi * z).sum(axis=1)
        w = np.where(z == 1.0, pbar[:, None] / e, (1.0 - pbar[:, None]) / (1.0 - e))
    else:
        w = np.where(z == 1.0, 1.0 / e, 1.0 / (1.0 - e))
    outcome_design = plain_outcome_design(data, spec)
    outcome_weights = xi * w if weight_outcome_by_w else xi
    lin_batch = fit_linear_weighted_many(outcome_design.values, y, outcome_weights)
    ok = ps_batch.converged & lin_batch.ok
    diag = {
        "draw_failures": int((~ok).sum()),
        "weight_max": float(np.max(w[ok])) if ok.any() else float("nan"),
        "ps_coef": tuple(float(g) for g in ps_batch.gamma[0]),
    }
    _check_draw_failures(int((~ok).sum()), m, "posterior draws")
    return xi, e, lin_batch.phi, outcome_design.values, ok, diag


def importance_sampling(data, spec, cfg, rng):
    """Bayesian-bootstrap estimator of the contrast: per Dirichlet-weight
    draw, reweight the outcome likelihood by the treatment weights, refit
    both models, and standardize over the weighted empirical covariate
    distribution.  Point and standard error are the mean and standard
    deviation over draws."""
    xi, e, phi, design_values, ok, diag = _wlb_batch(
        data, spec, cfg, rng, weight_outcome_by_w=True
    )
    draws = phi[ok, Z_COL]
    return _result_from_draws("is", draws, diagnostics=diag)


def importance_sampling_dr(data, spec, cfg, rng):
    """Doubly robust Bayesian-bootstrap estimator: per draw, the weighted
    residual term plus the weighted standardization term, with both model
    plug-ins refit under the draw's Dirichlet weights."""
    y, z = data.y, data.z
    xi, e, phi, design_values, ok, diag = _wlb_batch(
        data, spec, cfg, rng, weight_outcome_by_w=False
    )
    m_obs = phi @ design_values.T
    cc = z / e - (1.0 - z) / (1.0 - e)
    residual_terms = np.sum(xi * (y - m_obs) * cc, axis=1)
    draws = residual_terms[ok] + phi[ok, Z_COL]
    diag["mean_abs_residual_term"] = float(np.mean(np.abs(residual_terms[ok])))
    return _result_from_draws("is_dr", draws, diagnostics=diag)


def importance_sampling_value(data, spec, xi, stabilize=True):
    """Contrast for one explicit weight vector (single-draw version of
    :func:`importance_sampling`)."""
    xi = np.asarray(xi, dtype=float)
    ps_design = treatment_design(data, spec)
    ps_fit = fit_logistic_weighted(ps_design, data.z, weights=xi)
    e = _clamp_ps(propensity(ps_fit, ps_design))
    w = _treatment_weights(data.z, e, stabilize, xi=xi)
    outcome_fit = fit_linear_weighted(plain_outcome_design(data, spec), data.y, weights=xi * w)
    return float(outcome_fit.phi[Z_COL])


def importance_sampling_dr_value(data, spec, xi, stabilize=True, importance_weight_outcome=False):
    """Doubly robust contrast for one explicit weight vector (single-draw
    version of :func:`importance_sampling_dr`).

    By default the outcome fit carries the draw weights alone, as in the
    production estimator; at uniform weights this reduces exactly to the
    frequentist doubly robust estimator.  ``importance_weight_outcome=True``
    additionally multiplies in the inverse treatment weights.

    Returns ``(value, residual_term, model_term)``.
    """
    xi = np.asarray(xi, dtype=float)
    y, z = data.y, data.z
    ps_design = treatment_design(data, spec)
    ps_fit = fit_logistic_weighted(ps_design, z, weights=xi)
    e = _clamp_ps(propensity(ps_fit, ps_design))
    w = _treatment_weights(z, e, stabilize, xi=xi)
    outcome_weights = xi * w if importance_weight_outcome else xi
    outcome_design = plain_outcome_design(data, spec)
    outcome_fit = fit_linear_weighted(outcome_design, y, weights=outcome_weights)
    phi = outcome_fit.phi
    m_obs = outcome_design.values @ phi
    m0 = m_obs - z * phi[Z_COL]
    m1 = m0 + phi[Z_COL]
    return dr_contrast(y, z, e, m_obs, m1, m0, xi)


# ---------------------------------------------------------------------------
# registry


ESTIMATOR_ORDER = [
    "naive",
    "adjusted",
    "iptw",
    "or_ps_info",
    "or_ps_sandwich",
    "dr",
    "clever",
    "or_iptw",
    "two_step_forward",
    "two_step_vardecomp",
    "joint",
    "is",
    "is_dr",
]

ESTIMATORS = {
    "naive": naive,
    "adjusted": g_formula_adjusted,
    "iptw": iptw,
    "or_ps_info": or_ps_info,
    "or_ps_sandwich": or_ps_sandwich,
    "dr": dr,
    "clever": clever_covariate_regression,
    "or_iptw": or_iptw,
    "two_step_forward": two_step_forward,
    "two_step_vardecomp": two_step_vardecomp,
    "joint": joint_estimation,
    "is": importance_sampling,
    "is_dr": importance_sampling_dr,
}

ESTIMATOR_LABELS = {
    "naive": "Naive",
    "adjusted": "Adjusted",
    "iptw": "IPTW",
    "or_ps_info": "OR/PS (obs. information)",
    "or_ps_sandwich": "OR/PS (adj. sandwich)",
    "dr": "DR",
    "clever": "Clever covariate",
    "or_iptw": "OR/IPTW",
    "two_step_forward": "Two-step (forward sampling)",
    "two_step_vardecomp": "Two-step (variance decomposition)",
    "joint": "Joint estimation",
    "is": "Importance sampling",
    "is_dr": "Importance sampling/DR",
}

# Sub-stream keys per estimator.  The two two-step variants share a key so
# that they see identical treatment-model weight draws.
STREAM_KEYS = {
    "naive": 1,
    "adjusted": 2,
    "iptw": 3,
    "or_ps_info": 4,
    "or_ps_sandwich": 5,
    "dr": 6,
    "clever": 7,
    "or_iptw": 8,
    "two_step_forward": 9,
    "two_step_vardecomp": 9,
    "joint": 10,
    "is": 11,
    "is_dr": 12,
}


def _naive_point(data, spec, cfg):
    y1 = data.y[data.z == 1.0]
    y0 = data.y[data.z == 0.0]
    return float(y1.mean() - y0.mean())


def _adjusted_point(data, spec, cfg):
    return float(fit_linear_weighted(plain_outcome_design(data, spec), data.y).phi[Z_COL])


def _iptw_point(data, spec, cfg):
    _, _, e_raw, _ = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    y, z = data.y, data.z
    return float(np.mean(y * z / e - y * (1.0 - z) / (1.0 - e)))


def _or_ps_point(data, spec, cfg):
    return float(_or_ps_parts(data, spec).outcome_fit.phi[Z_COL])


def _dr_point(data, spec, cfg):
    _, _, e_raw, _ = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    design = plain_outcome_design(data, spec)
    fit = fit_linear_weighted(design, data.y)
    phi = fit.phi
    m_obs = design.values @ phi
    m0 = m_obs - data.z * phi[Z_COL]
    m1 = m0 + phi[Z_COL]
    value, _, _ = dr_contrast(
        data.y, data.z, e, m_obs, m1, m0, np.full(data.n, 1.0 / data.n)
    )
    return value


def _clever_point(data, spec, cfg):
    _, _, e_raw, _ = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    design = clever_outcome_design(data, spec, e)
    fit, _, dropped = _fit_outcome_with_fallback(design, data.y, droppable=("clever",))
    if dropped:
        return float(fit.phi[Z_COL])
    correction = float(np.mean(1.0 / e + 1.0 / (1.0 - e)))
    return float(fit.phi[Z_COL] + fit.phi[-1] * correction)


def _or_iptw_point(data, spec, cfg):
    _, _, e_raw, _ = _ps_fit(data, spec)
    e = _clamp_ps(e_raw)
    w = _treatment_weights(data.z, e, cfg.stabilize)
    fit = fit_linear_weighted(plain_outcome_design(data, spec), data.y, weights=w)
    return float(fit.phi[Z_COL])


POINT_FUNCTIONS = {
    "naive": _naive_point,
    "adjusted": _adjusted_point,
    "iptw": _iptw_point,
    "or_ps_info": _or_ps_point,
    "or_ps_sandwich": _or_ps_point,
    "dr": _dr_point,
    "clever": _clever_point,
    "or_iptw": _or_iptw_point,
}
