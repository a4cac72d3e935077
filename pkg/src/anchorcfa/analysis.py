"""Post-fit analysis: threshold gaps, latent means, factor scores, and the
implied group difference in a policy outcome.

Threshold differences are focal minus reference, computed directly on the
fitted cut points with no post-estimation rescaling.  The policy step
offers the two estimation routes discussed for latent-trait regressions:
``two_step`` extracts posterior-mean factor scores and runs least squares,
``joint`` folds the outcome into the marginal likelihood so measurement
uncertainty propagates into the slope.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import model as m
from .estimation import NonConvergenceError, fit
from .likelihood import QuadratureRule, group_log_posterior
from .model import ROLE_ANCHOR, ROLE_SCALE

MIN_GROUP_ROWS_FOR_GROUP_BETA = 30


class AnalysisError(ValueError):
    """Invalid post-fit analysis request."""


@dataclass(frozen=True)
class ThresholdDiffRow:
    item: str
    index: int  # 1-based threshold index
    focal: float
    reference: float
    diff: float
    se: float
    role: str


@dataclass(frozen=True)
class ThresholdDiffTable:
    rows: tuple[ThresholdDiffRow, ...]
    focal_group: str
    reference_group: str


def _focal_index(fit_result, focal_group):
    groups = fit_result.params.groups
    ref = groups.index(fit_result.spec_echo.reference_group)
    if focal_group is None:
        others = [i for i in range(len(groups)) if i != ref]
        if not others:
            raise AnalysisError("threshold differences require >= 2 groups")
        return ref, others[0]
    if focal_group not in groups:
        raise AnalysisError(f"unknown focal group {focal_group!r}")
    foc = groups.index(focal_group)
    if foc == ref:
        raise AnalysisError("focal group equals the reference group")
    return ref, foc


def threshold_differences(fit_result, focal_group=None):
    """Per-(item, threshold) focal-minus-reference cut-point differences.

    Positive entries mean the focal group needs a higher trait level to
    endorse the category.  Joint standard errors are filled in when the fit
    carries a parameter covariance; tied thresholds have difference exactly
    zero.
    """
    ref, foc = _focal_index(fit_result, focal_group)
    params = fit_result.params
    spec = fit_result.spec_echo
    cov = fit_result.covariance
    coord_pos = {c: i for i, c in enumerate(fit_result.free_coords)}
    ties = fit_result.constraints.tie_map()
    rows = []
    for j, name in enumerate(params.item_names):
        role = ROLE_ANCHOR if name in spec.anchor_set else ROLE_SCALE
        for k in range(len(params.thresholds[ref][j])):
            tf = float(params.thresholds[foc][j][k])
            tr = float(params.thresholds[ref][j][k])
            se = np.nan
            cf = (m.THRESHOLD, foc, j, k)
            cr = (m.THRESHOLD, ref, j, k)
            if ties.get(cf) == cr:
                se = 0.0
            elif cov is not None and cf in coord_pos and cr in coord_pos:
                a, b = coord_pos[cf], coord_pos[cr]
                var = cov[a, a] + cov[b, b] - 2.0 * cov[a, b]
                se = float(np.sqrt(var)) if var > 0 else np.nan
            rows.append(
                ThresholdDiffRow(
                    item=name, index=k + 1, focal=tf, reference=tr,
                    diff=tf - tr, se=se, role=role,
                )
            )
    return ThresholdDiffTable(
        rows=tuple(rows),
        focal_group=params.groups[foc],
        reference_group=params.groups[ref],
    )


def latent_gap(fit_result, focal_group=None):
    """Focal latent mean relative to the reference (fixed at zero).

    Only identified when the focal mean is a free coordinate, i.e. under
    scalar or anchor-based partial scalar constraints.
    """
    ref, foc = _focal_index(fit_result, focal_group)
    coord = (m.MEAN, foc)
    if coord not in set(fit_result.free_coords):
        raise AnalysisError("latent mean not identified at this level")
    gap = float(fit_result.params.latent_mean[foc])
    se = np.nan
    if fit_result.standard_errors is not None:
        se = float(fit_result.standard_errors.get(coord, np.nan))
    return gap, se


def eap_scores(fit_result, dataset, rule=None):
    """Posterior mean and SD of the trait for every respondent.

    Respondents with no observed responses fall back to their group prior
    (mean and square-root variance).  Output follows input row order.
    """
    if not fit_result.converged:
        raise AnalysisError("factor scores require a converged fit")
    params = fit_result.params
    spec = fit_result.spec_echo
    if rule is None:
        rule = QuadratureRule.gauss_hermite(spec.quadrature_points)
    cols = np.array([dataset.item_index(n) for n in params.item_names])
    n = dataset.n_rows
    scores = np.empty(n)
    sds = np.empty(n)
    for g in range(len(dataset.groups)):
        sel = np.nonzero(dataset.group_index == g)[0]
        if sel.size == 0:
            continue
        codes = dataset.codes[np.ix_(sel, cols)]
        traits = rule.mapped(float(params.latent_mean[g]), float(params.latent_variance[g]))
        _, post = group_log_posterior(
            codes,
            params.loadings[g],
            params.thresholds[g],
            params.residual_variance[g],
            float(params.latent_mean[g]),
            float(params.latent_variance[g]),
            rule,
        )
        mean = post @ traits
        second = post @ (traits * traits)
        scores[sel] = mean
        sds[sel] = np.sqrt(np.maximum(second - mean * mean, 0.0))
    return scores, sds


@dataclass(frozen=True)
class PolicyEffect:
    """Implied group difference in an outcome through the latent trait.

    ``policy_gap`` is exactly ``beta * trait_gap``; ``beta`` is the pooled
    slope (when group-specific slopes were estimated it is their
    outcome-complete-row weighted average, reported alongside the per-group
    values).
    """

    outcome: str
    mode: str
    beta: float
    beta_se: float
    trait_gap: float
    trait_gap_se: float
    policy_gap: float
    policy_gap_se: float
    beta_by_group: dict | None
    pooled: bool
    se_assumes_independence: bool
    notes: tuple[str, ...] = ()


def _ols(y, X, column_names):
    n, p = X.shape
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        offenders = []
        base = X[:, :1]
        for c in range(1, p):
            cand = np.hstack([base, X[:, c : c + 1]])
            if np.linalg.matrix_rank(cand) == base.shape[1]:
                offenders.append(column_names[c])
            else:
                base = cand
        raise AnalysisError(f"collinear regressors: {offenders}")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(n - p, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return coef, cov


def _outcome_complete(dataset, use_covariates):
    if dataset.outcome is None:
        raise AnalysisError("dataset has no outcome column")
    keep = ~np.isnan(dataset.outcome)
    if use_covariates and dataset.covariates is not None:
        keep &= ~np.isnan(dataset.covariates).any(axis=1)
    return keep


def structural_effect(dataset, spec, mode="joint", focal_group=None,
                      use_covariates=True):
    """Outcome slope on the trait and the implied policy difference.

    ``two_step``: fit the measurement model, extract posterior-mean scores,
    regress the outcome on them (plus covariates) by least squares.
    ``joint``: include the outcome in the marginal likelihood and estimate
    the slope simultaneously with the measurement parameters.

    Group-specific slopes are estimated when every group has at least 30
    outcome-complete rows; otherwise a pooled slope is reported with a
    warning note.  The primary ``beta`` is always the pooled value so that
    ``policy_gap = beta * trait_gap`` holds exactly.
    """
    if mode not in ("two_step", "joint"):
        raise AnalysisError(f"unknown mode {mode!r}")
    if not use_covariates and dataset.covariates is not None:
        dataset = dataclasses.replace(dataset, covariates=None, covariate_names=())
    keep = _outcome_complete(dataset, use_covariates)
    notes = []
    group_rows = np.bincount(dataset.group_index[keep], minlength=len(dataset.groups))
    group_specific = bool((group_rows >= MIN_GROUP_ROWS_FOR_GROUP_BETA).all())
    if not group_specific:
        notes.append(
            "fewer than 30 outcome-complete rows in some group; "
            "group-specific slopes not estimated"
        )
    covariates = dataset.covariates
    names = list(dataset.covariate_names) if covariates is not None else []

    if mode == "two_step":
        meas_spec = dataclasses.replace(spec, include_structural=False)
        meas = fit(dataset, meas_spec, compute_se=True)
        if not meas.converged:
            raise NonConvergenceError("measurement model did not converge")
        scores, _ = eap_scores(meas, dataset)
        y = dataset.outcome[keep]
        cols = [np.ones(keep.sum()), scores[keep]]
        colnames = ["intercept", "trait"]
        if covariates is not None:
            cols.extend(covariates[keep].T)
            colnames.extend(names)
        X = np.column_stack(cols)
        coef, cov = _ols(y, X, colnames)
        beta, beta_var = float(coef[1]), float(cov[1, 1])
        beta_by_group = None
        if group_specific:
            beta_by_group = {}
            for g, label in enumerate(dataset.groups):
                selg = keep & (dataset.group_index == g)
                colsg = [np.ones(selg.sum()), scores[selg]]
                if covariates is not None:
                    colsg.extend(covariates[selg].T)
                coefg, covg = _ols(dataset.outcome[selg], np.column_stack(colsg), colnames)
                beta_by_group[label] = (float(coefg[1]), float(np.sqrt(covg[1, 1])))
        gap, gap_se = latent_gap(meas, focal_group)
        pol_var = beta * beta * gap_se**2 + gap * gap * beta_var
        return PolicyEffect(
            outcome=dataset.outcome_name or "outcome",
            mode=mode,
            beta=beta,
            beta_se=float(np.sqrt(beta_var)),
            trait_gap=gap,
            trait_gap_se=gap_se,
            policy_gap=beta * gap,
            policy_gap_se=float(np.sqrt(pol_var)),
            beta_by_group=beta_by_group,
            pooled=not group_specific,
            se_assumes_independence=True,
            notes=tuple(notes),
        )

    # joint mode
    joint_spec = dataclasses.replace(
        spec,
        include_structural=True,
        structural_group_specific=group_specific,
    )
    jf = fit(dataset, joint_spec, compute_se=True)
    if not jf.converged:
        raise NonConvergenceError("joint model did not converge")
    gap, gap_se = latent_gap(jf, focal_group)
    ref, foc = _focal_index(jf, focal_group)
    coord_pos = {c: i for i, c in enumerate(jf.free_coords)}
    groups = dataset.groups
    if group_specific:
        weights = group_rows / group_rows.sum()
        betas = np.array([float(jf.params.structural.slope[g]) for g in range(len(groups))])
        beta = float(weights @ betas)
        beta_by_group = {}
        for g, label in enumerate(groups):
            se_g = np.nan
            if jf.standard_errors is not None:
                se_g = float(jf.standard_errors.get((m.OUT_SLOPE, g), np.nan))
            beta_by_group[label] = (float(betas[g]), se_g)
        slots = [coord_pos.get((m.OUT_SLOPE, g)) for g in range(len(groups))]
    else:
        beta = float(jf.params.structural.slope[ref])
        beta_by_group = None
        slots = [coord_pos.get((m.OUT_SLOPE, ref))]
        weights = np.array([1.0])
    beta_var = np.nan
    cov_beta_gap = 0.0
    independence = True
    if jf.covariance is not None and all(s is not None for s in slots):
        w = weights if group_specific else np.array([1.0])
        sub = jf.covariance[np.ix_(slots, slots)]
        beta_var = float(w @ sub @ w)
        mu_slot = coord_pos.get((m.MEAN, foc))
        if mu_slot is not None:
            cov_beta_gap = float(w @ jf.covariance[slots, mu_slot])
            independence = False
    pol_var = (
        beta * beta * gap_se**2
        + gap * gap * beta_var
        + 2.0 * beta * gap * cov_beta_gap
    )
    if independence:
        notes.append("policy-gap SE assumes slope and gap are independent")
    return PolicyEffect(
        outcome=dataset.outcome_name or "outcome",
        mode=mode,
        beta=beta,
        beta_se=float(np.sqrt(beta_var)) if np.isfinite(beta_var) else np.nan,
        trait_gap=gap,
        trait_gap_se=gap_se,
        policy_gap=beta * gap,
        policy_gap_se=float(np.sqrt(max(pol_var, 0.0))) if np.isfinite(pol_var) else np.nan,
        beta_by_group=beta_by_group,
        pooled=not group_specific,
        se_assumes_independence=independence,
        notes=tuple(notes),
    )
