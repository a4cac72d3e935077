"""Constrained maximum-likelihood estimation and nested-model tests.

The optimizer works on an unconstrained transform of the free coordinates:
threshold vectors become (first threshold, log gaps) so ordering can never
be violated, and variances are optimized on the log scale.  Gradients are
analytic (assembled from the per-group raw-parameter gradients and mapped
through the transform Jacobian), which keeps a fit at survey sizes in the
sub-second range.

Standard errors come from the inverse of a central-difference Hessian of
the negative log-likelihood taken in the natural (untransformed) free
coordinates; a non-positive-definite Hessian yields flagged-unavailable
entries rather than fabricated numbers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaincc, ndtri

from . import model as m
from .likelihood import QuadratureRule, group_loglik_and_gradient
from .model import (
    ConstraintSet,
    ModelSpec,
    ParameterSet,
    StructuralParams,
    all_coordinates,
    build_constraints,
)

_GAP_FLOOR = 1e-6
# exp() arguments are clamped so a wayward line-search step cannot overflow
# the likelihood into non-finite territory
_LOG_CLIP = 25.0
_VARIANCE_KINDS = (m.VARIANCE, m.OUT_RESID_VAR)


def _safe_exp(x):
    return np.exp(np.clip(x, -_LOG_CLIP, _LOG_CLIP))


class EstimationError(ValueError):
    """Invalid estimation request (bad preconditions, non-nested models, ...)."""


class NonConvergenceError(RuntimeError):
    """An optimization that a downstream step depends on failed to converge."""


def chisq_sf(x, df):
    """Upper-tail probability of the chi-square distribution.

    Computed through the regularized upper incomplete gamma function,
    absolute error below 1e-10 across the support.
    """
    if df < 1 or int(df) != df:
        raise EstimationError("df must be an integer >= 1")
    if x < 0:
        raise EstimationError("chi-square statistic must be non-negative")
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class FitResult:
    """A converged (or honestly non-converged) constrained ML solution."""

    params: ParameterSet
    loglik: float
    n_free: int
    converged: bool
    iterations: int
    gradient_norm: float
    tolerance: float
    spec_echo: ModelSpec
    constraints: ConstraintSet
    free_coords: tuple
    standard_errors: dict | None = None
    covariance: np.ndarray | None = None
    se_available: np.ndarray | None = None
    trace: tuple | None = None


@dataclass(frozen=True)
class LrtResult:
    loglik_restricted: float
    loglik_unrestricted: float
    delta_chisq: float
    delta_df: int
    p_value: float


@dataclass(frozen=True)
class SEResult:
    coords: tuple
    se: np.ndarray
    covariance: np.ndarray | None
    available: np.ndarray

    def as_dict(self):
        return {c: float(s) for c, s in zip(self.coords, self.se)}


class FreeParameterMap:
    """Bidirectional map between free-coordinate vectors and parameter sets.

    Knows the constraint set (fixed values, ties to the reference group) and
    the optimizer transform for each free coordinate.
    """

    def __init__(self, item_names, groups, n_thresholds, constraints,
                 include_structural=False, n_covariates=0):
        self.item_names = tuple(item_names)
        self.groups = tuple(groups)
        self.n_thresholds = tuple(n_thresholds)
        self.constraints = constraints
        self.include_structural = include_structural
        self.n_covariates = n_covariates
        coords = all_coordinates(
            len(groups), self.n_thresholds, include_structural, n_covariates
        )
        fixed = constraints.fixed_map()
        ties = constraints.tie_map()
        covered = set(fixed) | set(ties) | set(constraints.free)
        missing = [c for c in coords if c not in covered]
        if missing:
            raise EstimationError(f"constraints do not cover coordinates: {missing[:5]}")
        for tied, ref in ties.items():
            if ref in ties:
                raise EstimationError(f"tie target {ref} is itself tied")
        self.coords = coords
        self.fixed = fixed
        self.ties = ties
        self.free = constraints.free
        self.index = {c: i for i, c in enumerate(self.free)}
        # reference coordinate -> coordinates tied to it (gradient accumulation)
        self.tied_to = {}
        for tied, ref in ties.items():
            self.tied_to.setdefault(ref, []).append(tied)
        # complete free threshold blocks get the (first, log-gaps) transform
        self.blocks = []
        seen = set()
        for c in self.free:
            if c[0] != m.THRESHOLD:
                continue
            g, j = c[1], c[2]
            if (g, j) in seen:
                continue
            seen.add((g, j))
            ks = [k for k in range(self.n_thresholds[j]) if (m.THRESHOLD, g, j, k) in self.index]
            if len(ks) == self.n_thresholds[j]:
                self.blocks.append((g, j, tuple(self.index[(m.THRESHOLD, g, j, k)] for k in ks)))
            elif len(ks) != 0:
                raise EstimationError(
                    f"thresholds of group {g} item {j} are only partially free"
                )
        self._in_block = set()
        for _, _, idxs in self.blocks:
            self._in_block.update(idxs)

    @property
    def n_free(self):
        return len(self.free)

    # -- value packing ----------------------------------------------------
    def raw_from_params(self, params):
        return np.array([params.value_of(c) for c in self.free])

    def pack(self, params):
        """Natural values -> optimizer vector (log gaps, log variances)."""
        theta = self.raw_from_params(params)
        for _, _, idxs in self.blocks:
            vals = theta[list(idxs)]
            gaps = np.maximum(np.diff(vals), _GAP_FLOOR)
            theta[list(idxs[1:])] = np.log(gaps)
        for i, c in enumerate(self.free):
            if c[0] in _VARIANCE_KINDS and i not in self._in_block:
                theta[i] = np.log(max(theta[i], _GAP_FLOOR))
        return theta

    def _raw_values(self, theta):
        raw = np.array(theta, dtype=float)
        for i, c in enumerate(self.free):
            if c[0] in _VARIANCE_KINDS:
                raw[i] = _safe_exp(raw[i])
        for _, _, idxs in self.blocks:
            first = raw[idxs[0]]
            gaps = _safe_exp(np.array(theta)[list(idxs[1:])])
            raw[list(idxs)] = np.concatenate([[first], first + np.cumsum(gaps)])
        return raw

    def params_from_raw(self, raw):
        """Raw free values (natural scale) -> full ParameterSet."""
        G, J = len(self.groups), len(self.item_names)
        loadings = np.zeros((G, J))
        thresholds = [[np.zeros(self.n_thresholds[j]) for j in range(J)] for _ in range(G)]
        mean = np.zeros(G)
        variance = np.ones(G)
        resid = np.ones((G, J))
        intercepts = np.zeros(J)
        out_a = np.zeros(G)
        out_b = np.zeros(G)
        out_c = np.zeros((G, self.n_covariates))
        out_v = np.ones(G)

        def assign(coord, value):
            kind = coord[0]
            if kind == m.LOADING:
                loadings[coord[1], coord[2]] = value
            elif kind == m.THRESHOLD:
                thresholds[coord[1]][coord[2]][coord[3]] = value
            elif kind == m.MEAN:
                mean[coord[1]] = value
            elif kind == m.VARIANCE:
                variance[coord[1]] = value
            elif kind == m.RESID_VAR:
                resid[coord[1], coord[2]] = value
            elif kind == m.INTERCEPT:
                intercepts[coord[1]] = value
            elif kind == m.OUT_INTERCEPT:
                out_a[coord[1]] = value
            elif kind == m.OUT_SLOPE:
                out_b[coord[1]] = value
            elif kind == m.OUT_COEF:
                out_c[coord[1], coord[2]] = value
            elif kind == m.OUT_RESID_VAR:
                out_v[coord[1]] = value

        for coord, value in self.fixed.items():
            assign(coord, value)
        for i, coord in enumerate(self.free):
            assign(coord, raw[i])
        values = {}
        for i, coord in enumerate(self.free):
            values[coord] = raw[i]
        values.update(self.fixed)
        for tied, ref in self.ties.items():
            assign(tied, values[ref])
        structural = None
        if self.include_structural:
            structural = StructuralParams(out_a, out_b, out_c, out_v)
        return ParameterSet(
            item_names=self.item_names,
            groups=self.groups,
            loadings=loadings,
            thresholds=tuple(tuple(row) for row in thresholds),
            latent_mean=mean,
            latent_variance=variance,
            residual_variance=resid,
            latent_intercepts=intercepts,
            structural=structural,
        )

    def unpack(self, theta):
        return self.params_from_raw(self._raw_values(theta))

    # -- gradient assembly -------------------------------------------------
    def free_gradient(self, group_grads):
        """Raw-parameter gradients per group -> gradient on free coordinates.

        ``group_grads[g]`` is the dict produced by
        :func:`group_loglik_and_gradient`.  Ties accumulate into their
        reference coordinate; the result is in natural (untransformed) scale.
        """

        def raw_of(coord):
            kind, g = coord[0], coord[1]
            gg = group_grads[g]
            if kind == m.LOADING:
                return gg["loading"][coord[2]]
            if kind == m.THRESHOLD:
                return gg["threshold"][coord[2]][coord[3]]
            if kind == m.MEAN:
                return gg["mean"]
            if kind == m.VARIANCE:
                return gg["variance"]
            if kind == m.OUT_INTERCEPT:
                return gg["out_intercept"]
            if kind == m.OUT_SLOPE:
                return gg["out_slope"]
            if kind == m.OUT_COEF:
                return gg["out_coef"][coord[2]]
            if kind == m.OUT_RESID_VAR:
                return gg["out_resid_var"]
            return 0.0

        grad = np.zeros(self.n_free)
        for i, coord in enumerate(self.free):
            val = raw_of(coord)
            for tied in self.tied_to.get(coord, ()):
                val += raw_of(tied)
            grad[i] = val
        return grad

    def to_transformed_gradient(self, raw_grad, theta):
        """Chain rule from natural-scale gradient to optimizer coordinates."""
        out = np.array(raw_grad, dtype=float)
        for _, _, idxs in self.blocks:
            r = raw_grad[list(idxs)]
            tail = np.cumsum(r[::-1])[::-1]  # tail[k] = sum_{k' >= k} r_k'
            out[idxs[0]] = tail[0]
            gaps = _safe_exp(np.array(theta)[list(idxs[1:])])
            out[list(idxs[1:])] = gaps * tail[1:]
        for i, c in enumerate(self.free):
            if c[0] in _VARIANCE_KINDS and i not in self._in_block:
                out[i] = raw_grad[i] * _safe_exp(theta[i])
        return out


@dataclass(frozen=True)
class _GroupData:
    codes: np.ndarray
    counts: np.ndarray
    outcome: np.ndarray | None
    covariates: np.ndarray | None


def _prepare_groups(dataset, spec):
    """Per-group response matrices, pattern-collapsed when no outcome enters."""
    cols = np.array([dataset.item_index(n) for n in spec.item_names])
    out = []
    for g in range(len(dataset.groups)):
        sel = dataset.group_index == g
        codes = dataset.codes[np.ix_(np.nonzero(sel)[0], cols)]
        if spec.include_structural:
            outc = dataset.outcome[sel] if dataset.outcome is not None else None
            covs = dataset.covariates[sel] if dataset.covariates is not None else None
            out.append(_GroupData(codes, np.ones(codes.shape[0]), outc, covs))
        else:
            uniq, counts = np.unique(codes, axis=0, return_counts=True)
            out.append(_GroupData(uniq, counts.astype(float), None, None))
    return out


def _empirical_thresholds(codes_col, n_categories):
    obs = codes_col[codes_col != m.MISSING_CODE]
    if obs.size == 0:
        return np.linspace(-1.0, 1.0, n_categories - 1)
    freq = np.bincount(obs, minlength=n_categories + 1)[1:n_categories]
    props = np.clip(np.cumsum(freq) / obs.size, 1e-4, 1 - 1e-4)
    tau = ndtri(props)
    for k in range(1, tau.size):
        tau[k] = max(tau[k], tau[k - 1] + 1e-2)
    return tau


def default_start(dataset, spec):
    """Deterministic, data-informed starting values.

    Loadings 0.8 everywhere; thresholds from per-group empirical cumulative
    proportions through the probit inverse; latent moments at the reference
    values; outcome regression at (group mean, 0 slope, group variance).
    """
    G = len(dataset.groups)
    cols = [dataset.item_index(n) for n in spec.item_names]
    J = len(cols)
    n_thr = [dataset.items[c].n_categories - 1 for c in cols]
    loadings = np.full((G, J), 0.8)
    thresholds = []
    for g in range(G):
        sel = dataset.group_index == g
        row = []
        for jj, c in enumerate(cols):
            row.append(_empirical_thresholds(dataset.codes[sel, c], n_thr[jj] + 1))
        thresholds.append(tuple(row))
    structural = None
    if spec.include_structural:
        n_cov = 0 if dataset.covariates is None else dataset.covariates.shape[1]
        a = np.zeros(G)
        v = np.ones(G)
        for g in range(G):
            sel = dataset.group_index == g
            y = dataset.outcome[sel] if dataset.outcome is not None else np.array([])
            y = y[~np.isnan(y)]
            if y.size:
                a[g] = float(y.mean())
                v[g] = max(float(y.var()), 1e-2)
        structural = StructuralParams(a, np.zeros(G), np.zeros((G, n_cov)), v)
    return ParameterSet(
        item_names=tuple(spec.item_names),
        groups=dataset.groups,
        loadings=loadings,
        thresholds=tuple(thresholds),
        latent_mean=np.zeros(G),
        latent_variance=np.ones(G),
        residual_variance=np.ones((G, J)),
        latent_intercepts=np.zeros(J),
        structural=structural,
    )


def _total_with_gradients(pmap, params, groups_data, rule):
    total = 0.0
    per_group = []
    for g, gd in enumerate(groups_data):
        structural_g = None
        if pmap.include_structural and params.structural is not None:
            s = params.structural
            structural_g = (
                float(s.intercept[g]),
                float(s.slope[g]),
                np.asarray(s.covariate_coefs[g], dtype=float),
                float(s.resid_var[g]),
            )
        ll, grads = group_loglik_and_gradient(
            gd.codes,
            gd.counts,
            params.loadings[g],
            params.thresholds[g],
            params.residual_variance[g],
            float(params.latent_mean[g]),
            float(params.latent_variance[g]),
            rule,
            outcome=gd.outcome,
            covariates=gd.covariates,
            structural_g=structural_g,
        )
        total += ll
        per_group.append(grads)
    return total, per_group


def fit(dataset, spec, *, constraints=None, start=None, rule=None,
        compute_se=False, max_iterations=500, keep_trace=False):
    """Maximize the constrained marginal likelihood.

    Deterministic given the dataset, spec, and starting values.
    Non-convergence is reported through ``converged=False``, never raised.
    """
    if constraints is None:
        constraints = build_constraints(spec, dataset)
    if rule is None:
        rule = QuadratureRule.gauss_hermite(spec.quadrature_points)
    cols = [dataset.item_index(n) for n in spec.item_names]
    n_thr = [dataset.items[c].n_categories - 1 for c in cols]
    n_cov = 0 if dataset.covariates is None else dataset.covariates.shape[1]
    pmap = FreeParameterMap(
        spec.item_names, dataset.groups, n_thr, constraints,
        include_structural=spec.include_structural, n_covariates=n_cov,
    )
    groups_data = _prepare_groups(dataset, spec)
    start_params = start if start is not None else default_start(dataset, spec)
    theta0 = pmap.pack(start_params)

    def objective(theta):
        params = pmap.unpack(theta)
        total, per_group = _total_with_gradients(pmap, params, groups_data, rule)
        raw_grad = pmap.free_gradient(per_group)
        grad = pmap.to_transformed_gradient(raw_grad, theta)
        return -total, -grad

    trace = []
    callback = None
    if keep_trace:
        def callback(xk):
            trace.append(-objective(xk)[0])

    if pmap.n_free == 0:
        theta = theta0
        iterations = 0
    else:
        res = minimize(
            objective, theta0, jac=True, method="L-BFGS-B",
            options={"maxiter": max_iterations, "ftol": 1e-11, "gtol": 1e-6, "maxcor": 25},
            callback=callback,
        )
        theta, iterations = res.x, res.nit

    params = pmap.unpack(theta)
    total, per_group = _total_with_gradients(pmap, params, groups_data, rule)
    raw_grad = pmap.free_gradient(per_group)
    gnorm = float(np.abs(raw_grad).max()) if raw_grad.size else 0.0
    tolerance = max(1e-4, abs(total) * 1e-8)
    if pmap.n_free and gnorm > tolerance and iterations < max_iterations:
        res = minimize(
            objective, theta, jac=True, method="L-BFGS-B",
            options={
                "maxiter": max_iterations - iterations,
                "ftol": 1e-16,
                "gtol": 1e-8,
                "maxcor": 25,
            },
            callback=callback,
        )
        if -res.fun >= total:
            theta, iterations = res.x, iterations + res.nit
            params = pmap.unpack(theta)
            total, per_group = _total_with_gradients(pmap, params, groups_data, rule)
            raw_grad = pmap.free_gradient(per_group)
            gnorm = float(np.abs(raw_grad).max()) if raw_grad.size else 0.0
            tolerance = max(1e-4, abs(total) * 1e-8)

    result = FitResult(
        params=params,
        loglik=float(total),
        n_free=pmap.n_free,
        converged=bool(gnorm <= tolerance),
        iterations=int(iterations),
        gradient_norm=gnorm,
        tolerance=tolerance,
        spec_echo=spec,
        constraints=constraints,
        free_coords=pmap.free,
        standard_errors=None,
        trace=tuple(trace) if keep_trace else None,
    )
    if compute_se:
        se = standard_errors(result, dataset, rule=rule)
        result = dataclasses.replace(
            result,
            standard_errors=se.as_dict(),
            covariance=se.covariance,
            se_available=se.available,
        )
    return result


def _raw_gradient_fn(fit_result, dataset, rule):
    spec = fit_result.spec_echo
    cols = [dataset.item_index(n) for n in spec.item_names]
    n_thr = [dataset.items[c].n_categories - 1 for c in cols]
    n_cov = 0 if dataset.covariates is None else dataset.covariates.shape[1]
    pmap = FreeParameterMap(
        spec.item_names, dataset.groups, n_thr, fit_result.constraints,
        include_structural=spec.include_structural, n_covariates=n_cov,
    )
    groups_data = _prepare_groups(dataset, spec)

    def grad(raw):
        params = pmap.params_from_raw(raw)
        _, per_group = _total_with_gradients(pmap, params, groups_data, rule)
        return pmap.free_gradient(per_group)

    return pmap, grad


def standard_errors(fit_result, dataset, *, rule=None):
    """SEs from the central-difference Hessian of -loglik at the optimum.

    Requires a converged fit.  When the Hessian is not positive definite the
    entries are flagged unavailable (NaN) instead of being fabricated.
    """
    if not fit_result.converged:
        raise EstimationError("standard errors require a converged fit")
    if rule is None:
        rule = QuadratureRule.gauss_hermite(fit_result.spec_echo.quadrature_points)
    pmap, grad = _raw_gradient_fn(fit_result, dataset, rule)
    x0 = pmap.raw_from_params(fit_result.params)
    n = x0.size
    if n == 0:
        return SEResult(coords=(), se=np.zeros(0), covariance=np.zeros((0, 0)),
                        available=np.zeros(0, dtype=bool))
    steps = 1e-4 * np.maximum(1.0, np.abs(x0))
    for i, coord in enumerate(pmap.free):
        if coord[0] == m.THRESHOLD:
            g, j, k = coord[1], coord[2], coord[3]
            tau = fit_result.params.thresholds[g][j]
            room = np.inf
            if k > 0:
                room = min(room, tau[k] - tau[k - 1])
            if k + 1 < tau.size:
                room = min(room, tau[k + 1] - tau[k])
            steps[i] = max(min(steps[i], 0.4 * room), 1e-8)
        elif coord[0] in _VARIANCE_KINDS:
            steps[i] = min(steps[i], 0.4 * x0[i])
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        H[i] = (grad(x0 + e) - grad(x0 - e)) / (2.0 * steps[i])
    H = -(H + H.T) / 2.0  # Hessian of -loglik
    se = np.full(n, np.nan)
    available = np.zeros(n, dtype=bool)
    cov = None
    eigval, eigvec = np.linalg.eigh(H)
    floor = np.abs(eigval).max() * 1e-8 if n else 0.0
    bad = eigval <= floor
    if not bad.any():
        cov = (eigvec / eigval) @ eigvec.T
        diag = np.diag(cov)
        available = diag > 0
        se[available] = np.sqrt(diag[available])
    elif not bad.all():
        # a coordinate gets an SE only if it does not load on any
        # non-positive-curvature direction; nothing is fabricated
        null_load = np.abs(eigvec[:, bad]).max(axis=1)
        good = eigvec[:, ~bad]
        partial = (good / eigval[~bad]) @ good.T
        diag = np.diag(partial)
        available = (null_load < 1e-8) & (diag > 0)
        se[available] = np.sqrt(diag[available])
    return SEResult(coords=pmap.free, se=se, covariance=cov, available=available)


def is_nested(restricted, unrestricted):
    """Constraint-set nesting check for likelihood-ratio tests.

    The restricted model must carry every tie of the unrestricted one, agree
    on jointly fixed values, and may free only latent-moment coordinates the
    unrestricted model pins (the identification trade along the ladder).
    """
    if not set(unrestricted.ties) <= set(restricted.ties):
        return False
    rf = restricted.fixed_map()
    uf = unrestricted.fixed_map()
    for coord, value in rf.items():
        if coord in uf and uf[coord] != value:
            return False
    extra_free = set(restricted.free) - set(unrestricted.free)
    if any(c[0] not in (m.MEAN, m.VARIANCE) for c in extra_free):
        return False
    return True


def lrt(restricted, unrestricted):
    """Likelihood-ratio test of nested constrained fits."""
    if not restricted.converged or not unrestricted.converged:
        raise EstimationError("likelihood-ratio test requires converged fits")
    if not is_nested(restricted.constraints, unrestricted.constraints):
        raise EstimationError("models are not nested")
    delta_df = unrestricted.n_free - restricted.n_free
    if delta_df <= 0:
        raise EstimationError("restricted model must have fewer free coordinates")
    delta = max(0.0, 2.0 * (unrestricted.loglik - restricted.loglik))
    return LrtResult(
        loglik_restricted=restricted.loglik,
        loglik_unrestricted=unrestricted.loglik,
        delta_chisq=delta,
        delta_df=delta_df,
        p_value=chisq_sf(delta, delta_df),
    )
