"""Domain types for multi-group ordinal factor models.

Defines the dataset container, the model specification, parameter sets, and
the equality-constraint bookkeeping that realizes the invariance ladder
(configural / metric / scalar / scalar + fixed latent moments / partial
scalar with anchors).

Identification conventions used throughout:

* probit residual variances are fixed to 1 in every group at every level
  (theta parameterization),
* latent-response intercepts are fixed to 0, so all location information is
  carried by thresholds,
* the reference group has latent mean 0 and latent variance 1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

ROLE_SCALE = "child-rearing"
ROLE_ANCHOR = "anchor"
ITEM_ROLES = (ROLE_SCALE, ROLE_ANCHOR)

CONFIGURAL = "configural"
METRIC = "metric"
SCALAR = "scalar"
SCALAR_FV = "scalar_fv"
PARTIAL_SCALAR_ANCHOR = "partial_scalar_anchor"
CONSTRAINT_LEVELS = (CONFIGURAL, METRIC, SCALAR, SCALAR_FV, PARTIAL_SCALAR_ANCHOR)

FV_MEAN = "mean"
FV_VARIANCE = "variance"
FV_BOTH = "both"
FV_CHOICES = (FV_MEAN, FV_VARIANCE, FV_BOTH)

MISSING_CODE = 0

# Coordinate kinds; a coordinate is a tuple (kind, *indices) addressing one
# scalar parameter.  Group/item indices refer to the model's own ordering.
LOADING = "loading"
THRESHOLD = "threshold"
MEAN = "mean"
VARIANCE = "variance"
RESID_VAR = "resid_var"
INTERCEPT = "intercept"
OUT_INTERCEPT = "out_intercept"
OUT_SLOPE = "out_slope"
OUT_COEF = "out_coef"
OUT_RESID_VAR = "out_resid_var"

Coord = tuple


class ModelError(ValueError):
    """Inconsistent model specification or constraint request."""


@dataclass(frozen=True)
class ValidationIssue:
    row: int | None
    item: str | None
    reason: str

    def __str__(self):
        where = []
        if self.row is not None:
            where.append(f"row {self.row}")
        if self.item is not None:
            where.append(f"item {self.item!r}")
        prefix = ", ".join(where)
        return f"{prefix}: {self.reason}" if prefix else self.reason


class DatasetValidationError(ValueError):
    """Carries the complete list of dataset invariant violations."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class Item:
    """One ordinal survey item: name, number of ordered categories, role."""

    name: str
    n_categories: int
    role: str = ROLE_SCALE

    def __post_init__(self):
        if self.n_categories < 2:
            raise ModelError(f"item {self.name!r}: n_categories must be >= 2")
        if self.role not in ITEM_ROLES:
            raise ModelError(f"item {self.name!r}: unknown role {self.role!r}")


def _locked(arr):
    arr = np.asarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OrdinalDataset:
    """Per-respondent ordered-category responses with group labels.

    ``codes`` holds 1-based category codes with 0 marking a missing
    response.  ``outcome`` (NaN = missing) and ``covariates`` are optional
    continuous columns used by the structural step.  Instances are immutable
    and safe to share across parallel workers.
    """

    items: tuple[Item, ...]
    groups: tuple[str, ...]
    codes: np.ndarray
    group_index: np.ndarray
    outcome: np.ndarray | None = None
    covariates: np.ndarray | None = None
    outcome_name: str | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        codes = _locked(np.asarray(self.codes, dtype=np.int64))
        gidx = _locked(np.asarray(self.group_index, dtype=np.int64))
        if codes.ndim != 2 or codes.shape[1] != len(self.items):
            raise ModelError("codes must be (n_rows, n_items)")
        if gidx.shape != (codes.shape[0],):
            raise ModelError("group_index must have one entry per row")
        if len(self.groups) < 1:
            raise ModelError("at least one group label required")
        if gidx.size and (gidx.min() < 0 or gidx.max() >= len(self.groups)):
            raise ModelError("group_index out of range")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "group_index", gidx)
        if self.outcome is not None:
            out = _locked(np.asarray(self.outcome, dtype=float))
            if out.shape != (codes.shape[0],):
                raise ModelError("outcome must have one entry per row")
            object.__setattr__(self, "outcome", out)
        if self.covariates is not None:
            cov = _locked(np.asarray(self.covariates, dtype=float))
            if cov.ndim != 2 or cov.shape[0] != codes.shape[0]:
                raise ModelError("covariates must be (n_rows, n_covariates)")
            object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_rows(self):
        return self.codes.shape[0]

    @property
    def n_items(self):
        return len(self.items)

    @property
    def item_names(self):
        return tuple(it.name for it in self.items)

    def item_index(self, name):
        try:
            return self.item_names.index(name)
        except ValueError:
            raise ModelError(f"item {name!r} not present in dataset") from None

    @classmethod
    def from_rows(cls, items, groups, rows, outcome_name=None, covariate_names=()):
        """Build a dataset from per-respondent records.

        Each row is ``(group_index, responses)`` optionally followed by an
        outcome value and a covariate sequence.  Raises
        :class:`DatasetValidationError` listing every structural problem
        (ragged covariates, wrong response count) rather than stopping at
        the first.
        """
        items = tuple(items)
        issues = []
        n_cov = None
        codes, gidx, outs, covs = [], [], [], []
        has_outcome = False
        has_cov = False
        for r, row in enumerate(rows):
            group, responses = row[0], row[1]
            outcome = row[2] if len(row) > 2 else None
            covariates = row[3] if len(row) > 3 else None
            if len(responses) != len(items):
                issues.append(ValidationIssue(r, None, "wrong number of responses"))
                responses = list(responses)[: len(items)] + [None] * max(
                    0, len(items) - len(responses)
                )
            codes.append([MISSING_CODE if c is None else int(c) for c in responses])
            gidx.append(int(group))
            outs.append(np.nan if outcome is None else float(outcome))
            if outcome is not None:
                has_outcome = True
            if covariates is None:
                covs.append(None)
            else:
                has_cov = True
                covariates = [float(c) for c in covariates]
                if n_cov is None:
                    n_cov = len(covariates)
                elif len(covariates) != n_cov:
                    issues.append(
                        ValidationIssue(r, None, "ragged covariates: expected "
                                        f"{n_cov} values, got {len(covariates)}")
                    )
                covs.append(covariates)
        if has_cov:
            for r, c in enumerate(covs):
                if c is None:
                    issues.append(ValidationIssue(r, None, "ragged covariates: row has none"))
        if issues:
            raise DatasetValidationError(issues)
        return cls(
            items=items,
            groups=tuple(groups),
            codes=np.array(codes, dtype=np.int64).reshape(len(gidx), len(items)),
            group_index=np.array(gidx, dtype=np.int64),
            outcome=np.array(outs) if has_outcome else None,
            covariates=np.array([c for c in covs], dtype=float) if has_cov else None,
            outcome_name=outcome_name,
            covariate_names=covariate_names,
        )


def collect_issues(dataset):
    """Check every dataset invariant, returning the complete issue list."""
    issues = []
    if len(dataset.groups) < 2:
        issues.append(ValidationIssue(None, None, "at least 2 groups required"))
    for j, item in enumerate(dataset.items):
        col = dataset.codes[:, j]
        bad = np.nonzero((col != MISSING_CODE) & ((col < 1) | (col > item.n_categories)))[0]
        for r in bad:
            issues.append(
                ValidationIssue(
                    int(r),
                    item.name,
                    f"category code {int(col[r])} outside 1..{item.n_categories}",
                )
            )
    any_observed = (dataset.codes != MISSING_CODE).any(axis=1)
    for g, label in enumerate(dataset.groups):
        sel = dataset.group_index == g
        if not sel.any():
            issues.append(ValidationIssue(None, None, f"empty group {label!r}"))
        elif not any_observed[sel].any():
            issues.append(
                ValidationIssue(None, None, f"group {label!r} has no observed responses")
            )
    return issues


def validate_dataset(dataset):
    """Return the dataset unchanged if all invariants hold.

    Raises :class:`DatasetValidationError` carrying every violation
    (row index, item, reason) otherwise.
    """
    issues = collect_issues(dataset)
    if issues:
        raise DatasetValidationError(issues)
    return dataset


@dataclass(frozen=True)
class ModelSpec:
    """What to fit: items, anchors, constraint level, identification choices.

    ``fv_constrains`` selects which latent moments the ``scalar_fv`` level
    pins to the reference values (mean only by default, giving a one-degree
    step after scalar; "variance" or "both" are available).
    """

    item_names: tuple[str, ...]
    constraint_level: str
    reference_group: str
    anchor_set: frozenset[str] = frozenset()
    quadrature_points: int = 31
    include_structural: bool = False
    fv_constrains: str = FV_MEAN
    structural_group_specific: bool = False

    def __post_init__(self):
        object.__setattr__(self, "item_names", tuple(self.item_names))
        object.__setattr__(self, "anchor_set", frozenset(self.anchor_set))
        if not self.item_names:
            raise ModelError("spec needs at least one item")
        if len(set(self.item_names)) != len(self.item_names):
            raise ModelError("duplicate item names in spec")
        if self.constraint_level not in CONSTRAINT_LEVELS:
            raise ModelError(f"unknown constraint level {self.constraint_level!r}")
        unknown = self.anchor_set - set(self.item_names)
        if unknown:
            raise ModelError(f"anchor items not in spec items: {sorted(unknown)}")
        if self.constraint_level == PARTIAL_SCALAR_ANCHOR and not self.anchor_set:
            raise ModelError("partial_scalar_anchor requires a nonempty anchor set")
        if self.quadrature_points < 7 or self.quadrature_points % 2 == 0:
            raise ModelError("quadrature_points must be odd and >= 7")
        if self.fv_constrains not in FV_CHOICES:
            raise ModelError(f"fv_constrains must be one of {FV_CHOICES}")


@dataclass(frozen=True)
class StructuralParams:
    """Outcome regression parameters per group: Y = a + b*trait + coefs'X + e."""

    intercept: np.ndarray
    slope: np.ndarray
    covariate_coefs: np.ndarray
    resid_var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "intercept", _locked(np.asarray(self.intercept, float)))
        object.__setattr__(self, "slope", _locked(np.asarray(self.slope, float)))
        object.__setattr__(
            self, "covariate_coefs", _locked(np.asarray(self.covariate_coefs, float))
        )
        object.__setattr__(self, "resid_var", _locked(np.asarray(self.resid_var, float)))

    @property
    def n_covariates(self):
        return self.covariate_coefs.shape[1]


@dataclass(frozen=True)
class ParameterSet:
    """All parameters of the multi-group model, one entry per coordinate.

    ``thresholds[g][j]`` is the strictly increasing cut-point vector of item
    ``j`` in group ``g``.  Residual variances and latent intercepts are kept
    although the identification convention pins them (1 and 0).
    """

    item_names: tuple[str, ...]
    groups: tuple[str, ...]
    loadings: np.ndarray
    thresholds: tuple[tuple[np.ndarray, ...], ...]
    latent_mean: np.ndarray
    latent_variance: np.ndarray
    residual_variance: np.ndarray
    latent_intercepts: np.ndarray
    structural: StructuralParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "item_names", tuple(self.item_names))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "loadings", _locked(np.asarray(self.loadings, float)))
        thr = tuple(
            tuple(_locked(np.asarray(t, float)) for t in row) for row in self.thresholds
        )
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "latent_mean", _locked(np.asarray(self.latent_mean, float)))
        object.__setattr__(
            self, "latent_variance", _locked(np.asarray(self.latent_variance, float))
        )
        object.__setattr__(
            self, "residual_variance", _locked(np.asarray(self.residual_variance, float))
        )
        object.__setattr__(
            self, "latent_intercepts", _locked(np.asarray(self.latent_intercepts, float))
        )

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def n_items(self):
        return len(self.item_names)

    def n_thresholds(self, j):
        return len(self.thresholds[0][j])

    def validate(self):
        """Check ordering and positivity invariants; raise ModelError if violated."""
        for g in range(self.n_groups):
            for j in range(self.n_items):
                t = self.thresholds[g][j]
                if t.size > 1 and not np.all(np.diff(t) > 0):
                    raise ModelError(
                        f"thresholds not strictly increasing for group {g}, "
                        f"item {self.item_names[j]!r}"
                    )
        if np.any(self.latent_variance <= 0):
            raise ModelError("latent variances must be positive")
        if np.any(self.residual_variance <= 0):
            raise ModelError("residual variances must be positive")
        if self.structural is not None and np.any(self.structural.resid_var <= 0):
            raise ModelError("outcome residual variances must be positive")
        return self

    def value_of(self, coord):
        kind = coord[0]
        if kind == LOADING:
            return float(self.loadings[coord[1], coord[2]])
        if kind == THRESHOLD:
            return float(self.thresholds[coord[1]][coord[2]][coord[3]])
        if kind == MEAN:
            return float(self.latent_mean[coord[1]])
        if kind == VARIANCE:
            return float(self.latent_variance[coord[1]])
        if kind == RESID_VAR:
            return float(self.residual_variance[coord[1], coord[2]])
        if kind == INTERCEPT:
            return float(self.latent_intercepts[coord[1]])
        if self.structural is None:
            raise ModelError(f"no structural parameters present for {coord}")
        if kind == OUT_INTERCEPT:
            return float(self.structural.intercept[coord[1]])
        if kind == OUT_SLOPE:
            return float(self.structural.slope[coord[1]])
        if kind == OUT_COEF:
            return float(self.structural.covariate_coefs[coord[1], coord[2]])
        if kind == OUT_RESID_VAR:
            return float(self.structural.resid_var[coord[1]])
        raise ModelError(f"unknown coordinate {coord}")


def all_coordinates(n_groups, n_thresholds_per_item, include_structural=False, n_covariates=0):
    """Canonical coordinate enumeration shared by constraint building and fitting.

    Order is deterministic: loadings, thresholds, latent means, latent
    variances, residual variances, latent intercepts, then the structural
    block, each group-major.
    """
    n_items = len(n_thresholds_per_item)
    coords = []
    for g in range(n_groups):
        for j in range(n_items):
            coords.append((LOADING, g, j))
    for g in range(n_groups):
        for j in range(n_items):
            for k in range(n_thresholds_per_item[j]):
                coords.append((THRESHOLD, g, j, k))
    for g in range(n_groups):
        coords.append((MEAN, g))
    for g in range(n_groups):
        coords.append((VARIANCE, g))
    for g in range(n_groups):
        for j in range(n_items):
            coords.append((RESID_VAR, g, j))
    for j in range(n_items):
        coords.append((INTERCEPT, j))
    if include_structural:
        for g in range(n_groups):
            coords.append((OUT_INTERCEPT, g))
        for g in range(n_groups):
            coords.append((OUT_SLOPE, g))
        for g in range(n_groups):
            for c in range(n_covariates):
                coords.append((OUT_COEF, g, c))
        for g in range(n_groups):
            coords.append((OUT_RESID_VAR, g))
    return tuple(coords)


@dataclass(frozen=True)
class ConstraintSet:
    """Equality ties to the reference group plus fixed coordinates.

    ``ties`` maps a coordinate in a non-reference group to the same
    coordinate in the reference group; ``fixed`` pins coordinates at known
    values; ``free`` lists the remaining coordinates in canonical order.
    """

    ties: tuple[tuple[Coord, Coord], ...]
    fixed: tuple[tuple[Coord, float], ...]
    free: tuple[Coord, ...]

    def __post_init__(self):
        tied = [t for t, _ in self.ties]
        if len(set(tied)) != len(tied):
            raise ModelError("a coordinate appears in more than one tie")
        fixed_coords = {c for c, _ in self.fixed}
        overlap = fixed_coords & set(tied)
        if overlap:
            raise ModelError(f"coordinates both fixed and tied: {sorted(overlap)}")
        stray = (set(tied) | fixed_coords) & set(self.free)
        if stray:
            raise ModelError(f"constrained coordinates listed as free: {sorted(stray)}")

    @property
    def n_free(self):
        return len(self.free)

    def tie_map(self):
        return dict(self.ties)

    def fixed_map(self):
        return dict(self.fixed)


def build_constraints(spec, dataset):
    """Translate a constraint level into explicit ties and fixed coordinates.

    Deterministic: identical inputs produce identical coordinate lists in
    identical order.  Degrees of freedom for nested-model tests are
    differences of ``n_free`` between the resulting sets.
    """
    for name in spec.item_names:
        if name not in dataset.item_names:
            raise ModelError(f"spec item {name!r} not present in dataset")
    for name in sorted(spec.anchor_set):
        if name not in dataset.item_names:
            raise ModelError(f"anchor item {name!r} not present in dataset")
    if spec.reference_group not in dataset.groups:
        raise ModelError(f"reference group {spec.reference_group!r} not in dataset groups")
    if spec.constraint_level == PARTIAL_SCALAR_ANCHOR and not spec.anchor_set:
        raise ModelError("partial_scalar_anchor requires anchors")

    G = len(dataset.groups)
    ref = dataset.groups.index(spec.reference_group)
    n_thr = [dataset.items[dataset.item_index(n)].n_categories - 1 for n in spec.item_names]
    n_cov = 0 if dataset.covariates is None else dataset.covariates.shape[1]
    coords = all_coordinates(G, n_thr, spec.include_structural, n_cov)
    anchors = {j for j, name in enumerate(spec.item_names) if name in spec.anchor_set}
    level = spec.constraint_level

    fixed = {}
    ties = {}
    for j in range(len(spec.item_names)):
        fixed[(INTERCEPT, j)] = 0.0
        for g in range(G):
            fixed[(RESID_VAR, g, j)] = 1.0
    fixed[(MEAN, ref)] = 0.0
    fixed[(VARIANCE, ref)] = 1.0

    tie_loadings = level in (METRIC, SCALAR, SCALAR_FV, PARTIAL_SCALAR_ANCHOR)
    for g in range(G):
        if g == ref:
            continue
        for j in range(len(spec.item_names)):
            if tie_loadings:
                ties[(LOADING, g, j)] = (LOADING, ref, j)
            tie_thr = (
                level in (SCALAR, SCALAR_FV)
                or (level == PARTIAL_SCALAR_ANCHOR and j in anchors)
            )
            if tie_thr:
                for k in range(n_thr[j]):
                    ties[(THRESHOLD, g, j, k)] = (THRESHOLD, ref, j, k)
        if level == CONFIGURAL:
            fixed[(MEAN, g)] = 0.0
            fixed[(VARIANCE, g)] = 1.0
        elif level == METRIC:
            fixed[(MEAN, g)] = 0.0
        elif level == SCALAR_FV:
            if spec.fv_constrains in (FV_MEAN, FV_BOTH):
                fixed[(MEAN, g)] = 0.0
            if spec.fv_constrains in (FV_VARIANCE, FV_BOTH):
                fixed[(VARIANCE, g)] = 1.0

    if spec.include_structural and not spec.structural_group_specific:
        for g in range(G):
            if g == ref:
                continue
            ties[(OUT_SLOPE, g)] = (OUT_SLOPE, ref)
            for c in range(n_cov):
                ties[(OUT_COEF, g, c)] = (OUT_COEF, ref, c)

    free = tuple(c for c in coords if c not in fixed and c not in ties)
    return ConstraintSet(
        ties=tuple((c, ties[c]) for c in coords if c in ties),
        fixed=tuple((c, fixed[c]) for c in coords if c in fixed),
        free=free,
    )
