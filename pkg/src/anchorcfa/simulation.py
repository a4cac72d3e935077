"""Monte Carlo study of group-gap estimators under threshold shifts.

Data generation: a latent trait with a true group difference drives eight
ordinal items (four carry a group-specific shift of the continuous
response, four are invariant anchors); responses are cut into ordered
categories at fixed points.  Three estimators of the group gap are
compared per replication:

* ``scale`` - standardized difference of mean item scores over the shifted
  items.  The difference is divided by the pooled square root of the mean
  inter-item covariance (the systematic part of the score variance), which
  puts the estimate on the latent-SD metric; dividing by the total score SD
  would attenuate it even without any shift.
* ``full_scalar`` - latent mean from a model forcing equal loadings and
  thresholds across groups (all eight items by default).
* ``partial_anchor`` - latent mean from the anchor-identified model that
  frees the shifted items' thresholds.

Randomness is counter-based: each replication's generator is keyed by
(base seed, condition fingerprint, replication index), so results are
identical no matter how work is distributed across processes.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as m
from .estimation import fit
from .model import Item, ModelSpec, OrdinalDataset, ROLE_ANCHOR, ROLE_SCALE

N_ITEMS = 8
DIF_ITEMS = tuple(f"dif_{i}" for i in range(1, 5))
ANCHOR_ITEMS = tuple(f"anchor_{i}" for i in range(1, 5))
GROUPS = ("ref", "focal")

SCALE_DIF_ONLY = "dif_only_4"
SCALE_ALL = "all_8"
ITEM_CHOICES = (SCALE_DIF_ONLY, SCALE_ALL)

ESTIMATORS = ("scale", "full_scalar", "partial_anchor")

STANDARDIZATION_NOTE = (
    "scale estimates are standardized by the pooled sqrt of the mean "
    "inter-item covariance (latent-SD metric), not by the total score SD"
)


class SimulationError(ValueError):
    """Invalid simulation condition or degenerate estimator input."""


class NonConvergedReplication(RuntimeError):
    """A model-based estimator failed to converge on one replication."""


@dataclass(frozen=True)
class SimCondition:
    """One cell of the simulation design."""

    delta: float = 0.0
    loading: float = 0.9
    resid_var: float = 1.0
    n_categories: int = 4
    n: int = 1000
    true_gap: float = 0.2
    scale_items: str = SCALE_DIF_ONLY
    full_scalar_items: str = SCALE_ALL
    replications: int = 500
    base_seed: int = 202408

    def __post_init__(self):
        if self.delta < 0:
            raise SimulationError("delta must be >= 0")
        if self.resid_var <= 0:
            raise SimulationError("resid_var must be positive")
        if self.n_categories < 2:
            raise SimulationError("n_categories must be >= 2")
        if self.n < 2 or self.n % 2 != 0:
            raise SimulationError("n must be even (equal group split)")
        if self.replications < 1:
            raise SimulationError("replications must be >= 1")
        if self.scale_items not in ITEM_CHOICES:
            raise SimulationError(f"scale_items must be one of {ITEM_CHOICES}")
        if self.full_scalar_items not in ITEM_CHOICES:
            raise SimulationError(f"full_scalar_items must be one of {ITEM_CHOICES}")

    def generation_key(self):
        """Fields that define the data-generating process of this cell."""
        return (
            self.delta, self.loading, self.resid_var, self.n_categories,
            self.n, self.true_gap,
        )


def cut_points(n_categories):
    """Fixed discretization cuts: (-1, 0, 1) for four categories, otherwise
    equally spaced cuts spanning [-1.5, 1.5] (a single cut sits at 0)."""
    if n_categories == 4:
        return np.array([-1.0, 0.0, 1.0])
    if n_categories == 2:
        return np.array([0.0])
    return np.linspace(-1.5, 1.5, n_categories - 1)


def categorize(values, n_categories):
    """Continuous responses to 1-based codes; a value equal to a cut point
    falls in the lower category."""
    cuts = cut_points(n_categories)
    return np.searchsorted(cuts, values, side="left") + 1


def _replication_rng(cond, rep_index, stream="data"):
    material = repr((int(cond.base_seed), cond.generation_key(), int(rep_index), stream))
    digest = hashlib.sha256(material.encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw(cond, rep_index):
    """Group labels, latent traits, continuous and discretized responses."""
    rng = _replication_rng(cond, rep_index)
    n = cond.n
    group = np.repeat(np.array([0, 1]), n // 2)
    eta = rng.standard_normal(n) + cond.true_gap * group
    eps = rng.standard_normal((n, N_ITEMS)) * np.sqrt(cond.resid_var)
    ystar = cond.loading * eta[:, None] + eps
    ystar[group == 1, :4] += cond.delta
    cuts = cut_points(cond.n_categories)
    codes = np.searchsorted(cuts, ystar, side="left") + 1
    return group, eta, ystar, codes


def _sim_items(n_categories):
    return tuple(
        [Item(name, n_categories, ROLE_SCALE) for name in DIF_ITEMS]
        + [Item(name, n_categories, ROLE_ANCHOR) for name in ANCHOR_ITEMS]
    )


def generate_replication(cond, rep_index):
    """One synthetic dataset; deterministic in (base_seed, condition, index)."""
    group, _, _, codes = _draw(cond, rep_index)
    return OrdinalDataset(
        items=_sim_items(cond.n_categories),
        groups=GROUPS,
        codes=codes,
        group_index=group,
    )


def generate_demo_dataset(seed=20240817, n=2000, delta=0.3, loading=0.9,
                          resid_var=1.0, n_categories=4, true_gap=0.2,
                          outcome_slope=0.5, outcome_noise_sd=0.7):
    """Synthetic two-group survey with an outcome and one covariate.

    The outcome is a linear function of the latent trait and the covariate,
    so every command of the toolkit has something meaningful to do.
    """
    cond = SimCondition(
        delta=delta, loading=loading, resid_var=resid_var,
        n_categories=n_categories, n=n, true_gap=true_gap, base_seed=seed,
        replications=1,
    )
    group, eta, _, codes = _draw(cond, 0)
    rng = _replication_rng(cond, 0, stream="outcome")
    covar = rng.standard_normal(n)
    outcome = 0.1 + outcome_slope * eta + 0.4 * covar + outcome_noise_sd * rng.standard_normal(n)
    return OrdinalDataset(
        items=_sim_items(n_categories),
        groups=GROUPS,
        codes=codes,
        group_index=group,
        outcome=outcome,
        covariates=covar[:, None],
        outcome_name="policy",
        covariate_names=("covar_1",),
    )


def _select_items(dataset, which):
    if which == SCALE_ALL:
        return [it.name for it in dataset.items]
    return [it.name for it in dataset.items if it.role == ROLE_SCALE]


def estimate_scale(dataset, cond=None):
    """Standardized difference of mean item scores, focal minus reference.

    Standardization divides by the pooled square root of the mean
    inter-item covariance computed within groups; see the module docstring.
    """
    which = cond.scale_items if cond is not None else SCALE_DIF_ONLY
    names = _select_items(dataset, which)
    if len(names) < 2:
        raise SimulationError("scale estimator needs at least 2 items")
    cols = [dataset.item_index(nm) for nm in names]
    codes = dataset.codes[:, cols].astype(float)
    codes[dataset.codes[:, cols] == m.MISSING_CODE] = np.nan
    complete = ~np.isnan(codes).any(axis=1)
    means = []
    cov_sum = 0.0
    weight_sum = 0.0
    for g in range(len(dataset.groups)):
        sel = (dataset.group_index == g) & complete
        X = codes[sel]
        if X.shape[0] < 2:
            raise SimulationError(f"group {dataset.groups[g]!r} has too few complete rows")
        means.append(float(X.mean(axis=1).mean()))
        C = np.cov(X, rowvar=False)
        off = C[~np.eye(len(cols), dtype=bool)].mean()
        cov_sum += off * (X.shape[0] - 1)
        weight_sum += X.shape[0] - 1
    pooled = cov_sum / weight_sum
    if pooled <= 0:
        raise SimulationError("pooled systematic score variance is not positive")
    return float((means[1] - means[0]) / np.sqrt(pooled))


def _mu_focal(dataset, spec):
    result = fit(dataset, spec)
    if not result.converged:
        raise NonConvergedReplication(spec.constraint_level)
    focal = 1 if dataset.groups.index(spec.reference_group) == 0 else 0
    return float(result.params.latent_mean[focal])


def estimate_full_scalar(dataset, cond=None):
    """Latent-mean gap under full scalar constraints (all items by default)."""
    which = cond.full_scalar_items if cond is not None else SCALE_ALL
    names = _select_items(dataset, which)
    spec = ModelSpec(
        item_names=tuple(names),
        constraint_level=m.SCALAR,
        reference_group=dataset.groups[0],
    )
    return _mu_focal(dataset, spec)


def estimate_partial_anchor(dataset, cond=None):
    """Latent-mean gap under the anchor-identified partial model."""
    anchors = [it.name for it in dataset.items if it.role == ROLE_ANCHOR]
    if not anchors:
        raise SimulationError("dataset has no anchor items")
    spec = ModelSpec(
        item_names=dataset.item_names,
        constraint_level=m.PARTIAL_SCALAR_ANCHOR,
        reference_group=dataset.groups[0],
        anchor_set=frozenset(anchors),
    )
    return _mu_focal(dataset, spec)


_ESTIMATOR_FNS = {
    "scale": estimate_scale,
    "full_scalar": estimate_full_scalar,
    "partial_anchor": estimate_partial_anchor,
}


@dataclass(frozen=True)
class RepRecord:
    condition_index: int
    rep_index: int
    estimates: tuple  # (name, value-or-nan) pairs in ESTIMATORS order
    converged: tuple  # (name, bool) pairs in ESTIMATORS order


@dataclass(frozen=True)
class ReportCell:
    condition_index: int
    estimator: str
    mean: float
    bias: float
    sd: float
    conv_rate: float
    n_converged: int
    n_total: int
    flagged: bool


@dataclass(frozen=True)
class SimulationReport:
    conditions: tuple[SimCondition, ...]
    cells: tuple[ReportCell, ...]
    replications: tuple[RepRecord, ...] = ()
    metadata: tuple = (("standardization", STANDARDIZATION_NOTE),)

    def cell(self, condition_index, estimator):
        for c in self.cells:
            if c.condition_index == condition_index and c.estimator == estimator:
                return c
        raise KeyError((condition_index, estimator))


def _run_replication(args):
    condition_index, cond, rep_index = args
    dataset = generate_replication(cond, rep_index)
    estimates = []
    converged = []
    for name in ESTIMATORS:
        try:
            value = _ESTIMATOR_FNS[name](dataset, cond)
            ok = True
        except (NonConvergedReplication, SimulationError):
            value = float("nan")
            ok = False
        estimates.append((name, float(value)))
        converged.append((name, ok))
    return RepRecord(
        condition_index=condition_index,
        rep_index=rep_index,
        estimates=tuple(estimates),
        converged=tuple(converged),
    )


def run_grid(conditions, *, workers=1, keep_replications=True):
    """Run every condition x replication x estimator cell.

    Deterministic for a fixed base seed: replications are independently
    seeded and records are sorted by (condition, replication) before
    aggregation, so the report does not depend on ``workers``.
    """
    conditions = tuple(conditions)
    tasks = [
        (ci, cond, r)
        for ci, cond in enumerate(conditions)
        for r in range(cond.replications)
    ]
    if workers is None:
        import os

        workers = max(1, os.cpu_count() or 1)
    if workers <= 1:
        records = [_run_replication(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_replication, tasks, chunksize=chunk))
    records.sort(key=lambda r: (r.condition_index, r.rep_index))
    cells = []
    for ci, cond in enumerate(conditions):
        recs = [r for r in records if r.condition_index == ci]
        for name in ESTIMATORS:
            vals = np.array(
                [dict(r.estimates)[name] for r in recs if dict(r.converged)[name]]
            )
            n_conv = vals.size
            mean = float(vals.mean()) if n_conv else float("nan")
            sd = float(vals.std(ddof=1)) if n_conv > 1 else float("nan")
            rate = n_conv / cond.replications
            cells.append(
                ReportCell(
                    condition_index=ci,
                    estimator=name,
                    mean=mean,
                    bias=mean - cond.true_gap if n_conv else float("nan"),
                    sd=sd,
                    conv_rate=rate,
                    n_converged=n_conv,
                    n_total=cond.replications,
                    flagged=rate < 0.5,
                )
            )
    return SimulationReport(
        conditions=conditions,
        cells=tuple(cells),
        replications=tuple(records) if keep_replications else (),
    )


def default_grid(base_seed=202408, replications=500, n=1000):
    """Full factorial: shift x loading x residual variance x categories."""
    conditions = []
    for delta in (0.0, 0.1, 0.3, 0.5):
        for loading in (0.8, 0.9, 1.0):
            for resid_var in (0.25, 1.0):
                for k in (4, 7):
                    conditions.append(
                        SimCondition(
                            delta=delta, loading=loading, resid_var=resid_var,
                            n_categories=k, n=n, replications=replications,
                            base_seed=base_seed,
                        )
                    )
    return tuple(conditions)


def desk_grid(base_seed=202408, replications=200, n=1000):
    """Small grid exercising only the shift dimension at canonical settings."""
    return tuple(
        SimCondition(
            delta=delta, loading=0.9, resid_var=1.0, n_categories=4,
            n=n, replications=replications, base_seed=base_seed,
        )
        for delta in (0.0, 0.1, 0.3, 0.5)
    )
