"""Invariance ladders: anchor validation and the full measurement ladder.

A ladder fits a sequence of increasingly restrictive constraint levels on
the same data, warm-starting each level from the previous solution, and
reports likelihood-ratio rows.  Degrees of freedom for each model are
quoted against the per-group ordinal moment count (thresholds plus
pairwise associations), so they increase as constraints accumulate.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

from . import model as m
from .estimation import chisq_sf, fit
from .model import ModelSpec, build_constraints

LADDER_LEVELS = (m.CONFIGURAL, m.METRIC, m.SCALAR, m.SCALAR_FV)
ANCHOR_LEVELS = (m.CONFIGURAL, m.METRIC, m.SCALAR)
ALPHA = 0.05


class InvarianceError(ValueError):
    """Invalid ladder request."""


@dataclass(frozen=True)
class LadderRow:
    level: str
    df_model: int
    n_free: int
    loglik: float
    converged: bool
    delta_chisq: float | None = None
    delta_df: int | None = None
    p_value: float | None = None
    verdict: str | None = None


@dataclass(frozen=True)
class LadderResult:
    rows: tuple[LadderRow, ...]
    item_names: tuple[str, ...]
    groups: tuple[str, ...]

    def row(self, level):
        for r in self.rows:
            if r.level == level:
                return r
        raise KeyError(level)


def moment_count(dataset, item_names):
    """Per-group ordinal moment count: thresholds plus pairwise associations."""
    n_thr = sum(dataset.items[dataset.item_index(n)].n_categories - 1 for n in item_names)
    J = len(item_names)
    return len(dataset.groups) * (n_thr + J * (J - 1) // 2)


def _run_ladder(dataset, base_spec, levels):
    if len(dataset.groups) < 2:
        raise InvarianceError("invariance requires >= 2 groups")
    moments = moment_count(dataset, base_spec.item_names)
    rows = []
    fits = []
    prev = None
    broken = False
    for level in levels:
        spec = dataclasses.replace(base_spec, constraint_level=level)
        fr = fit(dataset, spec, start=prev.params if prev is not None else None)
        fits.append(fr)
        delta = ddf = p = None
        verdict = None
        if prev is not None and not broken and fr.converged and prev.converged:
            delta = max(0.0, 2.0 * (prev.loglik - fr.loglik))
            ddf = prev.n_free - fr.n_free
            p = chisq_sf(delta, ddf) if ddf >= 1 else math.nan
            verdict = "pass" if (ddf >= 1 and p >= ALPHA) else "fail"
        if not fr.converged:
            broken = True
        rows.append(
            LadderRow(
                level=level,
                df_model=moments - fr.n_free,
                n_free=fr.n_free,
                loglik=fr.loglik,
                converged=fr.converged,
                delta_chisq=delta,
                delta_df=ddf,
                p_value=p,
                verdict=verdict,
            )
        )
        prev = fr
    return LadderResult(
        rows=tuple(rows), item_names=tuple(base_spec.item_names), groups=dataset.groups
    ), fits


def run_anchor_validation(dataset, anchor_items, *, reference_group=None,
                          quadrature_points=31):
    """Configural/metric/scalar ladder restricted to the anchor battery.

    Candidate anchors pass the metric step when its likelihood-ratio p-value
    is at least 0.05; the scalar row reports where threshold equality starts
    to fail.  Requires at least two anchors and at least two groups.
    """
    anchor_items = list(anchor_items)
    if len(dataset.groups) < 2:
        raise InvarianceError("invariance requires >= 2 groups")
    if len(anchor_items) < 2:
        raise InvarianceError("anchor validation needs at least 2 anchor items")
    names = set(dataset.item_names)
    missing = [a for a in anchor_items if a not in names]
    if missing:
        raise InvarianceError(f"anchor items not in dataset: {missing}")
    # listed order must not matter: follow the dataset's item order
    ordered = tuple(n for n in dataset.item_names if n in set(anchor_items))
    spec = ModelSpec(
        item_names=ordered,
        constraint_level=m.CONFIGURAL,
        reference_group=reference_group or dataset.groups[0],
        quadrature_points=quadrature_points,
    )
    result, _ = _run_ladder(dataset, spec, ANCHOR_LEVELS)
    return result


def run_invariance_ladder(dataset, spec, levels=LADDER_LEVELS):
    """Four-level ladder (configural / metric / scalar / scalar_fv) over all
    items named by the spec, anchors and scale items together.

    A non-converged level marks its row and suppresses every later
    likelihood-ratio entry.
    """
    result, _ = _run_ladder(dataset, spec, levels)
    return result


def build_partial_spec(dataset, anchor_items, *, reference_group=None,
                       quadrature_points=31, include_structural=False):
    """Spec with anchors constrained and remaining item thresholds free."""
    anchor_items = list(anchor_items)
    if not anchor_items:
        raise InvarianceError("at least one anchor item is required")
    names = set(dataset.item_names)
    missing = [a for a in anchor_items if a not in names]
    if missing:
        raise InvarianceError(f"anchor items not in dataset: {missing}")
    if len(anchor_items) == 1:
        warnings.warn(
            "identification rests on a single anchor item; latent-mean "
            "estimates will be sensitive to its invariance",
            stacklevel=2,
        )
    spec = ModelSpec(
        item_names=dataset.item_names,
        constraint_level=m.PARTIAL_SCALAR_ANCHOR,
        reference_group=reference_group or dataset.groups[0],
        anchor_set=frozenset(anchor_items),
        quadrature_points=quadrature_points,
        include_structural=include_structural,
    )
    build_constraints(spec, dataset)  # fail fast on inconsistent requests
    return spec
