"""File ingestion and result serialization.

Input is UTF-8 CSV with a header row; categories are integers, missing
responses are empty fields or ``NA``.  Run configuration is JSON with an
explicit schema version; unknown keys are errors so a typo cannot silently
drop part of a simulation grid.

Every emitted file is written to a temporary name and atomically renamed,
and all numeric output uses shortest round-trip representations, so a rerun
on identical inputs produces byte-identical files.  Structured (JSON)
results re-parse into the original objects.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .analysis import PolicyEffect, ThresholdDiffRow, ThresholdDiffTable
from .estimation import FitResult
from .invariance import LadderResult, LadderRow
from .model import (
    DatasetValidationError,
    Item,
    ITEM_ROLES,
    MISSING_CODE,
    OrdinalDataset,
    ROLE_SCALE,
    ValidationIssue,
)
from .simulation import (
    ITEM_CHOICES,
    RepRecord,
    ReportCell,
    SimCondition,
    SimulationReport,
    ESTIMATORS,
)

SCHEMA_VERSION = 1
MISSING_TOKENS = ("", "NA")
FORMATS = ("table", "structured")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ScoreTable:
    """Per-respondent factor scores in input row order."""

    rows: tuple  # (row, group, score, posterior_sd)


# --------------------------------------------------------------------------
# configuration

_DATA_KEYS = {
    "csv", "group_column", "groups", "reference_group", "items",
    "outcome_column", "covariate_columns",
}
_ITEM_KEYS = {"name", "categories", "role"}
_MODEL_KEYS = {
    "anchors", "constraint_level", "quadrature_points", "fv_constrains",
}
_SIMULATE_KEYS = {
    "delta", "loading", "resid_var", "n_categories", "n", "replications",
    "true_gap", "scale_items", "full_scalar_items", "base_seed",
}
_TOP_KEYS = {"schema_version", "data", "model", "simulate"}


def _check_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def load_config(path):
    """Parse and strictly validate a JSON run configuration."""
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}"
        )
    if "data" in cfg:
        _check_keys(cfg["data"], _DATA_KEYS, "data")
        for item in cfg["data"].get("items", ()):
            _check_keys(item, _ITEM_KEYS, f"data.items[{item.get('name')!r}]")
            if "name" not in item:
                raise ConfigError("every data item needs a name")
            if "role" in item and item["role"] not in ITEM_ROLES:
                raise ConfigError(f"unknown item role {item['role']!r}")
    if "model" in cfg:
        _check_keys(cfg["model"], _MODEL_KEYS, "model")
    if "simulate" in cfg:
        _check_keys(cfg["simulate"], _SIMULATE_KEYS, "simulate")
        sim = cfg["simulate"]
        for key in ("scale_items", "full_scalar_items"):
            if key in sim and sim[key] not in ITEM_CHOICES:
                raise ConfigError(f"simulate.{key} must be one of {ITEM_CHOICES}")
    return cfg


def conditions_from_config(sim_cfg, base_seed=None):
    """Cross the listed levels of a ``simulate`` section into conditions."""

    def levels(key, default):
        value = sim_cfg.get(key, default)
        return list(value) if isinstance(value, (list, tuple)) else [value]

    seed = base_seed if base_seed is not None else sim_cfg.get("base_seed", 202408)
    conditions = []
    for delta in levels("delta", [0.0]):
        for loading in levels("loading", [0.9]):
            for resid_var in levels("resid_var", [1.0]):
                for k in levels("n_categories", [4]):
                    conditions.append(
                        SimCondition(
                            delta=float(delta),
                            loading=float(loading),
                            resid_var=float(resid_var),
                            n_categories=int(k),
                            n=int(sim_cfg.get("n", 1000)),
                            true_gap=float(sim_cfg.get("true_gap", 0.2)),
                            scale_items=sim_cfg.get("scale_items", "dif_only_4"),
                            full_scalar_items=sim_cfg.get("full_scalar_items", "all_8"),
                            replications=int(sim_cfg.get("replications", 500)),
                            base_seed=int(seed),
                        )
                    )
    return tuple(conditions)


# --------------------------------------------------------------------------
# CSV ingestion

def load_csv(path, schema):
    """Read an ordinal dataset from CSV.

    ``schema`` is the ``data`` section of a config: group column, item
    descriptors (category counts optional, inferred from the data when
    absent), optional outcome / covariate columns, optional expected group
    labels and reference group.
    """
    group_col = schema.get("group_column")
    if not group_col:
        raise ConfigError("data.group_column is required")
    item_specs = schema.get("items")
    if not item_specs:
        raise ConfigError("data.items is required")
    outcome_col = schema.get("outcome_column")
    covariate_cols = list(schema.get("covariate_columns", ()))

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [group_col] + [it["name"] for it in item_specs] + covariate_cols
        if outcome_col:
            wanted.append(outcome_col)
        missing_cols = [c for c in wanted if c not in header]
        if missing_cols:
            raise DatasetValidationError(
                [ValidationIssue(None, None, f"unknown column {c!r}") for c in missing_cols]
            )
        records = list(reader)

    issues = []
    labels = []
    codes = np.zeros((len(records), len(item_specs)), dtype=np.int64)
    gidx = np.zeros(len(records), dtype=np.int64)
    outcome = np.full(len(records), np.nan) if outcome_col else None
    covs = np.full((len(records), len(covariate_cols)), np.nan) if covariate_cols else None

    for r, rec in enumerate(records):
        label = rec[group_col].strip()
        if label not in labels:
            labels.append(label)
        gidx[r] = labels.index(label)
        for j, ispec in enumerate(item_specs):
            raw = rec[ispec["name"]].strip()
            if raw in MISSING_TOKENS:
                codes[r, j] = MISSING_CODE
                continue
            try:
                codes[r, j] = int(raw)
            except ValueError:
                issues.append(
                    ValidationIssue(r, ispec["name"], f"non-integer category {raw!r}")
                )
        if outcome_col:
            raw = rec[outcome_col].strip()
            if raw not in MISSING_TOKENS:
                try:
                    outcome[r] = float(raw)
                except ValueError:
                    issues.append(ValidationIssue(r, outcome_col, f"non-numeric outcome {raw!r}"))
        for c, col in enumerate(covariate_cols):
            raw = rec[col].strip()
            if raw not in MISSING_TOKENS:
                try:
                    covs[r, c] = float(raw)
                except ValueError:
                    issues.append(ValidationIssue(r, col, f"non-numeric covariate {raw!r}"))

    expected = schema.get("groups")
    if expected:
        unexpected = [lab for lab in labels if lab not in expected]
        for lab in unexpected:
            issues.append(ValidationIssue(None, None, f"unexpected group label {lab!r}"))
    reference = schema.get("reference_group")
    if reference is not None:
        if reference not in labels:
            issues.append(ValidationIssue(None, None, f"reference group {reference!r} not found"))
        else:
            order = [reference] + [lab for lab in labels if lab != reference]
            remap = np.array([order.index(lab) for lab in labels])
            gidx = remap[gidx]
            labels = order

    items = []
    for j, ispec in enumerate(item_specs):
        observed = codes[:, j][codes[:, j] != MISSING_CODE]
        if observed.size == 0:
            issues.append(ValidationIssue(None, ispec["name"], "all responses missing"))
            n_cat = int(ispec.get("categories", 2))
        else:
            n_cat = int(ispec.get("categories", observed.max()))
        items.append(Item(ispec["name"], max(n_cat, 2), ispec.get("role", ROLE_SCALE)))

    if issues:
        raise DatasetValidationError(issues)
    return OrdinalDataset(
        items=tuple(items),
        groups=tuple(labels),
        codes=codes,
        group_index=gidx,
        outcome=outcome,
        covariates=covs,
        outcome_name=outcome_col,
        covariate_names=tuple(covariate_cols),
    )


# --------------------------------------------------------------------------
# emission

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-emit-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_table(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return _atomic_write(path, "\n".join(lines) + "\n")


def write_structured(path, kind, payload):
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "payload": payload}
    return _atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _f(value):
    """JSON-safe float (NaN and infinities become null)."""
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _nan(value):
    return math.nan if value is None else float(value)


def _ladder_files(result, out_dir, formats, basename):
    paths = []
    columns = ("level", "df", "loglik", "delta_chisq", "delta_df", "p",
               "converged", "verdict")
    rows = [
        (r.level, r.df_model, r.loglik, r.delta_chisq, r.delta_df, r.p_value,
         r.converged, r.verdict or "")
        for r in result.rows
    ]
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, rows))
    if "structured" in formats:
        payload = {
            "item_names": list(result.item_names),
            "groups": list(result.groups),
            "rows": [
                {
                    "level": r.level,
                    "df_model": r.df_model,
                    "n_free": r.n_free,
                    "loglik": _f(r.loglik),
                    "converged": bool(r.converged),
                    "delta_chisq": _f(r.delta_chisq),
                    "delta_df": r.delta_df,
                    "p_value": _f(r.p_value),
                    "verdict": r.verdict,
                }
                for r in result.rows
            ],
        }
        paths.append(
            write_structured(os.path.join(out_dir, f"{basename}.json"), "ladder", payload)
        )
    return paths


def _diff_files(table, out_dir, formats, basename):
    paths = []
    columns = ("item", "threshold", "focal", "reference", "diff", "se", "role")
    rows = [
        (r.item, r.index, r.focal, r.reference, r.diff, r.se, r.role)
        for r in table.rows
    ]
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, rows))
    if "structured" in formats:
        payload = {
            "focal_group": table.focal_group,
            "reference_group": table.reference_group,
            "rows": [
                {
                    "item": r.item,
                    "index": r.index,
                    "focal": _f(r.focal),
                    "reference": _f(r.reference),
                    "diff": _f(r.diff),
                    "se": _f(r.se),
                    "role": r.role,
                }
                for r in table.rows
            ],
        }
        paths.append(
            write_structured(
                os.path.join(out_dir, f"{basename}.json"), "threshold_diff", payload
            )
        )
    return paths


def _policy_files(effect, out_dir, formats, basename):
    paths = []
    columns = (
        "outcome", "mode", "beta", "beta_se", "trait_gap", "trait_gap_se",
        "policy_gap", "policy_gap_se", "pooled",
    )
    rows = [
        (
            effect.outcome, effect.mode, effect.beta, effect.beta_se,
            effect.trait_gap, effect.trait_gap_se, effect.policy_gap,
            effect.policy_gap_se, effect.pooled,
        )
    ]
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, rows))
    if "structured" in formats:
        payload = {
            "outcome": effect.outcome,
            "mode": effect.mode,
            "beta": _f(effect.beta),
            "beta_se": _f(effect.beta_se),
            "trait_gap": _f(effect.trait_gap),
            "trait_gap_se": _f(effect.trait_gap_se),
            "policy_gap": _f(effect.policy_gap),
            "policy_gap_se": _f(effect.policy_gap_se),
            "beta_by_group": (
                None
                if effect.beta_by_group is None
                else {k: [_f(v[0]), _f(v[1])] for k, v in effect.beta_by_group.items()}
            ),
            "pooled": effect.pooled,
            "se_assumes_independence": effect.se_assumes_independence,
            "notes": list(effect.notes),
        }
        paths.append(
            write_structured(os.path.join(out_dir, f"{basename}.json"), "policy", payload)
        )
    return paths


def _score_files(table, out_dir, formats, basename):
    paths = []
    columns = ("row", "group", "score", "posterior_sd")
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, table.rows))
    if "structured" in formats:
        payload = {
            "rows": [
                {"row": r, "group": g, "score": _f(s), "posterior_sd": _f(sd)}
                for r, g, s, sd in table.rows
            ]
        }
        paths.append(
            write_structured(os.path.join(out_dir, f"{basename}.json"), "scores", payload)
        )
    return paths


def _condition_payload(cond):
    return {
        "delta": cond.delta,
        "loading": cond.loading,
        "resid_var": cond.resid_var,
        "n_categories": cond.n_categories,
        "n": cond.n,
        "true_gap": cond.true_gap,
        "scale_items": cond.scale_items,
        "full_scalar_items": cond.full_scalar_items,
        "replications": cond.replications,
        "base_seed": cond.base_seed,
    }


def _simulation_files(report, out_dir, formats, basename):
    paths = []
    columns = (
        "delta", "lambda", "resid_var", "k", "estimator", "mean", "bias",
        "sd", "conv_rate", "n", "true_gap", "n_converged", "n_total", "flagged",
    )
    rows = []
    for cell in report.cells:
        cond = report.conditions[cell.condition_index]
        rows.append(
            (
                cond.delta, cond.loading, cond.resid_var, cond.n_categories,
                cell.estimator, cell.mean, cell.bias, cell.sd, cell.conv_rate,
                cond.n, cond.true_gap, cell.n_converged, cell.n_total, cell.flagged,
            )
        )
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, rows))
        if report.replications:
            rep_cols = ["condition", "rep"]
            for name in ESTIMATORS:
                rep_cols += [name, f"{name}_converged"]
            rep_rows = []
            for rec in report.replications:
                row = [rec.condition_index, rec.rep_index]
                est = dict(rec.estimates)
                conv = dict(rec.converged)
                for name in ESTIMATORS:
                    row += [est[name], conv[name]]
                rep_rows.append(tuple(row))
            paths.append(
                write_table(
                    os.path.join(out_dir, f"{basename}_replications.csv"),
                    tuple(rep_cols),
                    rep_rows,
                )
            )
    if "structured" in formats:
        payload = {
            "metadata": {k: v for k, v in report.metadata},
            "conditions": [_condition_payload(c) for c in report.conditions],
            "cells": [
                {
                    "condition_index": c.condition_index,
                    "estimator": c.estimator,
                    "mean": _f(c.mean),
                    "bias": _f(c.bias),
                    "sd": _f(c.sd),
                    "conv_rate": c.conv_rate,
                    "n_converged": c.n_converged,
                    "n_total": c.n_total,
                    "flagged": c.flagged,
                }
                for c in report.cells
            ],
            "replications": [
                {
                    "condition_index": r.condition_index,
                    "rep_index": r.rep_index,
                    "estimates": {k: _f(v) for k, v in r.estimates},
                    "converged": {k: v for k, v in r.converged},
                }
                for r in report.replications
            ],
        }
        paths.append(
            write_structured(os.path.join(out_dir, f"{basename}.json"), "simulation", payload)
        )
    return paths


def _coord_row(coord, params, status, ses):
    kind = coord[0]
    group = item = thr = ""
    if kind in ("loading", "threshold", "resid_var"):
        group = params.groups[coord[1]]
        item = params.item_names[coord[2]]
        if kind == "threshold":
            thr = coord[3] + 1
    elif kind == "intercept":
        item = params.item_names[coord[1]]
    else:
        group = params.groups[coord[1]]
    se = ses.get(coord, math.nan) if ses else math.nan
    return (kind, group, item, thr, params.value_of(coord), se, status)


def _fit_files(result, out_dir, formats, basename):
    paths = []
    params = result.params
    ses = result.standard_errors or {}
    rows = [_coord_row(c, params, "free", ses) for c in result.free_coords]
    rows += [
        _coord_row(c, params, "tied", {}) for c, _ in result.constraints.ties
    ]
    rows += [
        _coord_row(c, params, "fixed", {}) for c, _ in result.constraints.fixed
    ]
    columns = ("kind", "group", "item", "threshold", "value", "se", "status")
    if "table" in formats:
        paths.append(write_table(os.path.join(out_dir, f"{basename}.csv"), columns, rows))
    if "structured" in formats:
        payload = {
            "loglik": _f(result.loglik),
            "n_free": result.n_free,
            "converged": result.converged,
            "iterations": result.iterations,
            "gradient_norm": _f(result.gradient_norm),
            "constraint_level": result.spec_echo.constraint_level,
            "reference_group": result.spec_echo.reference_group,
            "item_names": list(result.spec_echo.item_names),
            "anchor_set": sorted(result.spec_echo.anchor_set),
            "parameters": [
                {
                    "kind": r[0], "group": r[1], "item": r[2],
                    "threshold": r[3] if r[3] != "" else None,
                    "value": _f(r[4]), "se": _f(r[5]), "status": r[6],
                }
                for r in rows
            ],
        }
        paths.append(
            write_structured(os.path.join(out_dir, f"{basename}.json"), "fit", payload)
        )
    return paths


def emit_results(result, out_dir, formats=FORMATS, basename=None):
    """Write a result object to ``out_dir`` in the requested formats.

    Returns the list of paths written.  Writes are atomic; numeric text is
    full precision.
    """
    formats = tuple(formats)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ConfigError(f"unknown output formats: {unknown}")
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(result, LadderResult):
        return _ladder_files(result, out_dir, formats, basename or "ladder")
    if isinstance(result, ThresholdDiffTable):
        return _diff_files(result, out_dir, formats, basename or "threshold_diff")
    if isinstance(result, PolicyEffect):
        return _policy_files(result, out_dir, formats, basename or "policy")
    if isinstance(result, ScoreTable):
        return _score_files(result, out_dir, formats, basename or "scores")
    if isinstance(result, SimulationReport):
        return _simulation_files(result, out_dir, formats, basename or "simulation")
    if isinstance(result, FitResult):
        return _fit_files(result, out_dir, formats, basename or "fit")
    raise ConfigError(f"no emitter for {type(result).__name__}")


# --------------------------------------------------------------------------
# structured re-parsing

def parse_structured(path):
    """Reconstruct the result object emitted by :func:`write_structured`."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {doc.get('schema_version')!r}")
    kind = doc.get("kind")
    payload = doc.get("payload", {})
    if kind == "ladder":
        return LadderResult(
            rows=tuple(
                LadderRow(
                    level=r["level"],
                    df_model=r["df_model"],
                    n_free=r["n_free"],
                    loglik=_nan(r["loglik"]),
                    converged=r["converged"],
                    delta_chisq=None if r["delta_chisq"] is None else float(r["delta_chisq"]),
                    delta_df=r["delta_df"],
                    p_value=None if r["p_value"] is None else float(r["p_value"]),
                    verdict=r["verdict"],
                )
                for r in payload["rows"]
            ),
            item_names=tuple(payload["item_names"]),
            groups=tuple(payload["groups"]),
        )
    if kind == "threshold_diff":
        return ThresholdDiffTable(
            rows=tuple(
                ThresholdDiffRow(
                    item=r["item"], index=r["index"], focal=_nan(r["focal"]),
                    reference=_nan(r["reference"]), diff=_nan(r["diff"]),
                    se=_nan(r["se"]), role=r["role"],
                )
                for r in payload["rows"]
            ),
            focal_group=payload["focal_group"],
            reference_group=payload["reference_group"],
        )
    if kind == "policy":
        return PolicyEffect(
            outcome=payload["outcome"],
            mode=payload["mode"],
            beta=_nan(payload["beta"]),
            beta_se=_nan(payload["beta_se"]),
            trait_gap=_nan(payload["trait_gap"]),
            trait_gap_se=_nan(payload["trait_gap_se"]),
            policy_gap=_nan(payload["policy_gap"]),
            policy_gap_se=_nan(payload["policy_gap_se"]),
            beta_by_group=(
                None
                if payload["beta_by_group"] is None
                else {
                    k: (_nan(v[0]), _nan(v[1]))
                    for k, v in payload["beta_by_group"].items()
                }
            ),
            pooled=payload["pooled"],
            se_assumes_independence=payload["se_assumes_independence"],
            notes=tuple(payload["notes"]),
        )
    if kind == "scores":
        return ScoreTable(
            rows=tuple(
                (r["row"], r["group"], _nan(r["score"]), _nan(r["posterior_sd"]))
                for r in payload["rows"]
            )
        )
    if kind == "simulation":
        conditions = tuple(SimCondition(**c) for c in payload["conditions"])
        return SimulationReport(
            conditions=conditions,
            cells=tuple(
                ReportCell(
                    condition_index=c["condition_index"],
                    estimator=c["estimator"],
                    mean=_nan(c["mean"]),
                    bias=_nan(c["bias"]),
                    sd=_nan(c["sd"]),
                    conv_rate=c["conv_rate"],
                    n_converged=c["n_converged"],
                    n_total=c["n_total"],
                    flagged=c["flagged"],
                )
                for c in payload["cells"]
            ),
            replications=tuple(
                RepRecord(
                    condition_index=r["condition_index"],
                    rep_index=r["rep_index"],
                    estimates=tuple((k, _nan(r["estimates"][k])) for k in ESTIMATORS),
                    converged=tuple((k, r["converged"][k]) for k in ESTIMATORS),
                )
                for r in payload["replications"]
            ),
            metadata=tuple((k, v) for k, v in sorted(payload["metadata"].items())),
        )
    raise ConfigError(f"unknown structured kind {kind!r}")
