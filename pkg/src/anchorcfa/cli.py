"""Command-line surface tying the toolkit together.

Subcommands: ``validate``, ``anchors``, ``ladder``, ``fit``, ``dif``,
``gap``, ``policy``, ``simulate``.  Exit codes: 0 success, 2 validation
error, 3 non-convergence, 4 IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import model as m
from .analysis import (
    AnalysisError,
    eap_scores,
    latent_gap,
    structural_effect,
    threshold_differences,
)
from .estimation import EstimationError, NonConvergenceError, fit
from .invariance import (
    InvarianceError,
    run_anchor_validation,
    run_invariance_ladder,
)
from .io import (
    ConfigError,
    ScoreTable,
    conditions_from_config,
    emit_results,
    load_config,
    load_csv,
    write_structured,
)
from .likelihood import LikelihoodError
from .model import DatasetValidationError, ModelError, ModelSpec, validate_dataset
from .simulation import SimulationError, run_grid

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4


class NonConvergence(RuntimeError):
    pass


def _add_common(parser):
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--format", default="table,structured",
                        help="comma-separated subset of: table,structured")
    parser.add_argument("--seed", type=int, default=None,
                        help="base seed for stochastic commands")
    parser.add_argument("--quadrature", type=int, default=None,
                        help="odd quadrature point count (>= 7)")
    parser.add_argument("--reference-group", default=None,
                        help="group label fixed at latent mean 0, variance 1")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel commands (results unchanged)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anchorcfa",
        description="Multi-group ordinal factor analysis with anchor-based "
                    "partial invariance",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate", "check dataset invariants and exit"),
        ("anchors", "anchor-battery invariance ladder"),
        ("ladder", "full measurement-invariance ladder"),
        ("fit", "single model fit with standard errors"),
        ("dif", "threshold differences between groups"),
        ("gap", "latent mean gap and factor scores"),
        ("policy", "outcome slope and implied policy difference"),
        ("simulate", "Monte Carlo estimator-bias grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "fit":
            p.add_argument("--level", default=None, choices=m.CONSTRAINT_LEVELS,
                           help="constraint level (defaults to config)")
        if name == "policy":
            p.add_argument("--mode", default="joint", choices=("two_step", "joint"))
            p.add_argument("--no-standardize-outcome", action="store_true",
                           help="keep the outcome on its raw scale")
            p.add_argument("--no-covariates", action="store_true")
    return parser


def _load_dataset(cfg, args):
    data_cfg = dict(cfg.get("data") or {})
    if not data_cfg:
        raise ConfigError("config has no data section")
    if args.reference_group:
        data_cfg["reference_group"] = args.reference_group
    path = data_cfg.pop("csv", None)
    if not path:
        raise ConfigError("data.csv is required")
    return load_csv(path, data_cfg)


def _model_spec(cfg, args, dataset, level=None):
    model_cfg = cfg.get("model") or {}
    anchors = model_cfg.get("anchors", [])
    level = level or model_cfg.get("constraint_level", m.PARTIAL_SCALAR_ANCHOR)
    quadrature = args.quadrature or model_cfg.get("quadrature_points", 31)
    return ModelSpec(
        item_names=dataset.item_names,
        constraint_level=level,
        reference_group=args.reference_group or dataset.groups[0],
        anchor_set=frozenset(anchors),
        quadrature_points=int(quadrature),
        fv_constrains=model_cfg.get("fv_constrains", m.FV_MEAN),
    )


def _formats(args):
    formats = tuple(f for f in args.format.split(",") if f)
    return formats


def _print_ladder(result):
    print(f"{'level':<22}{'df':>6}{'loglik':>14}{'dchi2':>10}{'ddf':>5}{'p':>8}  verdict")
    for r in result.rows:
        d = "" if r.delta_chisq is None else f"{r.delta_chisq:.3f}"
        df = "" if r.delta_df is None else str(r.delta_df)
        p = "" if r.p_value is None else f"{r.p_value:.3f}"
        flag = "" if r.converged else " [not converged]"
        print(f"{r.level:<22}{r.df_model:>6}{r.loglik:>14.3f}{d:>10}{df:>5}{p:>8}  "
              f"{r.verdict or ''}{flag}")


def _cmd_validate(cfg, args):
    dataset = _load_dataset(cfg, args)
    validate_dataset(dataset)
    print(f"dataset OK: {dataset.n_rows} rows, {dataset.n_items} items, "
          f"{len(dataset.groups)} groups ({', '.join(dataset.groups)})")
    return EXIT_OK


def _cmd_anchors(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    anchors = (cfg.get("model") or {}).get("anchors")
    if not anchors:
        raise ConfigError("model.anchors is required for the anchors command")
    result = run_anchor_validation(
        dataset, anchors,
        reference_group=args.reference_group or dataset.groups[0],
        quadrature_points=args.quadrature or 31,
    )
    _print_ladder(result)
    for path in emit_results(result, args.out, _formats(args), basename="anchors"):
        print("wrote", path)
    if not all(r.converged for r in result.rows):
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_ladder(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    spec = _model_spec(cfg, args, dataset, level=m.CONFIGURAL)
    result = run_invariance_ladder(dataset, spec)
    _print_ladder(result)
    for path in emit_results(result, args.out, _formats(args), basename="ladder"):
        print("wrote", path)
    if not all(r.converged for r in result.rows):
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_fit(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    spec = _model_spec(cfg, args, dataset, level=args.level)
    result = fit(dataset, spec, compute_se=True)
    print(f"{spec.constraint_level}: loglik={result.loglik:.4f} "
          f"n_free={result.n_free} converged={result.converged} "
          f"iterations={result.iterations}")
    for path in emit_results(result, args.out, _formats(args), basename="fit"):
        print("wrote", path)
    if not result.converged:
        raise NonConvergence(spec.constraint_level)
    return EXIT_OK


def _cmd_dif(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    spec = _model_spec(cfg, args, dataset)
    result = fit(dataset, spec, compute_se=True)
    if not result.converged:
        raise NonConvergence(spec.constraint_level)
    table = threshold_differences(result)
    print(f"threshold differences, {table.focal_group} minus {table.reference_group}:")
    for r in table.rows:
        print(f"  {r.item:<12} t{r.index}: {r.diff:+.3f} ({r.role})")
    for path in emit_results(table, args.out, _formats(args), basename="threshold_diff"):
        print("wrote", path)
    return EXIT_OK


def _cmd_gap(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    spec = _model_spec(cfg, args, dataset)
    result = fit(dataset, spec, compute_se=True)
    if not result.converged:
        raise NonConvergence(spec.constraint_level)
    gap, se = latent_gap(result)
    print(f"latent gap (focal minus reference): {gap:.4f} (se {se:.4f})")
    scores, sds = eap_scores(result, dataset)
    table = ScoreTable(
        rows=tuple(
            (i, dataset.groups[dataset.group_index[i]], float(scores[i]), float(sds[i]))
            for i in range(dataset.n_rows)
        )
    )
    paths = emit_results(table, args.out, _formats(args), basename="scores")
    if "structured" in _formats(args):
        import os

        paths.append(
            write_structured(
                os.path.join(args.out, "latent_gap.json"),
                "latent_gap",
                {"gap": gap, "se": None if np.isnan(se) else se},
            )
        )
    for path in paths:
        print("wrote", path)
    return EXIT_OK


def _cmd_policy(cfg, args):
    dataset = validate_dataset(_load_dataset(cfg, args))
    if dataset.outcome is None:
        raise ConfigError("policy command requires data.outcome_column")
    if not args.no_standardize_outcome:
        y = dataset.outcome
        obs = ~np.isnan(y)
        scale = float(y[obs].std(ddof=1))
        if scale <= 0:
            raise AnalysisError("outcome is constant; cannot standardize")
        y = (y - float(y[obs].mean())) / scale
        dataset = dataclasses.replace(dataset, outcome=y)
    spec = _model_spec(cfg, args, dataset)
    effect = structural_effect(
        dataset, spec, mode=args.mode, use_covariates=not args.no_covariates
    )
    print(f"beta={effect.beta:.4f} (se {effect.beta_se:.4f})  "
          f"trait gap={effect.trait_gap:.4f}  policy gap={effect.policy_gap:.4f}")
    for note in effect.notes:
        print("note:", note)
    for path in emit_results(effect, args.out, _formats(args), basename="policy"):
        print("wrote", path)
    return EXIT_OK


def _cmd_simulate(cfg, args):
    sim_cfg = cfg.get("simulate")
    if not sim_cfg:
        raise ConfigError("config has no simulate section")
    conditions = conditions_from_config(sim_cfg, base_seed=args.seed)
    report = run_grid(conditions, workers=max(1, args.threads))
    for cell in report.cells:
        cond = report.conditions[cell.condition_index]
        print(f"delta={cond.delta:<4} lambda={cond.loading:<4} s2={cond.resid_var:<5} "
              f"K={cond.n_categories} {cell.estimator:<15} "
              f"bias={cell.bias:+.4f} sd={cell.sd:.4f} conv={cell.conv_rate:.2f}"
              f"{'  FLAGGED' if cell.flagged else ''}")
    for path in emit_results(report, args.out, _formats(args), basename="simulation"):
        print("wrote", path)
    if any(c.flagged for c in report.cells):
        return EXIT_NONCONVERGENCE
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "anchors": _cmd_anchors,
    "ladder": _cmd_ladder,
    "fit": _cmd_fit,
    "dif": _cmd_dif,
    "gap": _cmd_gap,
    "policy": _cmd_policy,
    "simulate": _cmd_simulate,
}

_VALIDATION_ERRORS = (
    DatasetValidationError, ConfigError, ModelError, InvarianceError,
    AnalysisError, SimulationError, EstimationError, LikelihoodError,
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except DatasetValidationError as e:
        print("validation failed:", file=sys.stderr)
        for issue in e.issues:
            print(f"  - {issue}", file=sys.stderr)
        return EXIT_VALIDATION
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NonConvergence, NonConvergenceError) as e:
        print(f"model did not converge: {e}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (OSError, json.JSONDecodeError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
