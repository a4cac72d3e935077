#!/usr/bin/env python3
"""Regenerate the synthetic demo dataset and the shipped run configs.

The demo is produced by the simulation module at a fixed seed (two groups,
eight items of which four carry a threshold shift, an outcome, one
covariate) so every CLI command has a runnable example.  Rerunning this
script reproduces data/ byte for byte.
"""

import csv
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from anchorcfa.model import MISSING_CODE, ROLE_ANCHOR
from anchorcfa.simulation import generate_demo_dataset

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data")
DEMO_SEED = 20240817


def write_demo_csv(dataset, path):
    names = [it.name for it in dataset.items]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group"] + names + ["policy", "covar_1"])
        for i in range(dataset.n_rows):
            row = [dataset.groups[dataset.group_index[i]]]
            for j in range(dataset.n_items):
                code = int(dataset.codes[i, j])
                row.append("" if code == MISSING_CODE else str(code))
            row.append(repr(float(dataset.outcome[i])))
            row.append(repr(float(dataset.covariates[i, 0])))
            writer.writerow(row)


def demo_config(dataset):
    return {
        "schema_version": 1,
        "data": {
            "csv": "data/demo.csv",
            "group_column": "group",
            "reference_group": dataset.groups[0],
            "groups": list(dataset.groups),
            "items": [
                {"name": it.name, "categories": it.n_categories, "role": it.role}
                for it in dataset.items
            ],
            "outcome_column": "policy",
            "covariate_columns": ["covar_1"],
        },
        "model": {
            "anchors": [it.name for it in dataset.items if it.role == ROLE_ANCHOR],
            "constraint_level": "partial_scalar_anchor",
            "quadrature_points": 31,
        },
    }


def desk_sim_config():
    return {
        "schema_version": 1,
        "simulate": {
            "delta": [0.0, 0.1, 0.3, 0.5],
            "loading": [0.9],
            "resid_var": [1.0],
            "n_categories": [4],
            "n": 1000,
            "replications": 200,
            "true_gap": 0.2,
            "scale_items": "dif_only_4",
            "full_scalar_items": "all_8",
            "base_seed": 202408,
        },
    }


def full_sim_config():
    return {
        "schema_version": 1,
        "simulate": {
            "delta": [0.0, 0.1, 0.3, 0.5],
            "loading": [0.8, 0.9, 1.0],
            "resid_var": [0.25, 1.0],
            "n_categories": [4, 7],
            "n": 1000,
            "replications": 500,
            "true_gap": 0.2,
            "scale_items": "dif_only_4",
            "full_scalar_items": "all_8",
            "base_seed": 202408,
        },
    }


def main():
    os.makedirs(DATA_DIR, exist_ok=True)
    dataset = generate_demo_dataset(seed=DEMO_SEED)
    write_demo_csv(dataset, os.path.join(DATA_DIR, "demo.csv"))
    for name, cfg in (
        ("demo_config.json", demo_config(dataset)),
        ("sim_desk.json", desk_sim_config()),
        ("sim_full.json", full_sim_config()),
    ):
        with open(os.path.join(DATA_DIR, name), "w", encoding="utf-8") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote demo.csv ({dataset.n_rows} rows) and configs to {DATA_DIR}")


if __name__ == "__main__":
    main()
