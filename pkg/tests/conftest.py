import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__)))

from anchorcfa.io import load_config, load_csv

REPO = os.path.join(os.path.dirname(__file__), "..")
DATA = os.path.join(REPO, "data")


@pytest.fixture(scope="session")
def demo_config():
    return load_config(os.path.join(DATA, "demo_config.json"))


@pytest.fixture(scope="session")
def demo_dataset(demo_config):
    data_cfg = dict(demo_config["data"])
    data_cfg["csv"] = os.path.join(DATA, "demo.csv")
    path = data_cfg.pop("csv")
    return load_csv(path, data_cfg)
