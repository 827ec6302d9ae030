"""Session-wide desk-scale fixtures: data and pretrained branches are built once per seed."""

import time
from dataclasses import dataclass

import pytest

from mass.embedding import DatasetManifest, DatasetSplit, split_dataset
from mass.experiment import pretrain_branches
from mass.losses import Branches
from mass.synthgen import generate, reference_config


@dataclass
class Desk:
    seed: int
    manifest: DatasetManifest
    split: DatasetSplit
    branches: Branches
    logs: dict
    pretrain_seconds: float


@pytest.fixture(scope="session")
def desk():
    """``desk(seed)`` returns the reference dataset for ``seed`` with all branches pretrained."""
    cache = {}

    def get(seed: int) -> Desk:
        if seed not in cache:
            cfg = reference_config(seed)
            manifest, records = generate(cfg)
            split = split_dataset(records, cfg.fractions, seed)
            t = time.perf_counter()
            branches, logs = pretrain_branches(split, manifest, seed)
            cache[seed] = Desk(seed, manifest, split, branches, logs, time.perf_counter() - t)
        return cache[seed]

    return get


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
