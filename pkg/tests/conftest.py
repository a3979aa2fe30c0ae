"""Shared fixtures: small chains and datasets sized for fast tests."""

import numpy as np
import pytest

from _acceptance_report import LINES as ACCEPTANCE_LINES
from conformer_forge.data import SyntheticConfig, base_helix, generate_synthetic, split_dataset


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def helix16():
    """A 16-atom helix with mild noise so no two distances tie exactly."""
    coords = base_helix(16, 3.8)
    return coords + np.random.default_rng(0).normal(0.0, 0.05, coords.shape)


@pytest.fixture
def helix32():
    coords = base_helix(32, 3.8)
    return coords + np.random.default_rng(1).normal(0.0, 0.05, coords.shape)


@pytest.fixture
def tiny_dataset():
    """Small labeled ensemble: 16 atoms, 2 classes, 30 frames, with splits."""
    cfg = SyntheticConfig(atom_count=16, class_count=2, frames_per_class=15,
                          breath_amplitude=0.05, seed=3)
    ds = generate_synthetic(cfg)
    ds.splits = split_dataset(ds, seed=0)
    return ds
