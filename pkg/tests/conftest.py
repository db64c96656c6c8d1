"""Shared fixtures: deterministic runtime, synthetic datasets, small configs."""

import os

os.environ.setdefault("PARTSEG_DETERMINISTIC", "1")

from pathlib import Path

import pytest
import torch

from partprompt.config import RunConfig
from partprompt.data import default_synth_config, generate_synthetic_dataset
from partprompt.determinism import enable_deterministic_execution

enable_deterministic_execution()
torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    """4 categories x 8 samples at 48x48: fast enough for unit tests."""
    root = tmp_path_factory.mktemp("data") / "small"
    generate_synthetic_dataset(
        default_synth_config(4, samples_per_category=8, image_size=48), seed=11, root=root
    )
    return root


@pytest.fixture(scope="session")
def six_category_dataset(tmp_path_factory) -> Path:
    """The acceptance-scale dataset: 6 categories x 40 samples at 64x64."""
    root = tmp_path_factory.mktemp("data") / "synth6"
    generate_synthetic_dataset(
        default_synth_config(6, samples_per_category=40, image_size=64), seed=5, root=root
    )
    return root


@pytest.fixture
def fast_config(small_dataset) -> RunConfig:
    """Tiny but complete run configuration for trainer-level tests."""
    return RunConfig(
        data_root=str(small_dataset),
        channels=16,
        max_steps=5,
        eval_episodes=3,
        n_specific=2,
        n_shared=2,
        n_text=2,
        token_dim=8,
    )


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else ("FAIL" if report.failed else "SKIP")
    print(f"\n[acceptance] {name}: {outcome}", flush=True)
