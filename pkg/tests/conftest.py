"""Shared fixtures: the default synthetic task and trained nets are expensive,
so they are built once per session and reused across test modules."""

from __future__ import annotations

import pytest

import lir
from lir.training import CeConfig, train


@pytest.fixture(scope="session")
def default_task():
    return lir.gen_task(lir.TaskSpec(), seed=0)


@pytest.fixture(scope="session")
def ce_nets(default_task):
    """CE-trained nets for seeds 0..2 at the default config."""
    return {
        seed: train(default_task, CeConfig(epochs=60, seed=seed))[0] for seed in range(3)
    }


@pytest.fixture(scope="session")
def seed0_energies(default_task, ce_nets):
    """Energy matrices for the seed-0 CE net: train (with labels), test, far."""
    net = ce_nets[0]
    return {
        "train": lir.extract_energies(
            net, default_task.train_x, class_labels=default_task.train_y
        ),
        "test": lir.extract_energies(net, default_task.test_x),
        "near": lir.extract_energies(net, default_task.near_ood_x),
        "far": lir.extract_energies(net, default_task.far_ood_x),
    }
