from __future__ import annotations

import pytest

from wireharness.koopman import augment_dataset, fit
from wireharness.mpc import fit_linear_baseline
from wireharness.sim import scripted_collect


@pytest.fixture(scope="session")
def small_dataset():
    """Dataset piccolo ma deterministico, condiviso tra i test."""
    return scripted_collect(8, 40, seed=7)


@pytest.fixture(scope="session")
def fitted_model(small_dataset):
    return fit(augment_dataset(small_dataset))


@pytest.fixture(scope="session")
def collected_dataset():
    """Lo stesso volume del comando collect di default: 40 traiettorie da 60 passi."""
    return scripted_collect(40, 60, seed=0)


@pytest.fixture(scope="session")
def reference_model(collected_dataset):
    return fit(augment_dataset(collected_dataset))


@pytest.fixture(scope="session")
def reference_linear_model(collected_dataset):
    return fit_linear_baseline(augment_dataset(collected_dataset))
