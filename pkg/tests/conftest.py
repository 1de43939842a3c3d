"""Shared fixtures. Trained models are session-scoped: the expensive ones are
trained once and reused by every test that needs them."""

import numpy as np
import pytest

from diffuselab import gmm, training
from diffuselab.scores import AnalyticMixtureScore
from diffuselab.sde import DiffusionSchedule


@pytest.fixture(scope="session")
def canonical():
    return gmm.canonical_fixture()


@pytest.fixture(scope="session")
def two_class():
    return gmm.two_class_fixture()


@pytest.fixture(scope="session")
def ve():
    return DiffusionSchedule(kind="ve")


@pytest.fixture(scope="session")
def vp():
    return DiffusionSchedule(kind="vp")


@pytest.fixture(scope="session")
def analytic_score(canonical, ve):
    return AnalyticMixtureScore(canonical, ve)


@pytest.fixture(scope="session")
def train_data(canonical):
    return gmm.sample_dataset(canonical, 4000, np.random.default_rng(1000))


@pytest.fixture(scope="session")
def test_data(canonical):
    return gmm.sample_dataset(canonical, 2000, np.random.default_rng(2000))


@pytest.fixture(scope="session")
def score_fast(canonical, ve):
    """Cheap learned score for plumbing tests (not accuracy-gated)."""
    model, _ = training.train_score(canonical, ve, steps=4000, rng=np.random.default_rng(11))
    return model


@pytest.fixture(scope="session")
def score_full(canonical, ve):
    """Full-budget learned score; shared by the quality-gated tests."""
    model, _ = training.train_score(canonical, ve, steps=20000, rng=np.random.default_rng(12))
    return model


@pytest.fixture(scope="session")
def baseline_classifier(train_data, ve):
    model, _ = training.train_classifier(train_data, ve, rng=np.random.default_rng(21))
    return model


@pytest.fixture(scope="session")
def diffaug_classifier(train_data, ve, analytic_score):
    model, _ = training.train_classifier(
        train_data, ve, score=analytic_score, config=training.DiffAugConfig(),
        rng=np.random.default_rng(21),
    )
    return model
