"""Shared fixtures for the acceptance suite.

Trained models are expensive (the flagship noise estimator alone is ~20 min
on one core), so every fixture caches its checkpoint under .cache/acceptance
keyed by a hash of the budget that produced it. Delete that directory to
force clean retraining.
"""

import numpy as np
import pytest

from mechknow import data as dmod
from mechknow import nets
from mechknow import transforms as tf
from mechknow.training import TrainConfig, train_classifier, train_identifier

import accept_budgets as B
from accept_util import CACHE, estimator_fixture, train_or_load


@pytest.fixture(scope="session")
def flagship_rotation():
    """Noise-trained rotation estimator reused across most criteria."""
    return estimator_fixture(
        "noise_rotation_flagship", "factornet", dmod.EXP_NOISE, tf.ROTATION, B.FLAGSHIP
    )


@pytest.fixture(scope="session")
def noise_identifier(flagship_rotation):
    def build():
        budget = B.IDENTIFIER
        spec = nets.ModelSpec(
            family="factornet", experiment=dmod.EXP_NOISE, kind=nets.IDENTITY
        )
        scfg = dmod.StreamConfig(
            epochs=budget["epochs"],
            pairs_per_epoch=budget["pairs_per_epoch"],
            p_black=budget["p_black"],
            cache_dir=CACHE,
        )
        stream = dmod.build_identity_stream(
            dmod.EXP_NOISE,
            "train",
            flagship_rotation,
            budget["batch_size"],
            np.random.default_rng(B.SEED),
            scfg,
        )
        tcfg = TrainConfig(
            epochs=budget["epochs"],
            batch_size=budget["batch_size"],
            step_size=budget["step_size"],
            seed=B.SEED,
            loss="bce",
            eval_every=100_000,
        )
        model, _ = train_identifier(spec, flagship_rotation, stream, tcfg, train_source="noise")
        return model

    return train_or_load("noise_identifier", B.IDENTIFIER, build)


@pytest.fixture(scope="session")
def mnist_classifier():
    def build():
        budget = B.CLASSIFIER
        train_set = dmod.get_image_set("mnist_train", CACHE)
        tcfg = TrainConfig(
            epochs=budget["epochs"],
            batch_size=budget["batch_size"],
            step_size=budget["step_size"],
            seed=B.SEED,
            loss="cross_entropy",
            eval_every=100_000,
        )
        return train_classifier(train_set, tcfg)

    return train_or_load("mnist_classifier", B.CLASSIFIER, build)


# ---------------------------------------------------------------------------
# family / joint comparison grids


@pytest.fixture(scope="session")
def mnist_family_grid():
    """(family, kind) -> estimator for the three families x three mechanisms."""
    grid = {}
    for family in nets.FAMILIES:
        for kind in (tf.ROTATION, tf.SCALING, tf.TRANSLATION):
            grid[(family, kind)] = estimator_fixture(
                f"mnist_{family}_{kind}", family, dmod.EXP_MNIST, kind, B.SMALL_MNIST
            )
    return grid


@pytest.fixture(scope="session")
def joint_grid(mnist_family_grid):
    """experiment -> {kind -> factornet estimator, incl. joint} at equal budget."""
    budgets = {
        dmod.EXP_MNIST: B.SMALL_MNIST,
        dmod.EXP_NOISE: B.SMALL_NOISE,
        dmod.EXP_CIFAR: B.SMALL_CIFAR,
    }
    grid = {}
    for experiment, budget in budgets.items():
        per = {}
        for kind in (tf.ROTATION, tf.SCALING, tf.TRANSLATION, tf.JOINT):
            if experiment == dmod.EXP_MNIST and kind != tf.JOINT:
                per[kind] = mnist_family_grid[("factornet", kind)]
                continue
            per[kind] = estimator_fixture(
                f"{experiment.lower()}_factornet_{kind}", "factornet", experiment, kind, budget
            )
        grid[experiment] = per
    return grid


# ---------------------------------------------------------------------------
# shared evaluation data


@pytest.fixture(scope="session")
def digit_test_set():
    return dmod.get_image_set("mnist_test", CACHE)


@pytest.fixture(scope="session")
def digit_train_set():
    return dmod.get_image_set("mnist_train", CACHE)
