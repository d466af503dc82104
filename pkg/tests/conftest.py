import numpy as np
import pytest

from distfl import nn


def bn_identity_model(running_mean=0.0, running_var=1.0, eps=1e-5):
    """1-d input -> identity Linear -> BN -> ReLU -> Linear(2)."""
    return nn.ModelParams(
        [
            nn.Linear(np.eye(1), np.zeros(1)),
            nn.BatchNorm(np.ones(1), np.zeros(1), np.array([running_mean], float), np.array([running_var], float), eps),
            nn.ReLU(),
            nn.Linear(np.array([[1.0], [-1.0]]), np.zeros(2)),
        ],
        1,
        2,
    )


def constant_model(input_dim, num_classes, favourite=0, margin=5.0, hidden=4):
    """Predicts ``favourite`` for every input (all weights zero, biased head)."""
    layers = [
        nn.Linear(np.zeros((hidden, input_dim)), np.zeros(hidden)),
        nn.BatchNorm(np.ones(hidden), np.zeros(hidden), np.zeros(hidden), np.ones(hidden)),
        nn.ReLU(),
        nn.Linear(np.zeros((num_classes, hidden)), np.zeros(num_classes)),
    ]
    layers[-1].bias[favourite] = margin
    return nn.ModelParams(layers, input_dim, num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    return nn.init_model(4, [6, 5], 3, rng)
