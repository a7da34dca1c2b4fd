import numpy as np
import pytest

import mcf


@pytest.fixture(scope="session")
def tiny_world():
    """Small synthetic dataset + trained 2-stage model shared by the
    detector/CLI/backend tests."""
    train, test = mcf.synth_dataset(seed=11, n_train=16, n_test=6,
                                    difficulty="easy")
    weights = mcf.random_weights(mcf.default_backbone((8, 16, 32, 48, 48)),
                                 seed=11)
    config = mcf.desk_config(n_all=48, n_stages=2, bootstrap_rounds=(4, 8),
                             initial_negatives=300, negatives_per_round=200,
                             l1_high_features=600, scales_per_octave=4, seed=11)
    model = mcf.train_multistage(train, weights, config)
    return {"train": train, "test": test, "weights": weights,
            "config": config, "model": model}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
