import numpy as np
import pytest

from srlab.datasets import gen_synthetic_shapes
from srlab.models import Conv, Dense, Flatten, MaxPool, ModelSpec, Relu, TapPoint, TrainConfig, build_model, train

DESK_NOISE = 0.25
DESK_FG = 0.7


def desk_spec():
    return ModelSpec(
        layers=(Conv(8, 3, 1, 1), Relu(), MaxPool(2), Conv(16, 3, 1, 1), Relu(), MaxPool(2), Flatten(), Dense(4)),
        num_classes=4,
        input_shape=(1, 32, 32),
        taps=(TapPoint("block1", 3), TapPoint("block2", 6)),
    )


@pytest.fixture(scope="session")
def desk_data():
    Xtr, ytr = gen_synthetic_shapes(800, noise=DESK_NOISE, seed=700, fg=DESK_FG)
    Xte, yte = gen_synthetic_shapes(200, noise=DESK_NOISE, seed=701, fg=DESK_FG)
    return (Xtr, ytr), (Xte, yte)


@pytest.fixture(scope="session")
def desk_model(desk_data):
    (Xtr, ytr), _ = desk_data
    model = build_model(desk_spec(), seed=0)
    train(model, (Xtr, ytr), TrainConfig(lr=0.05, epochs=5, batch=64, seed=0))
    return model


@pytest.fixture(scope="session")
def desk_pgd10(desk_model, desk_data):
    """PGD-10 adversarial batch on the session model's test set."""
    from srlab.attacks import AttackConfig, classification_loss, pgd
    from srlab.tensor import Tensor

    _, (Xte, yte) = desk_data
    cfg = AttackConfig(kind="pgd", epsilon=8 / 255, steps=10, seed=0)
    ex = pgd(classification_loss(desk_model, yte), Tensor(Xte), cfg)
    return ex, Xte, yte
