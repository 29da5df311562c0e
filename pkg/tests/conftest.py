import os

import pytest
import torch

from recadv.data import load_mnist
from recadv.models import ClassifierSpec
from recadv.train import TrainConfig, train_classifier

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(REPO_ROOT, "data", "mnist")


@pytest.fixture(scope="session")
def mnist_dir():
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def small_classifier(mnist_train):
    """A quickly trained LeNet-5 good enough for attack/metric tests."""
    spec = ClassifierSpec()
    model, _ = train_classifier(
        mnist_train.subset(6000), spec,
        TrainConfig(epochs=2, batch_size=128, seed=11),
    )
    for p in model.parameters():
        p.requires_grad_(False)
    return model, spec
