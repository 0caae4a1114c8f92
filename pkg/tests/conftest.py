"""Shared fixtures: a small synthetic image classification problem.

Ten fixed prototype patterns plus pixel noise give a task that both model
families learn quickly, so training-dependent behavior can be exercised
without any real dataset on disk.
"""

import numpy as np
import pytest

from pcdefense import ffnet
from pcdefense import pcnet
from pcdefense.dataio import Dataset
from pcdefense.ffnet import Dense, Flatten, FFModel, ReLU, TrainConfig


def make_blobs(n_per_class: int = 40, side: int = 8, noise: float = 0.08, seed: int = 7,
               proto_seed: int = 123):
    protos = np.random.default_rng(proto_seed).uniform(0.1, 0.9, size=(10, 1, side, side))
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(10):
        x = protos[c] + rng.normal(0.0, noise, size=(n_per_class, 1, side, side))
        images.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(n_per_class, c))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = rng.permutation(len(labels))
    return Dataset("blobs", images[perm], labels[perm])


@pytest.fixture(scope="session")
def blob_train():
    return make_blobs(n_per_class=40, seed=7)


@pytest.fixture(scope="session")
def blob_test():
    return make_blobs(n_per_class=12, seed=8)


def small_fc(seed: int = 0) -> FFModel:
    rng = np.random.default_rng(seed)

    def dense(a, b):
        return Dense(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), np.zeros(b))

    return FFModel("blob_fc", (1, 8, 8), [Flatten(), dense(64, 32), ReLU(), dense(32, 10)])


@pytest.fixture(scope="session")
def trained_ff(blob_train):
    model = small_fc(seed=0)
    ffnet.train(model, blob_train, TrainConfig(batch_size=32, epochs=30, lr=0.05, momentum=0.9, seed=0))
    return model


@pytest.fixture(scope="session")
def trained_pc(blob_train):
    net = pcnet.PCNetwork([64, 32, 16, 10], seed=0)
    pcnet.train_pcnet(net, blob_train, pcnet.PCTrainConfig(batch_size=32, epochs=4, lr_scale=100.0, seed=0))
    return net
