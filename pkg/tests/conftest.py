import logging

import pytest
import torch

from ckl.modelzoo import ArchitectureSpec, TrainConfig, build_model, make_synthetic, train_supervised

SHAPE = (3, 16, 16)

logging.getLogger("ckl").setLevel(logging.WARNING)


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_train():
    return make_synthetic(10, 2000, seed=0, split="train", image_shape=SHAPE)


@pytest.fixture(scope="session")
def synth_test():
    return make_synthetic(10, 500, seed=0, split="test", image_shape=SHAPE)


def _trained(arch, seed, data, epochs=6):
    m = build_model(ArchitectureSpec(arch, 10, SHAPE), seed)
    train_supervised(m, data, TrainConfig(epochs=epochs, batch_size=128, seed=seed))
    return m


@pytest.fixture(scope="session")
def trained_cnn(synth_train):
    return _trained("small_cnn", 0, synth_train)


@pytest.fixture(scope="session")
def trained_mixer(synth_train):
    return _trained("mixer_tiny", 1, synth_train)


@pytest.fixture(scope="session")
def trained_resnet(synth_train):
    return _trained("resnet_tiny", 2, synth_train)
