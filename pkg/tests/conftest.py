import numpy as np
import pytest

from binrobust import evalharness as E
from binrobust import models as M
from binrobust.binarize import SchemeId


def make_sets(num_classes=3, hw=(8, 8), n_train=150, n_test=48, noise=0.08):
    train = E.synth_dataset(num_classes=num_classes, n=n_train, hw=hw,
                            seed=0, noise=noise, split="train")
    test = E.synth_dataset(num_classes=num_classes, n=n_test, hw=hw,
                           seed=99, noise=noise, split="test")
    return train, test


@pytest.fixture(scope="session")
def synth_sets():
    return make_sets()


_MODEL_CACHE = {}


def trained_tiny(scheme, synth_sets, epochs=6):
    """Session-cached tiny smallcnn trained on the shared synthetic blobs."""
    key = (SchemeId(scheme), epochs)
    if key not in _MODEL_CACHE:
        train, _ = synth_sets
        cfg = M.ModelConfig(architecture="smallcnn", width=0.5, num_classes=3,
                            input_hw=(8, 8), scheme=scheme)
        model = M.build_model(cfg, init_seed=0)
        M.train(model, train, M.TrainConfig(epochs=epochs, lr=0.01,
                                            batch_size=32, seed=1))
        _MODEL_CACHE[key] = model
    return _MODEL_CACHE[key]


@pytest.fixture(scope="session")
def tiny_bnn(synth_sets):
    return trained_tiny("bnn", synth_sets)


@pytest.fixture(scope="session")
def tiny_fp32(synth_sets):
    return trained_tiny("fp32", synth_sets)


@pytest.fixture(scope="session")
def hard_sets():
    """10-class 16x16 setting where eps=0.03 attacks bite."""
    train = E.synth_dataset(num_classes=10, n=2000, hw=(16, 16), seed=0,
                            noise=0.15, split="train")
    test = E.synth_dataset(num_classes=10, n=400, hw=(16, 16), seed=99,
                           noise=0.15, split="test")
    return train, test


def trained_hard(scheme, hard_sets, loss_fn=None, epochs=8, tag="plain"):
    key = ("hard", SchemeId(scheme), tag)
    if key not in _MODEL_CACHE:
        train, _ = hard_sets
        cfg = M.ModelConfig(architecture="smallresnet", width=0.5,
                            num_classes=10, input_hw=(16, 16), scheme=scheme)
        model = M.build_model(cfg, init_seed=0)
        M.train(model, train, M.TrainConfig(epochs=epochs, lr=0.01,
                                            batch_size=64, seed=1),
                loss_fn=loss_fn)
        _MODEL_CACHE[key] = model
    return _MODEL_CACHE[key]


@pytest.fixture(scope="session")
def hard_bnn(hard_sets):
    return trained_hard("bnn", hard_sets)


@pytest.fixture(scope="session")
def hard_fp32(hard_sets):
    return trained_hard("fp32", hard_sets)


def pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0).astype(np.float32)
