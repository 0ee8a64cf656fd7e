import matplotlib
import numpy as np
import pytest

from tdc_detector.datasets import synthetic_images
from tdc_detector.layers import Conv2D, FullyConnected, MaxPool2D, ReLU, Softmax
from tdc_detector.leakage import PDNParams
from tdc_detector.network import Network, train
from tdc_detector.pipeline import TracePipeline
from tdc_detector.quantization import quantize_network

matplotlib.use("Agg")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def digits():
    """
    Small synthetic 10-class image set.
    """
    return synthetic_images(20, seed=0)


def small_cnn(seed: int = 0) -> Network:
    """
    Conv2D(1->2, k3) -> ReLU -> MaxPool2D(2) -> FC(338->10) -> Softmax.
    """
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D(1, 2, 3, rng=rng),
        ReLU(),
        MaxPool2D(2),
        FullyConnected(2 * 13 * 13, 10, rng=rng),
        Softmax(),
    ]
    return Network(layers, seed=seed)


@pytest.fixture(scope="session")
def linear_classifier(digits):
    """
    FC(784->10) + Softmax trained on the synthetic digits.
    """
    net = Network([FullyConnected(784, 10, rng=np.random.default_rng(1)), Softmax()], seed=1)
    train(net, digits.x, digits.y, epochs=15, lr=5e-3, batch=16, seed=1)
    return net


@pytest.fixture(scope="session")
def trained_cnn(digits):
    net = small_cnn(0)
    train(net, digits.x, digits.y, epochs=3, lr=5e-3, batch=16, seed=0)
    return net


@pytest.fixture(scope="session")
def quantized_cnn(trained_cnn, digits):
    return quantize_network(trained_cnn, digits.x[:32])


@pytest.fixture
def quiet_pipeline():
    """
    Capture pipeline without readout noise.
    """
    return TracePipeline(pdn=PDNParams(noise_sigma=0.0))
