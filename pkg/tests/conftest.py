import numpy as np
import pytest

from prunekit.nn_core import Layer, LayerSpec, Model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_model(weights, biases=None, activations=None, dtype=np.float32):
    """Hand-built model from nested weight lists."""
    layers = []
    n = len(weights)
    for k, w in enumerate(weights):
        w = np.asarray(w, dtype=dtype)
        b = np.zeros(w.shape[0], dtype=dtype) if biases is None else np.asarray(biases[k], dtype=dtype)
        act = activations[k] if activations else ("identity" if k == n - 1 else "relu")
        layers.append(Layer(LayerSpec(f"l{k}", w.shape[1], w.shape[0], act), w, b))
    return Model(layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
