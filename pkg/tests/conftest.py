import numpy as np
import pytest

from genbound.nn import init_mlp
from genbound.rng import make_rng


@pytest.fixture
def small_model():
    return init_mlp((12, 8, 5), seed=42)


@pytest.fixture
def small_batch():
    rng = make_rng(7, 99)
    x = rng.uniform(0.0, 1.0, size=(6, 12))
    y = rng.integers(0, 5, size=6)
    return x, y


def reference_forward(model, batch):
    """Straight-line pure-Python re-implementation of the forward pass."""
    out = []
    last = len(model.weights) - 1
    for row in np.asarray(batch):
        a = [float(v) for v in row]
        for l, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = []
            for j in range(w.shape[1]):
                s = float(b[j])
                for i in range(w.shape[0]):
                    s += a[i] * float(w[i, j])
                z.append(s)
            a = z if l == last else [max(v, 0.0) for v in z]
        out.append(a)
    return np.array(out)
