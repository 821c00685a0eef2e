"""Dense multilayer perceptron with exact forward/backward passes.

Parameters live in float64 throughout: the bound estimators downstream are
sensitive to small variances, so no mixed precision.  The canonical flat
parameter layout is layer by layer, weight matrix in row-major order followed
by the bias vector, which keeps flat-vector indices stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .exceptions import CacheMismatchError, ShapeError
from .rng import STREAM_INIT, make_rng


def check_matrix(x: np.ndarray, name: str) -> np.ndarray:
    """Validate a 2-D float64 matrix with finite entries."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{name} contains non-finite entries")
    return x


def check_vector(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# Loss kinds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossEntropy:
    """Softmax cross-entropy, averaged over the batch."""


@dataclass(frozen=True)
class TruncatedCrossEntropy:
    """Per-sample cross-entropy capped at c0, so the loss is c0-bounded."""

    c0: float

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValueError("truncation level c0 must be positive")


@dataclass(frozen=True)
class PureQuadratic:
    """f(x, theta) = 0.5 * ||theta||^2, independent of the data.

    Analytic oracle loss: its gradient, Hessian and perturbation response
    are known in closed form, which the test suite leans on.
    """


LossKind = Union[CrossEntropy, TruncatedCrossEntropy, PureQuadratic]


def parse_loss(spec: str, c0: float = 1.0) -> LossKind:
    """Parse a loss name used in configs: cross_entropy | truncated_cross_entropy | pure_quadratic."""
    if spec == "cross_entropy":
        return CrossEntropy()
    if spec == "truncated_cross_entropy":
        return TruncatedCrossEntropy(c0)
    if spec == "pure_quadratic":
        return PureQuadratic()
    raise ValueError(f"unknown loss kind: {spec!r}")


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class MlpModel:
    """ReLU MLP with identity output (softmax lives in the loss).

    ``layer_dims`` runs (input, hidden..., output); zero hidden layers is
    allowed, giving a linear model.  ``version`` is bumped on every in-place
    parameter write so stale forward caches can be detected.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


def init_mlp(layer_dims: tuple[int, ...], seed: int) -> MlpModel:
    """He-style fan-in-scaled uniform init, biases zero, seeded."""
    if len(layer_dims) < 2:
        raise ShapeError("layer_dims needs at least input and output sizes")
    if any(d <= 0 for d in layer_dims):
        raise ShapeError(f"layer_dims must be positive: {layer_dims}")
    rng = make_rng(seed, STREAM_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(layer_dims), weights, biases)


def flatten_params(model: MlpModel) -> np.ndarray:
    """Canonical layout: per layer, weights row-major then bias."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def set_flat_params(model: MlpModel, theta: np.ndarray) -> None:
    """Write a flat parameter vector back into the model (in place)."""
    theta = check_vector(theta, "theta")
    if theta.size != model.num_params:
        raise ShapeError(
            f"parameter vector has length {theta.size}, model needs {model.num_params}"
        )
    pos = 0
    for w, b in zip(model.weights, model.biases):
        w[...] = theta[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = theta[pos : pos + b.size]
        pos += b.size
    model.version += 1


def clone_with_params(model: MlpModel, theta: np.ndarray) -> MlpModel:
    """Fresh model with the same architecture and the given flat parameters."""
    out = MlpModel(
        model.layer_dims,
        [w.copy() for w in model.weights],
        [b.copy() for b in model.biases],
    )
    set_flat_params(out, theta)
    return out


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Activations recorded by a forward pass, sufficient for exact backprop."""

    model_id: int
    model_version: int
    activations: list[np.ndarray] = field(repr=False)  # layer inputs, a[0] = batch
    logits: np.ndarray = field(repr=False)


def mlp_forward(model: MlpModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = check_matrix(batch, "batch")
    if batch.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch has {batch.shape[1]} columns, model expects {model.input_dim}"
        )
    acts = [batch]
    a = batch
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if l == last else np.maximum(z, 0.0)
        if l != last:
            acts.append(a)
    return a, ForwardCache(id(model), model.version, acts, a)


def _check_cache(model: MlpModel, cache: ForwardCache) -> None:
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise CacheMismatchError(
            "forward cache does not match this model state; rerun the forward pass"
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Numerically stable -log softmax[label] per row."""
    labels = np.asarray(labels)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("labels length does not match batch size")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    return lse - shifted[rows, labels]


def mlp_backward(
    model: MlpModel, cache: ForwardCache, labels: np.ndarray
) -> np.ndarray:
    """Gradient of the mean softmax cross-entropy, flat canonical layout."""
    _check_cache(model, cache)
    delta = softmax(cache.logits)
    rows = np.arange(delta.shape[0])
    delta[rows, np.asarray(labels)] -= 1.0
    delta /= delta.shape[0]
    return _backprop_from_delta(model, cache, delta)


def _backprop_from_delta(
    model: MlpModel, cache: ForwardCache, delta: np.ndarray
) -> np.ndarray:
    """Propagate an output-layer delta back through the cached activations."""
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        a_in = cache.activations[l]
        grads_w[l] = a_in.T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l].T) * (cache.activations[l] > 0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# Loss evaluation and gradients for each loss kind
# --------------------------------------------------------------------------


def loss_eval(
    kind: LossKind, model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> float:
    """Mean loss of the batch under the given loss kind."""
    if isinstance(kind, PureQuadratic):
        theta = flatten_params(model)
        return 0.5 * float(theta @ theta)
    logits, _ = mlp_forward(model, batch)
    ce = cross_entropy_per_sample(logits, labels)
    if isinstance(kind, TruncatedCrossEntropy):
        ce = np.minimum(ce, kind.c0)
    return float(ce.mean())


def loss_gradient(
    kind: LossKind, model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Flat gradient of the mean loss over the batch."""
    if isinstance(kind, PureQuadratic):
        return flatten_params(model)
    logits, cache = mlp_forward(model, batch)
    if isinstance(kind, TruncatedCrossEntropy):
        # Truncated samples (ce >= c0) sit on the flat part of min(ce, c0)
        # and contribute zero gradient.
        ce = cross_entropy_per_sample(logits, labels)
        active = ce < kind.c0
        delta = softmax(logits)
        rows = np.arange(delta.shape[0])
        delta[rows, np.asarray(labels)] -= 1.0
        delta[~active] = 0.0
        delta /= delta.shape[0]
        return _backprop_from_delta(model, cache, delta)
    return mlp_backward(model, cache, labels)


def per_sample_gradients(
    kind: LossKind, model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """(m, d) matrix of single-sample loss gradients.

    Materializes the full matrix; intended for small models and tests.  Use
    per_sample_grad_stats for the trace-of-variance needed during training.
    """
    batch = check_matrix(batch, "batch")
    m = batch.shape[0]
    out = np.empty((m, model.num_params))
    for i in range(m):
        out[i] = loss_gradient(kind, model, batch[i : i + 1], labels[i : i + 1])
    return out


def per_sample_grad_stats(
    kind: LossKind, model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, float]:
    """Mean per-sample gradient and trace of their (population) covariance.

    Avoids materializing the (m, d) gradient matrix: the per-sample gradient
    of a dense layer is the outer product a_in[i] delta[i]^T, whose squared
    Frobenius norm factorizes as ||a_in[i]||^2 ||delta[i]||^2, so

        tr V = mean_i ||g_i||^2 - ||mean gradient||^2

    needs only per-layer row norms.
    """
    if isinstance(kind, PureQuadratic):
        # Every sample sees the same gradient theta: zero variance.
        return flatten_params(model), 0.0
    batch = check_matrix(batch, "batch")
    m = batch.shape[0]
    if m < 2:
        raise ShapeError("need at least 2 samples for gradient statistics")
    logits, cache = mlp_forward(model, batch)
    delta = softmax(logits)
    rows = np.arange(m)
    delta[rows, np.asarray(labels)] -= 1.0
    if isinstance(kind, TruncatedCrossEntropy):
        ce = cross_entropy_per_sample(logits, labels)
        delta[ce >= kind.c0] = 0.0

    sq_norms = np.zeros(m)
    d = delta
    for l in range(len(model.weights) - 1, -1, -1):
        a_in = cache.activations[l]
        d_norm2 = np.einsum("ij,ij->i", d, d)
        a_norm2 = np.einsum("ij,ij->i", a_in, a_in)
        sq_norms += d_norm2 * (1.0 + a_norm2)
        if l > 0:
            d = (d @ model.weights[l].T) * (cache.activations[l] > 0)

    mean_grad = _backprop_from_delta(model, cache, delta / m)
    trace_var = float(sq_norms.mean() - mean_grad @ mean_grad)
    return mean_grad, max(trace_var, 0.0)
