"""Small softmax classifiers with hand-derived gradients and local SGD.

Parameters live in one flat float64 vector. Layout:

* logistic regression: ``W`` (input_dim x num_classes, row-major), then ``b``.
* mlp-1-hidden: ``W1`` (input_dim x hidden), ``b1``, ``W2`` (hidden x classes), ``b2``.

The loss is mean softmax cross-entropy over the batch.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from signfed.errors import ConfigError

KINDS = ("logistic-regression", "mlp-1-hidden")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", field="model.kind")
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", field="model.input_dim")
        if self.num_classes < 2:
            raise ConfigError("must be >= 2", field="model.num_classes")
        if self.kind == "mlp-1-hidden" and self.hidden_dim < 1:
            raise ConfigError("must be >= 1 for mlp-1-hidden", field="model.hidden_dim")

    @property
    def num_params(self):
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic-regression":
            return d * c + c
        return d * h + h + h * c + c

    def layer_shapes(self):
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic-regression":
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def unpack(spec, w):
    """Split the flat vector into per-layer views (no copy)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size != spec.num_params:
        raise ConfigError(
            f"parameter vector has length {w.size}, model expects {spec.num_params}"
        )
    out, i = [], 0
    for shape in spec.layer_shapes():
        size = int(np.prod(shape))
        out.append(w[i:i + size].reshape(shape))
        i += size
    return out


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    parts = []
    for shape in spec.layer_shapes():
        if len(shape) == 2:
            r = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-r, r, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return np.concatenate(parts)


def _check_batch(spec, batch):
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"features shape {x.shape} does not match input_dim {spec.input_dim}")
    if y.shape != (x.shape[0],):
        raise ConfigError("labels length does not match feature rows")
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ConfigError("label outside [0, num_classes)")
    return x, y.astype(np.int64)


def logits(spec, w, features):
    layers = unpack(spec, w)
    x = np.asarray(features, dtype=np.float64)
    if spec.kind == "logistic-regression":
        W, b = layers
        return x @ W + b
    W1, b1, W2, b2 = layers
    return np.maximum(x @ W1 + b1, 0.0) @ W2 + b2


def predict(spec, w, features):
    return np.argmax(logits(spec, w, features), axis=1)


def forward_loss(spec, w, batch):
    """Mean cross-entropy of the batch under parameters ``w``."""
    x, y = _check_batch(spec, batch)
    z = logits(spec, w, x)
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def gradient(spec, w, batch):
    """Gradient of :func:`forward_loss` with respect to ``w``."""
    x, y = _check_batch(spec, batch)
    m = len(y)
    layers = unpack(spec, w)
    if spec.kind == "logistic-regression":
        W, b = layers
        z = x @ W + b
        delta = _softmax(z)
        delta[np.arange(m), y] -= 1.0
        delta /= m
        return np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])

    W1, b1, W2, b2 = layers
    pre = x @ W1 + b1
    hid = np.maximum(pre, 0.0)
    z = hid @ W2 + b2
    delta = _softmax(z)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    g_W2 = hid.T @ delta
    g_b2 = delta.sum(axis=0)
    back = (delta @ W2.T) * (pre > 0)
    g_W1 = x.T @ back
    g_b1 = back.sum(axis=0)
    return np.concatenate([g_W1.ravel(), g_b1, g_W2.ravel(), g_b2])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def iterate_batches(n_samples, batch_size, steps, rng):
    """Yield ``steps`` index arrays.

    Samples are drawn without replacement within an epoch and reshuffled at
    each new epoch; the last batch of an epoch may be short.
    """
    if n_samples < 1:
        raise ConfigError("empty dataset")
    if batch_size < 1:
        raise ConfigError("must be >= 1", field="protocol.batch_size")
    perm, pos = rng.permutation(n_samples), 0
    for _ in range(steps):
        if pos >= n_samples:
            perm, pos = rng.permutation(n_samples), 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def local_sgd(spec, w0, features, labels, T_gd, batch_size, eta, rng, ascent=False):
    """Run ``T_gd`` mini-batch steps from ``w0`` and return the final weights.

    With ``ascent=True`` the steps climb the loss instead of descending it.
    """
    if T_gd < 1:
        raise ConfigError("must be >= 1", field="protocol.local_iters")
    if not eta > 0:
        raise ConfigError("must be > 0", field="protocol.lr")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("empty dataset")
    step = eta if ascent else -eta
    w = np.array(w0, dtype=np.float64, copy=True)
    for idx in iterate_batches(len(labels), batch_size, T_gd, rng):
        w += step * gradient(spec, w, Batch(features[idx], labels[idx]))
    return w


def accuracy(spec, w, features, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(spec, w, features) == labels))


def per_class_accuracy(spec, w, features, labels):
    labels = np.asarray(labels)
    pred = predict(spec, w, features)
    out = np.full(spec.num_classes, np.nan)
    for c in range(spec.num_classes):
        mask = labels == c
        if mask.any():
            out[c] = np.mean(pred[mask] == c)
    return out
