"""
Differentiable classifiers over flat parameter vectors.

Two architectures are supported: multinomial logistic regression and a
one-hidden-layer tanh MLP. Parameters always travel as a single float64
vector; each architecture knows how to slice it into weight blocks.
"""
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StructuralError
from .numkit import PrngStream, as_vec

logger = logging.getLogger(__name__)

ARCHITECTURES = {
    'logistic': 'Multinomial logistic regression (softmax over a linear map)',
    'mlp': 'One hidden tanh layer followed by a softmax output layer',
}

CHECKPOINT_MAGIC = b'FEDSIMW1'

# Above this many parameters the finite-difference check samples coordinates.
FULL_CHECK_LIMIT = 256
SAMPLED_COORDINATES = 64


@dataclass(frozen=True)
class ModelLayout:
    kind: str = 'logistic'
    feature_dim: int = 16
    num_classes: int = 2
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown model kind: {self.kind}. Valid options: {list(ARCHITECTURES)}")
        if self.feature_dim < 1 or self.num_classes < 2 or self.hidden < 1:
            raise ConfigurationError(
                f"Invalid layout dims: feature_dim={self.feature_dim}, num_classes={self.num_classes}, hidden={self.hidden}"
            )

    @property
    def blocks(self):
        """(name, shape) of every parameter block, in flat order."""
        d, c, h = self.feature_dim, self.num_classes, self.hidden
        if self.kind == 'logistic':
            return (('W', (c, d)), ('b', (c,)))
        return (('W1', (h, d)), ('b1', (h,)), ('W2', (c, h)), ('b2', (c,)))

    @property
    def param_count(self):
        return sum(math.prod(shape) for _, shape in self.blocks)

    def describe(self):
        return f"kind={self.kind};feature_dim={self.feature_dim};num_classes={self.num_classes};hidden={self.hidden}"

    @classmethod
    def parse(cls, descriptor):
        fields = dict(item.split('=', 1) for item in descriptor.split(';') if item)
        try:
            return cls(
                kind=fields['kind'],
                feature_dim=int(fields['feature_dim']),
                num_classes=int(fields['num_classes']),
                hidden=int(fields['hidden']),
            )
        except (KeyError, ValueError) as exc:
            raise StructuralError(f"Malformed layout descriptor '{descriptor}': {exc}")

    def unpack(self, flat):
        out, offset = {}, 0
        for name, shape in self.blocks:
            size = math.prod(shape)
            out[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    layout: object
    flat: np.ndarray

    def __post_init__(self):
        flat = as_vec(self.flat)
        expected = getattr(self.layout, 'param_count', flat.shape[0])
        if flat.shape[0] != expected:
            raise StructuralError(f"Parameter vector has {flat.shape[0]} entries, layout expects {expected}")
        flat.setflags(write=False)
        object.__setattr__(self, 'flat', flat)

    @property
    def dim(self):
        return int(self.flat.shape[0])

    def with_flat(self, flat):
        return ModelParams(self.layout, flat)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ConfigurationError("A batch needs at least one example")
        if self.features.shape[0] != self.labels.shape[0]:
            raise StructuralError("Batch features and labels disagree on the number of examples")

    @property
    def size(self):
        return int(self.labels.shape[0])

    @classmethod
    def of(cls, dataset, indices=None):
        if indices is None:
            return cls(dataset.features, dataset.labels)
        return cls(dataset.features[indices], dataset.labels[indices])


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_batch(layout, batch):
    if batch.features.ndim != 2 or batch.features.shape[1] != layout.feature_dim:
        raise StructuralError(f"Batch feature dim {batch.features.shape[-1]} does not match layout {layout.feature_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= layout.num_classes:
        raise StructuralError(f"Labels must lie in [0, {layout.num_classes})")


class SoftmaxClassifier:
    """Shared cross-entropy machinery; subclasses provide forward/backward."""

    def logits(self, params, features):
        raise NotImplementedError

    def loss(self, params, batch):
        _check_batch(params.layout, batch)
        log_probs = _log_softmax(self.logits(params, batch.features))
        return float(-log_probs[np.arange(batch.size), batch.labels].mean())

    def _output_error(self, logits, labels):
        probs = np.exp(_log_softmax(logits))
        probs[np.arange(labels.shape[0]), labels] -= 1.0
        return probs / labels.shape[0]


class LogisticRegression(SoftmaxClassifier):

    def logits(self, params, features):
        blocks = params.layout.unpack(params.flat)
        return features @ blocks['W'].T + blocks['b']

    def gradient(self, params, batch):
        _check_batch(params.layout, batch)
        err = self._output_error(self.logits(params, batch.features), batch.labels)
        return np.concatenate([(err.T @ batch.features).ravel(), err.sum(axis=0)])

    def init(self, layout, rng):
        return ModelParams(layout, np.zeros(layout.param_count))


class TanhMLP(SoftmaxClassifier):

    def _forward(self, params, features):
        blocks = params.layout.unpack(params.flat)
        hidden = np.tanh(features @ blocks['W1'].T + blocks['b1'])
        return blocks, hidden, hidden @ blocks['W2'].T + blocks['b2']

    def logits(self, params, features):
        return self._forward(params, features)[2]

    def gradient(self, params, batch):
        _check_batch(params.layout, batch)
        blocks, hidden, logits = self._forward(params, batch.features)
        err = self._output_error(logits, batch.labels)
        grad_w2 = err.T @ hidden
        grad_b2 = err.sum(axis=0)
        pre = (err @ blocks['W2']) * (1.0 - hidden ** 2)
        grad_w1 = pre.T @ batch.features
        grad_b1 = pre.sum(axis=0)
        return np.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2])

    def init(self, layout, rng):
        gen = rng.generator
        d, h, c = layout.feature_dim, layout.hidden, layout.num_classes
        w1 = gen.uniform(-1.0, 1.0, (h, d)) / math.sqrt(d)
        w2 = gen.uniform(-1.0, 1.0, (c, h)) / math.sqrt(h)
        return ModelParams(layout, np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)]))


_ARCHITECTURE_IMPLS = {'logistic': LogisticRegression(), 'mlp': TanhMLP()}


def architecture_for(layout):
    return _ARCHITECTURE_IMPLS[layout.kind]


def init_params(layout, rng=None):
    """Zeros for logistic regression, scaled symmetric uniform for the MLP."""
    return architecture_for(layout).init(layout, rng or PrngStream(0))


def loss(params, batch):
    """Mean cross-entropy over ``batch``."""
    return architecture_for(params.layout).loss(params, batch)


def gradient(params, batch):
    """Gradient of the mean cross-entropy, same dimension as ``params.flat``."""
    return architecture_for(params.layout).gradient(params, batch)


def evaluate(params, dataset):
    """Top-1 accuracy and mean loss; argmax ties go to the lowest class index."""
    if dataset is None or len(dataset.labels) == 0:
        raise ConfigurationError("Cannot evaluate on an empty dataset")
    batch = Batch.of(dataset)
    model = architecture_for(params.layout)
    _check_batch(params.layout, batch)
    logits = model.logits(params, batch.features)
    log_probs = _log_softmax(logits)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    mean_loss = float(-log_probs[np.arange(batch.size), batch.labels].mean())
    return accuracy, mean_loss


def central_difference(params, batch, coordinates, epsilon, model=None):
    """Numerical partial derivatives of the loss at the given coordinates."""
    model = model or architecture_for(params.layout)
    base = np.array(params.flat)
    out = np.empty(len(coordinates))
    for i, coord in enumerate(coordinates):
        plus, minus = base.copy(), base.copy()
        plus[coord] += epsilon
        minus[coord] -= epsilon
        out[i] = (model.loss(params.with_flat(plus), batch) - model.loss(params.with_flat(minus), batch)) / (2.0 * epsilon)
    return out


def finite_diff_check(params, batch, epsilon=1e-5, model=None, gradient_fn=None, rng=None):
    """
    Compare the analytic gradient against central differences and return the
    worst relative error |a - n| / max(|a| + |n|, 1e-4).

    Small models are checked on every coordinate; larger ones on a random
    subset of 64 coordinates drawn from ``rng``.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    model = model or architecture_for(params.layout)
    analytic = (gradient_fn or model.gradient)(params, batch)
    if params.dim <= FULL_CHECK_LIMIT:
        coordinates = np.arange(params.dim)
    else:
        coordinates = np.sort((rng or PrngStream(0)).permutation(params.dim)[:SAMPLED_COORDINATES])
    numeric = central_difference(params, batch, coordinates, epsilon, model)
    chosen = analytic[coordinates]
    errors = np.abs(chosen - numeric) / np.maximum(np.abs(chosen) + np.abs(numeric), 1e-4)
    return float(errors.max())


def estimate_local_variance(params, dataset, model=None):
    """Mean squared distance of per-example gradients from the full-batch gradient."""
    model = model or architecture_for(params.layout)
    full = model.gradient(params, Batch.of(dataset))
    deviations = [
        float(np.sum((model.gradient(params, Batch.of(dataset, [i])) - full) ** 2))
        for i in range(len(dataset.labels))
    ]
    return float(np.mean(deviations))


# Checkpoints ------------------------------------------------------------------

def save_checkpoint(params, path):
    descriptor = params.layout.describe().encode('ascii')
    with open(path, 'wb') as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack('<I', len(descriptor)))
        handle.write(descriptor)
        handle.write(np.ascontiguousarray(params.flat, dtype='<f8').tobytes())


def load_checkpoint(path):
    with open(path, 'rb') as handle:
        blob = handle.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise StructuralError(f"{path} is not a model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack_from('<I', blob, offset)
    offset += 4
    layout = ModelLayout.parse(blob[offset:offset + length].decode('ascii'))
    flat = np.frombuffer(blob, dtype='<f8', offset=offset + length).astype(np.float64)
    return ModelParams(layout, flat)
