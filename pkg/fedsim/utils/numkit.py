"""
Deterministic randomness, dense vector helpers and the client training-time
distributions used by the event engine.

Streams are counter-based: every PrngStream wraps numpy's Philox generator
keyed by the 128-bit pair (seed, stream_id). The same pair always yields the
same draws on every platform, and forking derives a new stream_id without
touching the parent's counter.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError, StructuralError

UINT64_MASK = (1 << 64) - 1

DURATION_KINDS = ('constant', 'half_normal', 'uniform', 'exponential')

# Shape defaults: sigma for half_normal (production fit), width for uniform
# (Uniform(0, 2) has mean 1), rate for exponential.
DEFAULT_DURATION_SHAPES = {
    'constant': 1.0,
    'half_normal': 1.25,
    'uniform': 2.0,
    'exponential': 1.0,
}


# Dense vectors ---------------------------------------------------------------

def as_vec(values):
    """Copy ``values`` into a finite 1-D float64 array."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if vec.size == 0:
        raise StructuralError("Dense vectors must have a positive dimension")
    if not np.all(np.isfinite(vec)):
        raise NumericalError("Dense vector contains non-finite entries")
    return vec


def zeros(dim):
    if dim < 1:
        raise StructuralError(f"Invalid vector dimension: {dim}")
    return np.zeros(int(dim), dtype=np.float64)


def check_same_dim(x, y, what='vectors'):
    if x.shape != y.shape:
        raise StructuralError(f"Dimension mismatch between {what}: {x.shape[0]} != {y.shape[0]}")


def vec_axpy(alpha, x, y):
    """Return ``y + alpha * x`` as a new vector; inputs are left untouched."""
    if not math.isfinite(alpha):
        raise NumericalError(f"axpy coefficient must be finite, got {alpha}")
    x, y = as_vec(x), as_vec(y)
    check_same_dim(x, y)
    result = y + alpha * x
    if not np.all(np.isfinite(result)):
        raise NumericalError("axpy produced non-finite entries")
    return result


# Pseudo-random streams -------------------------------------------------------

class PrngStream:
    """A single-owner deterministic random stream.

    Never draw from one stream on two threads; fork a child stream instead.
    """

    def __init__(self, seed, stream_id=0):
        if not (0 <= int(seed) <= UINT64_MASK) or not (0 <= int(stream_id) <= UINT64_MASK):
            raise ConfigurationError(f"Seeds and stream ids must be 64-bit unsigned, got ({seed}, {stream_id})")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = (self.stream_id << 64) | self.seed
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"PrngStream(seed={self.seed}, stream_id={self.stream_id})"

    def random(self):
        """Uniform draw in [0, 1)."""
        return float(self.generator.random())

    def normal(self):
        return float(self.generator.standard_normal())

    def exponential(self):
        return float(self.generator.standard_exponential())

    def integers(self, high):
        """Uniform integer in [0, high)."""
        return int(self.generator.integers(high))

    def permutation(self, n):
        return self.generator.permutation(n)


def fork_stream(root, label):
    """Derive the child stream ``label`` of ``root`` without advancing ``root``."""
    label = int(label) & UINT64_MASK
    sequence = np.random.SeedSequence(entropy=root.stream_id, spawn_key=(label,))
    child_id = int(sequence.generate_state(1, dtype=np.uint64)[0])
    return PrngStream(root.seed, child_id)


# Training-duration distributions ---------------------------------------------

@dataclass(frozen=True)
class DurationDist:
    kind: str = 'half_normal'
    shape: float = 1.25
    normalize_mean: bool = True

    def __post_init__(self):
        if self.kind not in DURATION_KINDS:
            raise ConfigurationError(f"Unknown duration distribution: {self.kind}. Valid options: {list(DURATION_KINDS)}")
        if not (self.shape > 0) or not math.isfinite(self.shape):
            raise ConfigurationError(f"Duration shape parameter must be positive, got {self.shape}")

    @property
    def raw_mean(self):
        """Analytic mean before normalisation."""
        if self.kind == 'constant':
            return self.shape
        if self.kind == 'half_normal':
            return self.shape * math.sqrt(2.0 / math.pi)
        if self.kind == 'uniform':
            return self.shape / 2.0
        return 1.0 / self.shape

    @property
    def raw_variance(self):
        if self.kind == 'constant':
            return 0.0
        if self.kind == 'half_normal':
            return self.shape ** 2 * (1.0 - 2.0 / math.pi)
        if self.kind == 'uniform':
            return self.shape ** 2 / 12.0
        return 1.0 / self.shape ** 2

    @property
    def mean(self):
        return 1.0 if self.normalize_mean else self.raw_mean

    @property
    def variance(self):
        if self.normalize_mean:
            return self.raw_variance / self.raw_mean ** 2
        return self.raw_variance


def _raw_draw(dist, rng):
    if dist.kind == 'constant':
        return dist.shape
    if dist.kind == 'half_normal':
        return abs(dist.shape * rng.normal())
    if dist.kind == 'uniform':
        # (0, width]: 1 - U never hits zero
        return dist.shape * (1.0 - rng.random())
    return rng.exponential() / dist.shape


def sample_duration(dist, rng):
    """Draw one strictly positive training duration."""
    value = _raw_draw(dist, rng)
    while value <= 0.0:
        value = _raw_draw(dist, rng)
    if dist.normalize_mean:
        value /= dist.raw_mean
    return value
