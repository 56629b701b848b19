"""
Client-side local training.

A client pulls the server model w, runs SGD from y_0 = w and returns the
displacement delta = y_0 - y_Q. The server subtracts the (scaled) delta, so a
client that descends produces delta = +sum(eta_q * g_q).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError, StructuralError
from .learners import Batch, ModelParams, architecture_for
from .numkit import check_same_dim

logger = logging.getLogger(__name__)

LOCAL_MODES = ('one_epoch', 'fixed_steps')

WEIGHTING_SCHEMES = {
    'lr_norm': 'Weight 1; short batches already scale their step size by n/B',
    'example_weight': 'Weight equals the number of local training examples',
    'uniform': 'Every client update has weight 1',
}


@dataclass(frozen=True)
class LocalConfig:
    eta_local: float = 0.1
    batch_size: int = 32
    mode: str = 'one_epoch'
    local_steps: int = 1
    lr_norm_enabled: bool = True
    weighting: str = 'lr_norm'
    prox_mu: float = 0.0

    def __post_init__(self):
        errors = {}
        if not (self.eta_local >= 0 and math.isfinite(self.eta_local)):
            errors['eta_local'] = 'must be a finite non-negative real'
        if self.batch_size < 1:
            errors['batch_size'] = 'must be at least 1'
        if self.mode not in LOCAL_MODES:
            errors['mode'] = f'must be one of {list(LOCAL_MODES)}'
        if self.local_steps < 1:
            errors['local_steps'] = 'must be at least 1'
        if self.weighting not in WEIGHTING_SCHEMES:
            errors['weighting'] = f'must be one of {list(WEIGHTING_SCHEMES)}'
        if self.prox_mu < 0:
            errors['prox_mu'] = 'must be non-negative'
        if errors:
            raise ConfigurationError(f"Invalid local config: {errors}", errors)


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    delta: np.ndarray
    client_id: int
    pull_version: int
    num_examples: int
    num_steps_taken: int
    client_weight: float = 1.0


def normalized_step_lr(eta_local, actual_batch, nominal_batch, enabled=True):
    """Step size for a batch of ``actual_batch`` examples: eta * n / B under LR-Norm."""
    if actual_batch < 1 or actual_batch > nominal_batch:
        raise StructuralError(f"Batch of {actual_batch} examples outside [1, {nominal_batch}]")
    if not enabled:
        return eta_local
    return eta_local * actual_batch / nominal_batch


def proximal_gradient(base_grad, y, anchor, mu):
    """Add the gradient of (mu/2)||y - anchor||^2 to ``base_grad``."""
    check_same_dim(y.flat, anchor.flat, 'local and anchor models')
    check_same_dim(base_grad, y.flat, 'gradient and model')
    if mu == 0:
        return base_grad
    return base_grad + mu * (y.flat - anchor.flat)


def _batches(size, cfg, rng):
    """Yield index arrays (None = whole dataset in stored order)."""
    if cfg.mode == 'one_epoch':
        order = rng.permutation(size)
        for start in range(0, size, cfg.batch_size):
            yield order[start:start + cfg.batch_size]
        return
    for _ in range(cfg.local_steps):
        if cfg.batch_size >= size:
            yield None
        else:
            yield rng.generator.choice(size, cfg.batch_size, replace=False)


def local_train(w, data, cfg, rng, pull_version=0, model=None):
    """Run local SGD on ``data`` starting from ``w`` and return the resulting ClientUpdate."""
    model = model or architecture_for(w.layout)
    size = len(data.labels)
    y = np.array(w.flat, dtype=np.float64)
    steps = 0
    for indices in _batches(size, cfg, rng):
        batch = Batch.of(data, indices)
        current = ModelParams(w.layout, y)
        grad = model.gradient(current, batch)
        if cfg.prox_mu > 0:
            grad = proximal_gradient(grad, current, w, cfg.prox_mu)
        eta = normalized_step_lr(cfg.eta_local, batch.size, cfg.batch_size, cfg.lr_norm_enabled)
        y = y - eta * grad
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"Client {data.client_id}: non-finite parameters after local step {steps}", step=steps)
        steps += 1

    return ClientUpdate(
        delta=np.array(w.flat) - y,
        client_id=data.client_id,
        pull_version=pull_version,
        num_examples=size,
        num_steps_taken=steps,
        client_weight=float(getattr(data, 'weight', 1.0)),
    )


def update_weight(update, weighting):
    """Aggregation weight of one client update, applied when it enters the buffer."""
    if weighting == 'example_weight':
        weight = float(update.num_examples)
    elif weighting in ('lr_norm', 'uniform'):
        weight = 1.0
    else:
        raise ConfigurationError(f"Unknown weighting scheme: {weighting}")
    return weight * update.client_weight
