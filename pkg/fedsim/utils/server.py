"""
Server-side aggregation.

FedBuff accumulates staleness-weighted client deltas in a buffer and takes one
server step every K insertions. FedAsync is the K=1 case. The synchronous
strategies (FedAvg, FedAvgM, FedProx) aggregate one staleness-free cohort per
round. All strategies share the same buffer summation and the same server
step, so FedBuff with K equal to the cohort and fresh updates reproduces
FedAvg bit for bit.

Staleness convention: tau = apply_version - pull_version, so tau = 0 means no
server step happened while the client trained.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .client import update_weight
from .errors import ConfigurationError, ProtocolError
from .learners import ModelParams
from .numkit import check_same_dim

logger = logging.getLogger(__name__)

STRATEGIES = {
    'fedbuff': 'Buffered asynchronous aggregation: one server step per K staleness-weighted client updates',
    'fedasync': 'Asynchronous: every client update is applied immediately with staleness weighting (K=1)',
    'fedavg': 'Synchronous rounds, server step on the aggregated cohort delta',
    'fedavgm': 'Synchronous rounds with server heavy-ball momentum',
    'fedprox': 'Synchronous rounds, clients add a proximal term mu/2 ||y - w||^2',
}
ASYNC_KINDS = ('fedbuff', 'fedasync')
SYNC_KINDS = ('fedavg', 'fedavgm', 'fedprox')
AGGREGATE_MODES = ('sum', 'mean')


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = 'fedbuff'
    buffer_size: int = 10
    eta_global: float = 1.0
    momentum: float = 0.0
    staleness_alpha: float = 0.5
    aggregate_mode: str = 'sum'

    def __post_init__(self):
        errors = {}
        if self.kind not in STRATEGIES:
            errors['kind'] = f'must be one of {list(STRATEGIES)}'
        if self.buffer_size < 1:
            errors['buffer_size'] = 'must be at least 1'
        if not (self.eta_global > 0 and math.isfinite(self.eta_global)):
            errors['eta_global'] = 'must be a finite positive real'
        if not 0.0 <= self.momentum < 1.0:
            errors['momentum'] = 'must lie in [0, 1)'
        elif self.momentum > 0 and self.kind != 'fedavgm':
            errors['momentum'] = 'server momentum is only used by fedavgm'
        if self.staleness_alpha < 0:
            errors['staleness_alpha'] = 'must be non-negative'
        if self.aggregate_mode not in AGGREGATE_MODES:
            errors['aggregate_mode'] = f'must be one of {list(AGGREGATE_MODES)}'
        if errors:
            raise ConfigurationError(f"Invalid strategy config: {errors}", errors)
        if self.kind == 'fedasync':
            object.__setattr__(self, 'buffer_size', 1)

    @property
    def is_async(self):
        return self.kind in ASYNC_KINDS


class _SecureBuffer:
    """
    Opaque accumulator for weighted client deltas. Its contents are only
    released by ``drain`` as a single sum, ordered by client id so the result
    does not depend on arrival order.
    """

    __slots__ = ('_entries', '_sequence')

    def __init__(self):
        self._entries = []
        self._sequence = 0

    def __len__(self):
        return len(self._entries)

    def add(self, client_id, scale, delta):
        self._entries.append((client_id, self._sequence, scale * delta))
        self._sequence += 1

    def drain(self, dim):
        total = np.zeros(dim)
        for _, _, contribution in sorted(self._entries, key=lambda entry: entry[:2]):
            total = total + contribution
        self._entries = []
        return total


@dataclass(eq=False)
class ServerState:
    model: ModelParams
    step: int = 0
    fill_count: int = 0
    total_client_updates: int = 0
    momentum: np.ndarray = None
    _buffer: _SecureBuffer = field(default_factory=_SecureBuffer, repr=False)

    def __post_init__(self):
        if self.momentum is None:
            self.momentum = np.zeros(self.model.dim)


def staleness_weight(tau, alpha):
    """Polynomial staleness discount (1 + tau)^-alpha."""
    if tau < 0:
        raise ProtocolError(f"Negative staleness: {tau}")
    return (1.0 + tau) ** (-alpha)


def buffer_add(state, update, cfg, current_step=None, weighting='lr_norm'):
    """Insert one client update into the buffer; the buffer is only read at flush."""
    if not cfg.is_async:
        raise ConfigurationError(f"buffer_add is only used by asynchronous strategies, not {cfg.kind}")
    t = state.step if current_step is None else current_step
    if update.pull_version > t:
        raise ProtocolError(
            f"Client {update.client_id} pulled version {update.pull_version} but the server is at step {t}"
        )
    check_same_dim(update.delta, state.model.flat, 'client delta and server model')
    tau = t - update.pull_version
    scale = staleness_weight(tau, cfg.staleness_alpha) * update_weight(update, weighting)
    state._buffer.add(update.client_id, scale, update.delta)
    state.fill_count += 1
    state.total_client_updates += 1
    return state


def _server_step(state, aggregate, cfg):
    if cfg.momentum > 0:
        state.momentum = cfg.momentum * state.momentum + aggregate
        direction = state.momentum
    else:
        direction = aggregate
    state.model = state.model.with_flat(state.model.flat - cfg.eta_global * direction)
    state.step += 1


def maybe_flush(state, cfg):
    """Take a server step when the buffer holds K updates. Returns ``(state, flushed)``."""
    if state.fill_count < cfg.buffer_size:
        return state, False
    aggregate = state._buffer.drain(state.model.dim)
    if cfg.aggregate_mode == 'mean':
        aggregate = aggregate / cfg.buffer_size
    _server_step(state, aggregate, cfg)
    state.fill_count = 0
    logger.debug(f"Server step {state.step}: flushed {cfg.buffer_size} buffered updates")
    return state, True


def fedasync_apply(state, update, cfg, current_step=None, weighting='lr_norm'):
    """Apply one update immediately: insertion followed by a guaranteed K=1 flush."""
    if cfg.kind != 'fedasync':
        raise ConfigurationError(f"fedasync_apply requires the fedasync strategy, not {cfg.kind}")
    buffer_add(state, update, cfg, current_step, weighting)
    state, _ = maybe_flush(state, cfg)
    return state


def sync_aggregate(state, updates, cfg, weighting='lr_norm'):
    """Aggregate one synchronous cohort and take a single server step; returns the new model."""
    if not updates:
        raise ProtocolError("Synchronous round without client updates")
    stale = sorted({update.pull_version for update in updates if update.pull_version != state.step})
    if stale:
        raise ProtocolError(f"Synchronous round at step {state.step} received updates pulled at versions {stale}")
    cohort = _SecureBuffer()
    for update in updates:
        check_same_dim(update.delta, state.model.flat, 'client delta and server model')
        cohort.add(update.client_id, staleness_weight(0, cfg.staleness_alpha) * update_weight(update, weighting), update.delta)
    aggregate = cohort.drain(state.model.dim)
    if cfg.aggregate_mode == 'mean':
        aggregate = aggregate / len(updates)
    _server_step(state, aggregate, cfg)
    logger.debug(f"Server step {state.step}: synchronous cohort of {len(updates)}")
    return state.model
