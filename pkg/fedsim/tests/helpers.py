"""Small builders shared by the test modules."""
import numpy as np

from fedsim.utils.client import ClientUpdate, LocalConfig
from fedsim.utils.datagen import FederationSpec, generate_federation, train_eval_split
from fedsim.utils.learners import ModelLayout, init_params
from fedsim.utils.numkit import DurationDist
from fedsim.utils.server import StrategyConfig
from fedsim.utils.simulator import SimConfig

CONSTANT = DurationDist('constant', 1.0)


def tiny_federation(num_clients=40, feature_dim=4, mean_examples=12, seed=0, num_classes=2):
    spec = FederationSpec(
        num_clients=num_clients,
        feature_dim=feature_dim,
        num_classes=num_classes,
        mean_examples_per_client=mean_examples,
        seed=seed,
    )
    return generate_federation(spec)


def tiny_setup(num_clients=40, feature_dim=4, mean_examples=12, seed=0, kind='logistic'):
    """Train federation, eval pool and initial model for quick engine runs."""
    federation = tiny_federation(num_clients, feature_dim, mean_examples, seed)
    train, eval_dataset = train_eval_split(federation, 0.2, seed)
    layout = ModelLayout(kind=kind, feature_dim=feature_dim, num_classes=2, hidden=6)
    return train, eval_dataset, init_params(layout)


def sim_config(**kwargs):
    kwargs.setdefault('duration_dist', CONSTANT)
    return SimConfig(**kwargs)


def fedbuff(buffer_size, **kwargs):
    return StrategyConfig(kind='fedbuff', buffer_size=buffer_size, **kwargs)


def local_config(**kwargs):
    kwargs.setdefault('eta_local', 0.1)
    kwargs.setdefault('batch_size', 8)
    return LocalConfig(**kwargs)


def make_update(delta, client_id=0, pull_version=0, num_examples=10):
    return ClientUpdate(
        delta=np.asarray(delta, dtype=np.float64),
        client_id=client_id,
        pull_version=pull_version,
        num_examples=num_examples,
        num_steps_taken=1,
    )


def replay_staleness(records, buffer_size):
    """
    Recompute every tau from start/finish times alone: finishes are handled in
    (time, client) order, every K-th one flushes, and a start at time t sees
    every flush at a time <= t.
    """
    ordered = sorted(records, key=lambda r: (r.finish_time, r.client_id))
    flush_times = []
    taus = {}
    for position, record in enumerate(ordered, start=1):
        pull = sum(1 for t in flush_times if t <= record.start_time)
        taus[(record.client_id, record.start_time)] = len(flush_times) - pull
        if position % buffer_size == 0:
            flush_times.append(record.finish_time)
    return [taus[(r.client_id, r.start_time)] for r in records]
