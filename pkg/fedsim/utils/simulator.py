"""
Deterministic discrete-event engine for asynchronous and synchronous federated
training.

Time is measured in mean client training times. The asynchronous engine keeps
M clients training: every finishing client hands its update to the server and
frees a slot that is refilled at the same instant. Events at equal times are
processed finish-before-start-before-eval, then by client id, so a flush
triggered by simultaneous finishes is visible to every client that starts at
that instant.

The synchronous engine runs rounds of ceil(f * M) selected clients, of which
the fastest M are aggregated; the round lasts as long as its M-th fastest
client.
"""
import bisect
import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .client import local_train
from .errors import ConfigurationError, NumericalError, ProtocolError
from .learners import evaluate
from .metrics import (
    DIVERGENCE_FACTOR,
    EvalRow,
    FlushRecord,
    MetricsLog,
    StalenessRecord,
    mean_or_nan,
)
from .numkit import DurationDist, PrngStream, fork_stream, sample_duration
from .server import ServerState, buffer_add, maybe_flush, sync_aggregate

logger = logging.getLogger(__name__)

# Stream labels under the simulation seed
SAMPLING_STREAM = 1
DURATION_STREAM = 2
TRAINING_STREAM = 3


class EventKind(IntEnum):
    CLIENT_FINISH = 0
    CLIENT_START = 1
    EVAL_TICK = 2


@dataclass(frozen=True, eq=False)
class SimEvent:
    """
    A timestamped lifecycle event. For CLIENT_START the client id is the slot
    key (the id of the client whose slot is refilled, or the initial slot
    index); the client that actually trains is drawn when the start is handled.
    """

    time: float
    kind: EventKind
    client_id: int
    payload: object = None
    start_time: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    concurrency: int = 10
    duration_dist: DurationDist = field(default_factory=DurationDist)
    budget: int = 1000
    tau_max: int = None
    overselection_factor: float = 1.0
    eval_every: float = 1.0
    eval_every_steps: int = 0
    start_stagger: float = 0.0
    duration_scales_with_data: bool = False
    seed: int = 0

    def __post_init__(self):
        errors = {}
        if self.concurrency < 1:
            errors['concurrency'] = 'must be at least 1'
        if self.budget < 0:
            errors['budget'] = 'must be non-negative'
        if self.tau_max is not None and self.tau_max < 0:
            errors['tau_max'] = 'must be non-negative or unset'
        if not self.overselection_factor >= 1.0:
            errors['overselection_factor'] = 'must be at least 1'
        if not self.eval_every > 0:
            errors['eval_every'] = 'must be positive'
        if self.eval_every_steps < 0:
            errors['eval_every_steps'] = 'must be non-negative'
        if self.start_stagger < 0:
            errors['start_stagger'] = 'must be non-negative'
        if errors:
            raise ConfigurationError(f"Invalid simulation config: {errors}", errors)

    @property
    def selected_per_round(self):
        # tolerate float noise such as 1.3 * 10 = 13.000000000000002
        return math.ceil(self.overselection_factor * self.concurrency - 1e-9)


@dataclass(frozen=True)
class StalenessCheck:
    tau: int
    accepted: bool


def compute_staleness(pull_version, apply_version, tau_max=None):
    """tau = apply - pull; updates older than ``tau_max`` are rejected."""
    tau = apply_version - pull_version
    if tau < 0:
        raise ProtocolError(f"Update pulled at version {pull_version} applied at earlier version {apply_version}")
    return StalenessCheck(tau=tau, accepted=tau_max is None or tau <= tau_max)


@dataclass(frozen=True)
class Histogram:
    bin_width: int
    counts: tuple

    @property
    def total(self):
        return sum(self.counts)

    @property
    def mode_bin(self):
        return int(np.argmax(self.counts)) if self.counts else None


def staleness_histogram(log, bin_width=1):
    """Counts of accepted-update staleness in bins [i*w, (i+1)*w)."""
    if bin_width < 1:
        raise ConfigurationError(f"bin_width must be a positive integer, got {bin_width}")
    taus = np.asarray(log.accepted_taus, dtype=np.int64)
    if taus.size == 0:
        return Histogram(bin_width, ())
    return Histogram(bin_width, tuple(int(c) for c in np.bincount(taus // bin_width)))


class _Run:
    """State shared by both engines: server, streams, metrics and divergence checks."""

    def __init__(self, sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset, observer):
        self.sim = sim_cfg
        self.strategy = strategy_cfg
        self.local = local_cfg
        self.federation = federation
        self.eval_dataset = eval_dataset
        self.observer = observer
        self.state = ServerState(model=model0)
        self.log = MetricsLog()
        self.log.final_model = model0
        self.log.metadata.update({
            'engine': 'async' if strategy_cfg.is_async else 'sync',
            'strategy': strategy_cfg.kind,
            'num_clients': len(federation),
        })
        root = PrngStream(sim_cfg.seed)
        self.sampling = fork_stream(root, SAMPLING_STREAM)
        self.durations = fork_stream(root, DURATION_STREAM)
        self.training_root = fork_stream(root, TRAINING_STREAM)
        self.starts_issued = 0
        self.mean_size = float(np.mean([len(client.labels) for client in federation]))
        self.initial_loss = None
        self.taus_since_eval = []
        self.last_eval_time = None

    def train(self, client_id):
        rng = fork_stream(self.training_root, self.starts_issued)
        self.starts_issued += 1
        return local_train(self.state.model, self.federation[client_id], self.local, rng, pull_version=self.state.step)

    def draw_duration(self, client_id, rng=None):
        duration = sample_duration(self.sim.duration_dist, rng if rng is not None else self.durations)
        if self.sim.duration_scales_with_data:
            duration *= len(self.federation[client_id].labels) / self.mean_size
        return duration

    def after_step(self, sim_time, contributors):
        self.log.flushes.append(FlushRecord(sim_time, self.state.step, self.log.client_updates, contributors))
        if self.observer is not None:
            self.observer(self.state.step, self.state.model)
        if self.sim.eval_every_steps and self.state.step % self.sim.eval_every_steps == 0:
            self.record_eval(sim_time)

    def record_eval(self, sim_time):
        """Evaluate the current model; returns False once the run has diverged."""
        if self.last_eval_time == sim_time:
            return not self.log.diverged
        if self.eval_dataset is None:
            accuracy, loss = float('nan'), float('nan')
        else:
            accuracy, loss = evaluate(self.state.model, self.eval_dataset)
        self.log.append_row(EvalRow(
            sim_time=sim_time,
            server_step=self.state.step,
            client_updates=self.log.client_updates,
            accuracy=accuracy,
            loss=loss,
            mean_staleness=mean_or_nan(self.taus_since_eval),
            rejected=self.log.rejected,
        ))
        self.taus_since_eval = []
        self.last_eval_time = sim_time
        if self.eval_dataset is not None:
            if self.initial_loss is None:
                self.initial_loss = loss
            if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * self.initial_loss:
                self.mark_diverged(f"eval loss {loss:.4g} at t={sim_time:.3f}")
        return not self.log.diverged

    def mark_diverged(self, reason):
        if not self.log.diverged:
            logger.warning(f"Run diverged ({self.strategy.kind}): {reason}")
        self.log.diverged = True


def _check_federation(sim_cfg, federation, needed):
    if len(federation) < needed:
        raise ConfigurationError(
            f"Federation has {len(federation)} clients but {needed} must train concurrently",
            {'concurrency': f'exceeds federation size {len(federation)}'},
        )


def run_async(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset=None, observer=None):
    """Simulate FedBuff/FedAsync with M concurrent clients until the update budget is spent."""
    if not strategy_cfg.is_async:
        raise ConfigurationError(f"run_async requires fedbuff or fedasync, got {strategy_cfg.kind}")
    _check_federation(sim_cfg, federation, sim_cfg.concurrency)
    if strategy_cfg.kind == 'fedbuff' and sim_cfg.concurrency < strategy_cfg.buffer_size:
        logger.warning(
            f"Concurrency M={sim_cfg.concurrency} is below buffer size K={strategy_cfg.buffer_size}; "
            f"flushes will mix updates from several pulls of each slot"
        )

    run = _Run(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset, observer)
    log = run.log
    if sim_cfg.budget == 0:
        return log

    queue = []
    sequence = 0

    def push(event):
        nonlocal sequence
        heapq.heappush(queue, (event.time, int(event.kind), event.client_id, sequence, event))
        sequence += 1

    idle = list(range(len(federation)))
    in_flight = 0
    for slot in range(min(sim_cfg.concurrency, sim_cfg.budget)):
        push(SimEvent(slot * sim_cfg.start_stagger, EventKind.CLIENT_START, slot))
    push(SimEvent(0.0, EventKind.EVAL_TICK, -1))
    now = 0.0

    try:
        while queue:
            now, _, _, _, event = heapq.heappop(queue)

            if event.kind == EventKind.CLIENT_FINISH:
                update = event.payload
                in_flight -= 1
                bisect.insort(idle, update.client_id)
                log.record_active(now, in_flight)
                check = compute_staleness(update.pull_version, run.state.step, sim_cfg.tau_max)
                log.staleness.append(StalenessRecord(
                    client_id=update.client_id,
                    start_time=event.start_time,
                    finish_time=now,
                    pull_version=update.pull_version,
                    apply_version=run.state.step,
                    tau=check.tau,
                    accepted=check.accepted,
                ))
                if check.accepted:
                    buffer_add(run.state, update, strategy_cfg, weighting=local_cfg.weighting)
                    log.buffer_insertions += 1
                    run.taus_since_eval.append(check.tau)
                    _, flushed = maybe_flush(run.state, strategy_cfg)
                    if flushed:
                        run.after_step(now, strategy_cfg.buffer_size)
                        if log.diverged:
                            break
                else:
                    log.rejected += 1
                    logger.debug(f"Rejected update from client {update.client_id}: tau={check.tau} > {sim_cfg.tau_max}")
                if run.starts_issued < sim_cfg.budget:
                    push(SimEvent(now, EventKind.CLIENT_START, update.client_id))

            elif event.kind == EventKind.CLIENT_START:
                if run.starts_issued >= sim_cfg.budget:
                    continue
                client_id = idle.pop(run.sampling.integers(len(idle)))
                update = run.train(client_id)
                finish = now + run.draw_duration(client_id)
                push(SimEvent(finish, EventKind.CLIENT_FINISH, client_id, payload=update, start_time=now))
                in_flight += 1
                log.record_active(now, in_flight)

            else:
                if not run.record_eval(now):
                    break
                if in_flight > 0 or run.starts_issued < sim_cfg.budget:
                    push(SimEvent(now + sim_cfg.eval_every, EventKind.EVAL_TICK, -1))
    except NumericalError as exc:
        run.mark_diverged(str(exc))

    if not log.diverged:
        run.record_eval(now)
    if log.rejected:
        logger.warning(f"{log.rejected} updates exceeded tau_max={sim_cfg.tau_max} and were dropped")
    log.metadata['final_step'] = run.state.step
    log.final_model = run.state.model
    return log


def run_sync(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset=None, observer=None):
    """Simulate synchronous rounds (FedAvg/FedAvgM/FedProx) with optional over-selection."""
    if strategy_cfg.is_async:
        raise ConfigurationError(f"run_sync requires fedavg, fedavgm or fedprox, got {strategy_cfg.kind}")
    selected = sim_cfg.selected_per_round
    _check_federation(sim_cfg, federation, selected)

    run = _Run(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset, observer)
    log = run.log
    if sim_cfg.budget == 0:
        return log

    cohort = sim_cfg.concurrency
    now = 0.0
    rounds = 0
    next_tick = 0.0
    try:
        while log.client_updates < sim_cfg.budget:
            idle = list(range(len(federation)))
            chosen = [idle.pop(run.sampling.integers(len(idle))) for _ in range(selected)]
            # round r draws from its own fork: its first M durations are the same for every overselection factor
            round_rng = fork_stream(run.durations, rounds)
            rounds += 1
            durations = [run.draw_duration(client_id, round_rng) for client_id in chosen]
            order = sorted(range(selected), key=lambda i: (durations[i], i))
            fastest = order[:cohort]
            end = now + durations[fastest[-1]]

            # ticks inside the round see the model from before it
            stop = False
            while next_tick < end:
                if not run.record_eval(next_tick):
                    stop = True
                    break
                next_tick += sim_cfg.eval_every
            if stop:
                break

            log.record_active(now, selected)
            updates = [run.train(chosen[i]) for i in sorted(fastest)]
            for rank, i in enumerate(fastest[:-1], start=1):
                log.record_active(now + durations[i], selected - rank)
            log.record_active(end, 0)
            for update in updates:
                log.staleness.append(StalenessRecord(
                    client_id=update.client_id,
                    start_time=now,
                    finish_time=end,
                    pull_version=update.pull_version,
                    apply_version=run.state.step,
                    tau=0,
                    accepted=True,
                ))
                run.taus_since_eval.append(0)

            sync_aggregate(run.state, updates, strategy_cfg, weighting=local_cfg.weighting)
            log.sync_selections += selected
            log.discarded += selected - cohort
            now = end
            run.after_step(now, cohort)
            if log.diverged:
                break
            while next_tick <= now:
                if not run.record_eval(next_tick):
                    break
                next_tick += sim_cfg.eval_every
            if log.diverged:
                break
    except NumericalError as exc:
        run.mark_diverged(str(exc))

    if not log.diverged:
        run.record_eval(now)
    log.metadata['final_step'] = run.state.step
    log.final_model = run.state.model
    return log


def run_simulation(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset=None, observer=None):
    engine = run_async if strategy_cfg.is_async else run_sync
    return engine(sim_cfg, strategy_cfg, local_cfg, federation, model0, eval_dataset, observer)
