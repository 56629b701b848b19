"""
Run metrics: the append-only MetricsLog written by the simulator, target
detection, and the CSV/.meta file formats.
"""
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FedSimError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('sim_time', 'server_step', 'client_updates', 'accuracy', 'loss', 'mean_staleness', 'rejected')

# Runs are cut short once the eval loss exceeds this multiple of its initial value.
DIVERGENCE_FACTOR = 1e3


class TargetOutcome:
    """Sentinels returned instead of a count/time when a target is missed."""

    NOT_REACHED = 'not_reached'
    DIVERGED = 'diverged'


@dataclass(frozen=True)
class EvalRow:
    sim_time: float
    server_step: int
    client_updates: int
    accuracy: float
    loss: float
    mean_staleness: float
    rejected: int


@dataclass(frozen=True)
class StalenessRecord:
    """One client update as seen by the server; never carries the delta itself."""

    client_id: int
    start_time: float
    finish_time: float
    pull_version: int
    apply_version: int
    tau: int
    accepted: bool


@dataclass(frozen=True)
class FlushRecord:
    sim_time: float
    server_step: int
    client_updates: int
    contributors: int


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    staleness: list = field(default_factory=list)
    flushes: list = field(default_factory=list)
    active_trace: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    diverged: bool = False
    buffer_insertions: int = 0
    sync_selections: int = 0
    discarded: int = 0
    rejected: int = 0
    final_model: object = field(default=None, repr=False)

    def append_row(self, row):
        if self.rows:
            last = self.rows[-1]
            if row.sim_time < last.sim_time or row.client_updates < last.client_updates:
                raise FedSimError(f"Metrics rows must be time-ordered: {row} after {last}")
        self.rows.append(row)

    def record_active(self, sim_time, active):
        if self.active_trace and self.active_trace[-1][0] == sim_time:
            self.active_trace[-1] = (sim_time, active)
        else:
            self.active_trace.append((sim_time, active))

    @property
    def accepted_taus(self):
        return [record.tau for record in self.staleness if record.accepted]

    @property
    def client_updates(self):
        return self.buffer_insertions + self.sync_selections + self.rejected

    @property
    def final_row(self):
        return self.rows[-1] if self.rows else None


def _first_hit(log, target_accuracy):
    for row in log.rows:
        if row.accuracy >= target_accuracy:
            return row
    return None


def updates_to_target(log, target_accuracy):
    """Client updates at the first eval row reaching ``target_accuracy``, or a sentinel."""
    row = _first_hit(log, target_accuracy)
    if row is not None:
        return row.client_updates
    return TargetOutcome.DIVERGED if log.diverged else TargetOutcome.NOT_REACHED


def wallclock_to_target(log, target_accuracy):
    """Simulated time (mean client training times) at the first eval row reaching the target."""
    row = _first_hit(log, target_accuracy)
    if row is not None:
        return row.sim_time
    return TargetOutcome.DIVERGED if log.diverged else TargetOutcome.NOT_REACHED


def render_outcome(value, budget):
    """Table-style rendering: counts as-is, misses as ``>budget`` or ``diverged``."""
    if value == TargetOutcome.NOT_REACHED:
        return f'>{budget}'
    if value == TargetOutcome.DIVERGED:
        return 'diverged'
    if isinstance(value, float):
        return f'{value:.2f}'
    return str(value)


# File formats -------------------------------------------------------------------

def format_real(value):
    """17 significant digits round-trip every float64 exactly."""
    return '%.17g' % value


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def meta_path_for(path):
    return Path(path).with_suffix('.meta')


def render_csv(log):
    lines = [','.join(CSV_COLUMNS)]
    for row in log.rows:
        lines.append(','.join([
            format_real(row.sim_time),
            str(row.server_step),
            str(row.client_updates),
            format_real(row.accuracy),
            format_real(row.loss),
            format_real(row.mean_staleness),
            str(row.rejected),
        ]))
    return '\n'.join(lines) + '\n'


def render_meta(metadata):
    return ''.join(f'{key}={metadata[key]}\n' for key in sorted(metadata))


def emit_csv(log, path):
    """Write the log rows as CSV plus a ``.meta`` sidecar, each atomically."""
    path = Path(path)
    try:
        atomic_write_text(path, render_csv(log))
        atomic_write_text(meta_path_for(path), render_meta(log.metadata))
    except OSError as exc:
        raise FedSimError(f"Failed to write metrics to {path}: {exc}")
    logger.info(f"Wrote {len(log.rows)} metric rows to {path}")
    return path


def read_csv(path):
    """Parse a CSV written by ``emit_csv`` (and its sidecar, when present) back into a MetricsLog."""
    path = Path(path)
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines or tuple(lines[0].split(',')) != CSV_COLUMNS:
        raise FedSimError(f"{path}: unexpected header")
    log = MetricsLog()
    for line in lines[1:]:
        sim_time, step, updates, accuracy, loss, staleness, rejected = line.split(',')
        log.rows.append(EvalRow(
            sim_time=float(sim_time),
            server_step=int(step),
            client_updates=int(updates),
            accuracy=float(accuracy),
            loss=float(loss),
            mean_staleness=float(staleness),
            rejected=int(rejected),
        ))
    meta = meta_path_for(path)
    if meta.exists():
        for line in meta.read_text(encoding='utf-8').splitlines():
            key, _, value = line.partition('=')
            log.metadata[key] = value
    return log


def mean_or_nan(values):
    return math.fsum(values) / len(values) if values else float('nan')
