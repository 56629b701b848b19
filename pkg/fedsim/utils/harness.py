"""
Experiment orchestration: single runs, hyperparameter sweeps and the
five-strategy comparison, plus the files they leave behind.

Output layout under the output directory:
    run      <name>.csv + <name>.meta
    sweep    <name>/point_<i>.csv (+ _r<j> for replicates), <name>/sweep_report.csv
    compare  <name>/<strategy>.csv for every strategy, <name>/compare_summary.txt
"""
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings

from .datagen import federation_digest
from .errors import ConfigurationError, FedSimError
from .learners import save_checkpoint
from .metrics import (
    TargetOutcome,
    atomic_write_text,
    emit_csv,
    format_real,
    mean_or_nan,
    render_outcome,
    updates_to_target,
    wallclock_to_target,
)
from .numkit import PrngStream, fork_stream
from .runconfig import build_run_config, harness_keys, load_federation, materialize, parse_grid_values
from .server import STRATEGIES, SYNC_KINDS
from .simulator import run_simulation, staleness_histogram

logger = logging.getLogger(__name__)

COMPARE_KINDS = tuple(STRATEGIES)

# Applied to a compare variant unless the config overrides them
COMPARE_DEFAULTS = {
    'fedavgm': {'strategy.momentum': '0.9'},
    'fedprox': {'local.prox_mu': '0.01'},
}
COMPARE_OVERRIDE_SECTIONS = ('strategy', 'local')

SWEEP_OPTIONS = ('mode', 'samples', 'replicates')
SWEEP_MODES = ('grid', 'random')
RANDOM_SEARCH_STREAM = 5

# Ranking tiers in sweep reports
STATUS_ORDER = {'reached': 0, TargetOutcome.NOT_REACHED: 1, TargetOutcome.DIVERGED: 2, 'failed': 3}


def build_id():
    return str(getattr(settings, 'FEDSIM_BUILD_ID', 'dev'))


def resolve_output_dir(cfg, out_dir=None):
    if out_dir:
        return Path(out_dir)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(getattr(settings, 'FEDSIM_OUTPUT_DIR', 'runs'))


def _json_number(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def summarize(log, cfg):
    """JSON-friendly digest of one run; misses are reported by their sentinel strings."""
    final = log.final_row
    histogram = staleness_histogram(log)
    return {
        'name': cfg.name,
        'strategy': cfg.strategy.kind,
        'target_accuracy': cfg.target_accuracy,
        'updates_to_target': updates_to_target(log, cfg.target_accuracy),
        'wallclock_to_target': _json_number(wallclock_to_target(log, cfg.target_accuracy)),
        'final_accuracy': _json_number(final.accuracy) if final else None,
        'final_loss': _json_number(final.loss) if final else None,
        'sim_time': final.sim_time if final else 0.0,
        'server_steps': int(log.metadata.get('final_step', 0)),
        'client_updates': log.client_updates,
        'buffer_insertions': log.buffer_insertions,
        'sync_selections': log.sync_selections,
        'discarded': log.discarded,
        'rejected': log.rejected,
        'mean_staleness': _json_number(mean_or_nan(log.accepted_taus)),
        'staleness_histogram': list(histogram.counts),
        'diverged': log.diverged,
    }


def simulate(cfg, federation=None, observer=None, build=None):
    """Run ``cfg`` in memory and return its MetricsLog with full reproduction metadata."""
    mat = materialize(cfg, federation)
    logger.info(
        f"Run '{cfg.name}': {cfg.strategy.kind}, M={cfg.sim.concurrency}, K={cfg.strategy.buffer_size}, "
        f"budget={cfg.sim.budget}, {len(mat.train)} clients, {mat.layout.param_count} parameters"
    )
    log = run_simulation(cfg.sim, cfg.strategy, cfg.local, mat.train, mat.model0, mat.eval_dataset, observer)
    log.metadata.update(dict(cfg.flat))
    log.metadata.update({
        'build_id': build if build is not None else build_id(),
        'federation_digest': federation_digest(mat.train),
        'model.param_count': mat.layout.param_count,
        'diverged': 'true' if log.diverged else 'false',
        'count.buffer_insertions': log.buffer_insertions,
        'count.sync_selections': log.sync_selections,
        'count.discarded': log.discarded,
        'count.rejected': log.rejected,
    })
    return log


@dataclass
class RunResult:
    cfg: object
    log: object
    summary: dict
    csv_path: Path = None


def execute_run(cfg, csv_path=None, federation=None, build=None):
    """Simulate one config and, when ``csv_path`` is given, write its CSV/.meta (and checkpoint)."""
    log = simulate(cfg, federation, build=build)
    if csv_path is not None:
        csv_path = Path(csv_path)
        emit_csv(log, csv_path)
        if cfg.save_checkpoint:
            save_checkpoint(log.final_model, csv_path.with_suffix('.weights'))
    summary = summarize(log, cfg)
    logger.info(
        f"Run '{cfg.name}' finished: updates_to_target={summary['updates_to_target']}, "
        f"final_accuracy={summary['final_accuracy']}"
    )
    return RunResult(cfg=cfg, log=log, summary=summary, csv_path=csv_path)


def run_single(cfg, out_dir=None):
    out = resolve_output_dir(cfg, out_dir)
    return execute_run(cfg, out / f'{cfg.name}.csv')


# Sweeps -----------------------------------------------------------------------

def expand_grid(grid):
    """Cartesian product of ``{key: [values]}`` in key order; the last key varies fastest."""
    if not grid:
        raise ConfigurationError("Sweep grid is empty", {'sweep': 'no axes given'})
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[key] for key in keys))]


def select_points(points, mode='grid', samples=None, seed=0):
    """All grid points, or ``samples`` distinct ones drawn with a forked stream."""
    if mode not in SWEEP_MODES:
        raise ConfigurationError(f"Unknown sweep mode: {mode}", {'sweep.mode': f'must be one of {list(SWEEP_MODES)}'})
    if mode == 'grid':
        return list(enumerate(points))
    if not samples or samples < 1:
        raise ConfigurationError("Random search needs sweep.samples >= 1", {'sweep.samples': 'must be at least 1'})
    order = fork_stream(PrngStream(seed), RANDOM_SEARCH_STREAM).permutation(len(points))[:samples]
    return [(int(i), points[int(i)]) for i in order]


def replicate_seed(base_seed, replicate):
    """Replicate 0 keeps the base seed so a one-point sweep reproduces the single run."""
    if replicate == 0:
        return base_seed
    return fork_stream(PrngStream(base_seed), replicate).stream_id


@dataclass
class SweepPoint:
    index: int
    overrides: dict
    status: str = 'failed'
    updates_to_target: object = None
    wallclock_to_target: object = None
    final_accuracy: float = None
    error: str = ''
    replicates: list = field(default_factory=list)


@dataclass
class SweepReport:
    axes: list
    points: list
    ranking: list
    budget: int

    @property
    def best(self):
        return self.ranking[0] if self.ranking and self.ranking[0].status == 'reached' else None


def _execute_point(job):
    """Worker body: one isolated run; failures come back as data, never as exceptions."""
    index, replicate, cfg, csv_path, build = job
    try:
        result = execute_run(cfg, csv_path, build=build)
    except FedSimError as exc:
        logger.warning(f"Sweep point {index} (replicate {replicate}) failed: {exc}")
        return {'index': index, 'replicate': replicate, 'status': 'failed', 'error': str(exc)}
    summary = result.summary
    return {
        'index': index,
        'replicate': replicate,
        'status': 'ok',
        'updates_to_target': summary['updates_to_target'],
        'wallclock_to_target': wallclock_to_target(result.log, cfg.target_accuracy),
        'final_accuracy': summary['final_accuracy'],
        'error': '',
    }


def _outcome_key(value):
    if value == TargetOutcome.DIVERGED:
        return (2, 0.0)
    if value == TargetOutcome.NOT_REACHED:
        return (1, 0.0)
    return (0, float(value))


def _lower_median(values):
    ordered = sorted(values, key=_outcome_key)
    return ordered[(len(ordered) - 1) // 2]


def _finish_point(point, outcomes):
    point.replicates = outcomes
    failed = [o for o in outcomes if o['status'] == 'failed']
    if failed:
        point.status, point.error = 'failed', failed[0]['error']
        return point
    point.updates_to_target = _lower_median([o['updates_to_target'] for o in outcomes])
    point.wallclock_to_target = _lower_median([o['wallclock_to_target'] for o in outcomes])
    accuracies = [o['final_accuracy'] for o in outcomes if o['final_accuracy'] is not None]
    point.final_accuracy = float(sorted(accuracies)[(len(accuracies) - 1) // 2]) if accuracies else None
    if point.updates_to_target in (TargetOutcome.NOT_REACHED, TargetOutcome.DIVERGED):
        point.status = point.updates_to_target
    else:
        point.status = 'reached'
    return point


def rank_points(points):
    """Reached points by updates-to-target, then not-reached, diverged, failed; ties by point index."""
    def key(point):
        value = point.updates_to_target if point.status == 'reached' else 0
        return (STATUS_ORDER[point.status], value, point.index)
    return sorted(points, key=key)


def run_sweep(base, grid, parallelism=1, out_dir=None, mode='grid', samples=None, replicates=1):
    """
    One run per grid point (times ``replicates``). Points only differ from
    ``base`` by their overrides; the federation never changes across points.
    Returns a SweepReport and writes sweep_report.csv next to the point CSVs.
    """
    if replicates < 1:
        raise ConfigurationError("sweep.replicates must be at least 1", {'sweep.replicates': 'must be at least 1'})
    axes = list(grid)
    chosen = select_points(expand_grid(grid), mode, samples, base.sim.seed)
    folder = resolve_output_dir(base, out_dir) / base.name
    build = build_id()

    points, jobs = [], []
    for index, overrides in chosen:
        point = SweepPoint(index=index, overrides=overrides)
        points.append(point)
        for replicate in range(replicates):
            replicate_overrides = dict(overrides)
            replicate_overrides['sim.seed'] = str(replicate_seed(base.sim.seed, replicate))
            replicate_overrides['run.name'] = f'{base.name}-p{index}' + (f'-r{replicate}' if replicate else '')
            suffix = f'_r{replicate}' if replicate else ''
            try:
                cfg = build_run_config(dict(base.flat), replicate_overrides)
            except ConfigurationError as exc:
                logger.warning(f"Sweep point {index} has an invalid configuration: {exc}")
                jobs.append(('invalid', index, replicate, str(exc)))
                continue
            jobs.append(('run', index, replicate, (index, replicate, cfg, folder / f'point_{index}{suffix}.csv', build)))

    runnable = [job[3] for job in jobs if job[0] == 'run']
    logger.info(f"Sweep '{base.name}': {len(points)} points x {replicates} replicates over {axes}, parallelism {parallelism}")
    if parallelism > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_execute_point, runnable))
    else:
        results = [_execute_point(job) for job in runnable]

    outcomes = {}
    for result in results:
        outcomes.setdefault(result['index'], []).append(result)
    for job in jobs:
        if job[0] == 'invalid':
            _, index, replicate, message = job
            outcomes.setdefault(index, []).append({'index': index, 'replicate': replicate, 'status': 'failed', 'error': message})
    for point in points:
        _finish_point(point, sorted(outcomes.get(point.index, []), key=lambda o: o['replicate']))

    report = SweepReport(axes=axes, points=points, ranking=rank_points(points), budget=base.sim.budget)
    atomic_write_text(folder / 'sweep_report.csv', render_sweep_report(report))
    if report.best is None:
        logger.warning(f"Sweep '{base.name}': no point reached target accuracy {base.target_accuracy}")
    return report


def _render_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return format_real(value)
    return str(value)


def render_sweep_report(report):
    header = ['rank', 'point', 'status', 'updates_to_target', 'wallclock_to_target', 'final_accuracy', *report.axes, 'error']
    lines = [','.join(header)]
    for rank, point in enumerate(report.ranking, start=1):
        lines.append(','.join([
            str(rank),
            str(point.index),
            point.status,
            _render_value(point.updates_to_target),
            _render_value(point.wallclock_to_target),
            _render_value(point.final_accuracy),
            *[point.overrides[axis] for axis in report.axes],
            point.error.replace(',', ';').replace('\n', ' '),
        ]))
    return '\n'.join(lines) + '\n'


def sweep_settings(flat):
    """Split the ``sweep.`` keys into ``(grid, mode, samples, replicates)``."""
    keys = harness_keys(flat, 'sweep')
    grid = {}
    for key, raw in keys.items():
        if key in SWEEP_OPTIONS:
            continue
        if '.' not in key:
            raise ConfigurationError(f"Unknown sweep option 'sweep.{key}'", {f'sweep.{key}': 'unknown option'})
        grid[key] = parse_grid_values(raw)
    try:
        samples = int(keys['samples']) if 'samples' in keys else None
        replicates = int(keys.get('replicates', 1))
    except ValueError as exc:
        raise ConfigurationError(f"Malformed sweep option: {exc}", {'sweep': str(exc)})
    return grid, keys.get('mode', 'grid'), samples, replicates


# Comparison -------------------------------------------------------------------

def compare_variants(base, flat):
    """
    ``{kind: overrides}`` for every compared strategy. Variants share the
    federation, seeds and duration distribution of ``base``; only strategy
    and local settings differ.
    """
    keys = harness_keys(flat, 'compare')
    kinds = [kind.strip() for kind in keys.pop('strategies', ','.join(COMPARE_KINDS)).split(',') if kind.strip()]
    unknown = [kind for kind in kinds if kind not in STRATEGIES]
    if unknown or not kinds:
        raise ConfigurationError(f"Unknown strategies in compare.strategies: {unknown}",
                                 {'compare.strategies': f'must be drawn from {list(STRATEGIES)}'})

    per_kind = {kind: {} for kind in kinds}
    for key, value in keys.items():
        kind, _, rest = key.partition('.')
        section, dot, _ = rest.partition('.')
        if kind not in STRATEGIES or not dot or section not in COMPARE_OVERRIDE_SECTIONS:
            raise ConfigurationError(f"Unknown compare option 'compare.{key}'",
                                     {f'compare.{key}': 'expected compare.<strategy>.<strategy|local>.<field>'})
        if kind in per_kind:
            per_kind[kind][rest] = value

    variants = {}
    for kind in kinds:
        overrides = {
            'strategy.kind': kind,
            'strategy.momentum': '0',
            'local.prox_mu': '0',
            'run.name': f'{base.name}-{kind}',
        }
        if kind in SYNC_KINDS:
            overrides['strategy.buffer_size'] = 'none'
        else:
            overrides['sim.overselection_factor'] = '1'
            if kind == 'fedasync':
                overrides['strategy.buffer_size'] = 'none'
        overrides.update(COMPARE_DEFAULTS.get(kind, {}))
        overrides.update(per_kind[kind])
        variants[kind] = overrides
    return variants


@dataclass
class CompareReport:
    results: dict
    budget: int
    target_accuracy: float


def run_compare(base, flat, out_dir=None, emit=True):
    """Run every strategy of the comparison on one federation; ``emit`` writes their CSVs and the summary table."""
    variants = compare_variants(base, flat)
    configs = {kind: build_run_config(dict(base.flat), overrides) for kind, overrides in variants.items()}
    folder = resolve_output_dir(base, out_dir) / base.name
    federation = load_federation(base)
    results = {}
    for kind, cfg in configs.items():
        results[kind] = execute_run(cfg, folder / f"{kind}.csv" if emit else None, federation=federation)
    report = CompareReport(results=results, budget=base.sim.budget, target_accuracy=base.target_accuracy)
    if emit:
        atomic_write_text(folder / 'compare_summary.txt', render_compare_table(report))
    return report


def render_compare_table(report):
    """Fixed-width summary: one row per strategy, misses rendered as '>budget' or 'diverged'."""
    header = ('strategy', 'updates_to_target', 'wallclock_to_target', 'final_accuracy', 'server_steps', 'client_updates')
    rows = [header]
    for kind, result in report.results.items():
        summary = result.summary
        wallclock = wallclock_to_target(result.log, report.target_accuracy)
        accuracy = summary['final_accuracy']
        rows.append((
            kind,
            render_outcome(summary['updates_to_target'], report.budget),
            render_outcome(wallclock, f"{summary['sim_time']:.2f}"),
            'n/a' if accuracy is None else f'{accuracy:.4f}',
            str(summary['server_steps']),
            str(summary['client_updates']),
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [f"target accuracy {report.target_accuracy}, budget {report.budget} client updates"]
    for row in rows:
        lines.append('  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return '\n'.join(lines) + '\n'


def check_all_runs(base, flat):
    """Build (and so validate) every sweep point and compare variant described by ``flat``."""
    grid, _, _, _ = sweep_settings(flat)
    for key, values in grid.items():
        for value in values:
            build_run_config(dict(base.flat), {key: value})
    variants = {}
    if any(key.startswith('compare.') for key in flat):
        variants = compare_variants(base, flat)
        for overrides in variants.values():
            build_run_config(dict(base.flat), overrides)
    return grid, variants
