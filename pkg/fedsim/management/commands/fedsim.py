import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from fedsim.utils.errors import ConfigurationError, FedSimError
from fedsim.utils.harness import (
    check_all_runs,
    render_compare_table,
    run_compare,
    run_single,
    run_sweep,
    sweep_settings,
)
from fedsim.utils.metrics import render_outcome
from fedsim.utils.runconfig import build_run_config, read_config_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

SUBCOMMANDS = {
    'run': 'Simulate a single configuration and write its CSV and .meta sidecar',
    'sweep': 'Run every point of the sweep.* grid and rank them by updates to target',
    'compare': 'Run all strategies under one timing model and print a summary table',
    'validate': 'Parse and check a config (sweep points and compare variants included) without running it',
}


class Command(BaseCommand):
    help = 'Federated learning simulations: run, sweep, compare or validate a config file'

    # the library never touches the database
    requires_system_checks = []

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', required=True)
        for name, description in SUBCOMMANDS.items():
            sub = subparsers.add_parser(name, help=description, description=description)
            sub.add_argument('config', help='Path to a section.key=value config file')
            sub.add_argument('--seed', type=int, help='Overrides sim.seed and federation.seed')
            sub.add_argument('--out-dir', help='Output directory (default: run.output_dir or FEDSIM_OUTPUT_DIR)')
            sub.add_argument('--parallelism', type=int, help='Concurrent sweep points (default: FEDSIM_PARALLELISM)')
            sub.add_argument('--budget-updates', type=int, help='Overrides sim.budget')

    def handle(self, *args, **options):
        code = self.run_subcommand(options)
        if code != EXIT_OK:
            raise CommandError(f"fedsim {options['subcommand']} failed", returncode=code)

    def run_subcommand(self, options):
        """Execute one subcommand and return its exit code (0 ok, 1 config error, 2 runtime error)."""
        try:
            flat = read_config_file(options['config'])
            cfg = build_run_config(flat, self._overrides(options))
            handler = getattr(self, f"_{options['subcommand']}")
            handler(cfg, flat, options)
        except ConfigurationError as exc:
            self.stderr.write(f"Configuration error: {exc}")
            return EXIT_CONFIG
        except FedSimError as exc:
            logger.error(f"Simulation failed: {exc}")
            self.stderr.write(f"Runtime error: {exc}")
            return EXIT_RUNTIME
        except OSError as exc:
            self.stderr.write(f"I/O error: {exc}")
            return EXIT_RUNTIME
        return EXIT_OK

    def _overrides(self, options):
        overrides = {}
        if options.get('seed') is not None:
            overrides['sim.seed'] = str(options['seed'])
            overrides['federation.seed'] = str(options['seed'])
        if options.get('budget_updates') is not None:
            overrides['sim.budget'] = str(options['budget_updates'])
        return overrides

    def _validate(self, cfg, flat, options):
        grid, variants = check_all_runs(cfg, flat)
        self.stdout.write(
            f"OK: {options['config']} (strategy={cfg.strategy.kind}, M={cfg.sim.concurrency}, "
            f"K={cfg.strategy.buffer_size}, budget={cfg.sim.budget}, sweep axes={len(grid)}, "
            f"compare variants={len(variants)})"
        )

    def _run(self, cfg, flat, options):
        result = run_single(cfg, options.get('out_dir'))
        summary = result.summary
        self.stdout.write(f"Wrote {result.csv_path}")
        self.stdout.write(
            f"updates_to_target={render_outcome(summary['updates_to_target'], cfg.sim.budget)} "
            f"final_accuracy={summary['final_accuracy']} server_steps={summary['server_steps']} "
            f"client_updates={summary['client_updates']}"
        )

    def _sweep(self, cfg, flat, options):
        grid, mode, samples, replicates = sweep_settings(flat)
        parallelism = options.get('parallelism') or getattr(settings, 'FEDSIM_PARALLELISM', 1)
        report = run_sweep(cfg, grid, parallelism, options.get('out_dir'), mode, samples, replicates)
        for rank, point in enumerate(report.ranking, start=1):
            values = ' '.join(f'{key}={point.overrides[key]}' for key in report.axes)
            outcome = point.status if point.status == 'failed' else render_outcome(point.updates_to_target, report.budget)
            self.stdout.write(f"{rank:>3}. point {point.index}: {outcome}  {values}")

    def _compare(self, cfg, flat, options):
        report = run_compare(cfg, flat, options.get('out_dir'))
        self.stdout.write(render_compare_table(report))
