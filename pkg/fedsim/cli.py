"""
Programmatic entry point: ``cli_main(['run', 'configs/smoke.cfg'])`` behaves
like ``python manage.py fedsim run configs/smoke.cfg`` but returns the exit
code instead of exiting.
"""
import sys

from django.core.management.base import CommandError

from .management.commands.fedsim import EXIT_CONFIG, EXIT_OK, Command


def cli_main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    command = Command()
    parser = command.create_parser('manage.py', 'fedsim')
    try:
        options = parser.parse_args(argv)
    except CommandError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"{exc}\n")
        return EXIT_CONFIG
    except SystemExit as exc:
        # --help exits 0; argparse errors inside subparsers exit 2
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    return command.run_subcommand(vars(options))
