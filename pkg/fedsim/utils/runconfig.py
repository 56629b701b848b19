"""
Experiment configuration files.

A config is flat UTF-8 text with one ``section.key=value`` per line; ``#``
starts a comment and blank lines are ignored. The run sections are
federation, model, sim, strategy, local and run. Keys under ``sweep.`` and
``compare.`` are kept aside for the harness.

Every section is validated by the REST framework serializers in
``fedsim.serializers`` so the CLI and the HTTP API accept exactly the same
configs.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .datagen import FederationSpec, generate_federation, load_csv_federation, num_classes_of, train_eval_split
from .errors import ConfigurationError, IngestionError
from .learners import ModelLayout, init_params
from .metrics import format_real
from .numkit import DEFAULT_DURATION_SHAPES, DurationDist, PrngStream, fork_stream
from .client import LocalConfig
from .server import StrategyConfig
from .simulator import SimConfig

logger = logging.getLogger(__name__)

RUN_SECTIONS = ('federation', 'model', 'sim', 'strategy', 'local', 'run')
HARNESS_SECTIONS = ('sweep', 'compare')
NULL_WORDS = ('none', 'null', 'unlimited')

# Stream label under sim.seed for the initial model of architectures with random init
INIT_STREAM = 4

FALLBACK_BUDGET = 50000


def parse_config_text(text, source='<config>'):
    """Parse flat config text into an ordered ``{key: raw string value}`` dict."""
    flat = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{line_no}: expected 'section.key=value', got '{raw.strip()}'",
                                     {f'line {line_no}': 'expected section.key=value'})
        section = key.split('.', 1)[0]
        if '.' not in key or section not in RUN_SECTIONS + HARNESS_SECTIONS:
            raise ConfigurationError(
                f"{source}:{line_no}: unknown section in '{key}' (valid: {list(RUN_SECTIONS + HARNESS_SECTIONS)})",
                {key: 'unknown section'},
            )
        if key in flat:
            raise ConfigurationError(f"{source}:{line_no}: duplicate key '{key}'", {key: 'duplicate key'})
        flat[key] = value
    return flat


def read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ConfigurationError(f"Config file not found: {path}", {'config': f'{path} does not exist'})
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"Cannot read config file {path}: {exc}", {'config': str(exc)})
    return parse_config_text(text, source=str(path))


def split_sections(flat):
    """Split run keys into per-section dicts; harness keys are returned separately."""
    sections = {name: {} for name in RUN_SECTIONS}
    extras = {}
    for key, value in flat.items():
        section, _, field = key.partition('.')
        if section in HARNESS_SECTIONS:
            extras[key] = value
            continue
        if section not in RUN_SECTIONS or not field:
            raise ConfigurationError(f"Unknown section in '{key}'", {key: 'unknown section'})
        if '.' in field:
            raise ConfigurationError(f"Nested key '{key}' is only allowed under sweep. and compare.", {key: 'nested key'})
        sections[section][field] = None if value.lower() in NULL_WORDS else value
    return sections, extras


def harness_keys(flat, prefix):
    """``{rest: value}`` for every key under ``prefix.``"""
    start = prefix + '.'
    return {key[len(start):]: value for key, value in flat.items() if key.startswith(start)}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = 'logistic'
    hidden: int = 32

    def layout(self, feature_dim, num_classes):
        return ModelLayout(kind=self.kind, feature_dim=feature_dim, num_classes=num_classes, hidden=self.hidden)


@dataclass(frozen=True)
class CsvSource:
    path: str
    feature_columns: tuple
    label_column: str = 'label'
    client_column: str = 'client'


@dataclass(frozen=True)
class RunConfig:
    federation: FederationSpec
    model: ModelSpec
    sim: SimConfig
    strategy: StrategyConfig
    local: LocalConfig
    target_accuracy: float = 0.8
    eval_fraction: float = 0.1
    name: str = 'run'
    output_dir: str = None
    save_checkpoint: bool = False
    csv_source: CsvSource = None
    flat: tuple = ()


def _render(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return format_real(value)
    if isinstance(value, (list, tuple)):
        return ','.join(str(item) for item in value)
    return str(value)


def _default_budget():
    try:
        from django.conf import settings
        return int(getattr(settings, 'FEDSIM_DEFAULT_BUDGET', FALLBACK_BUDGET))
    except Exception:
        return FALLBACK_BUDGET


def validate_sections(sections):
    """Run the section serializers; returns their validated data or raises ConfigurationError."""
    # imported here so sweep workers can unpickle RunConfig without an app registry
    from ..serializers import RunConfigSerializer

    serializer = RunConfigSerializer(data=sections)
    unknown = {
        f'{name}.{key}': 'unknown key'
        for name, values in sections.items()
        for key in values
        if key not in serializer.fields[name].fields
    }
    if unknown:
        raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}", unknown)
    if not serializer.is_valid():
        raise ConfigurationError(f"Invalid configuration: {dict(serializer.errors)}", dict(serializer.errors))
    return serializer.validated_data


def build_run_config(flat, overrides=None):
    """Validate a flat config (plus ``overrides``) and build the typed RunConfig."""
    merged = dict(flat)
    merged.update(overrides or {})
    sections, _ = split_sections(merged)
    data = validate_sections(sections)
    fed, model, sim, strategy, local, run = (data[name] for name in RUN_SECTIONS)

    sim = dict(sim)
    if sim['budget'] is None:
        sim['budget'] = _default_budget()
    if sim['duration_shape'] is None:
        sim['duration_shape'] = DEFAULT_DURATION_SHAPES[sim['duration']]
    strategy = dict(strategy)
    if strategy['kind'] in ('fedavg', 'fedavgm', 'fedprox'):
        strategy['buffer_size'] = sim['concurrency']
    elif strategy['kind'] == 'fedasync':
        strategy['buffer_size'] = 1
    elif strategy['buffer_size'] is None:
        strategy['buffer_size'] = 10

    csv_source = None
    if fed['source'] == 'csv':
        csv_source = CsvSource(
            path=fed['csv_path'],
            feature_columns=tuple(fed['csv_features']),
            label_column=fed['csv_label'],
            client_column=fed['csv_client'],
        )

    normalized = {}
    for name, values in (('federation', fed), ('model', model), ('sim', sim),
                         ('strategy', strategy), ('local', local), ('run', run)):
        for field, value in values.items():
            normalized[f'{name}.{field}'] = _render(value)

    return RunConfig(
        federation=FederationSpec(
            num_clients=fed['num_clients'],
            feature_dim=fed['feature_dim'],
            num_classes=fed['num_classes'],
            label_skew_alpha=fed['label_skew_alpha'],
            size_lognormal_sigma=fed['size_lognormal_sigma'],
            mean_examples_per_client=fed['mean_examples_per_client'],
            class_separation=fed['class_separation'],
            seed=fed['seed'],
        ),
        model=ModelSpec(kind=model['kind'], hidden=model['hidden']),
        sim=SimConfig(
            concurrency=sim['concurrency'],
            duration_dist=DurationDist(sim['duration'], sim['duration_shape'], sim['normalize_mean']),
            budget=sim['budget'],
            tau_max=sim['tau_max'],
            overselection_factor=sim['overselection_factor'],
            eval_every=sim['eval_every'],
            eval_every_steps=sim['eval_every_steps'],
            start_stagger=sim['start_stagger'],
            duration_scales_with_data=sim['duration_scales_with_data'],
            seed=sim['seed'],
        ),
        strategy=StrategyConfig(**strategy),
        local=LocalConfig(**local),
        target_accuracy=run['target_accuracy'],
        eval_fraction=run['eval_fraction'],
        name=run['name'],
        output_dir=run['output_dir'],
        save_checkpoint=run['save_checkpoint'],
        csv_source=csv_source,
        flat=tuple(sorted(normalized.items())),
    )


def load_run_config(path, overrides=None):
    return build_run_config(read_config_file(path), overrides)


@dataclass(eq=False)
class Materialized:
    """Everything a simulation needs that is derived from a RunConfig."""

    train: list
    eval_dataset: object
    model0: object
    layout: ModelLayout


def load_federation(cfg):
    if cfg.csv_source is None:
        return generate_federation(cfg.federation)
    source = cfg.csv_source
    try:
        return load_csv_federation(source.path, list(source.feature_columns), source.label_column, source.client_column)
    except IngestionError:
        logger.error(f"Could not ingest {source.path}")
        raise


def materialize(cfg, federation=None):
    """Build the train federation, held-out eval pool and initial model for ``cfg``."""
    federation = federation if federation is not None else load_federation(cfg)
    train, eval_dataset = train_eval_split(federation, cfg.eval_fraction, cfg.federation.seed)
    if cfg.csv_source is None:
        feature_dim, num_classes = cfg.federation.feature_dim, cfg.federation.num_classes
    else:
        feature_dim = federation[0].feature_dim
        num_classes = max(2, num_classes_of(federation))
    layout = cfg.model.layout(feature_dim, num_classes)
    model0 = init_params(layout, fork_stream(PrngStream(cfg.sim.seed), INIT_STREAM))
    return Materialized(train=train, eval_dataset=eval_dataset, model0=model0, layout=layout)


def parse_grid_values(raw):
    """
    Grid axis values: a comma list, ``logspace(lo,hi,n)`` (10**lo .. 10**hi)
    or ``linspace(lo,hi,n)``. Values stay strings so they re-enter validation.
    """
    raw = raw.strip()
    for name in ('logspace', 'linspace'):
        if raw.startswith(name + '(') and raw.endswith(')'):
            try:
                lo, hi, n = [part.strip() for part in raw[len(name) + 1:-1].split(',')]
                lo, hi, n = float(lo), float(hi), int(n)
            except ValueError:
                raise ConfigurationError(f"Malformed grid axis '{raw}'", {'sweep': f'malformed {name}'})
            if n < 1:
                raise ConfigurationError(f"Grid axis '{raw}' needs at least one point", {'sweep': 'empty axis'})
            step = (hi - lo) / (n - 1) if n > 1 else 0.0
            points = [lo + i * step for i in range(n)]
            if name == 'logspace':
                points = [math.pow(10.0, p) for p in points]
            return [format_real(p) for p in points]
    values = [value.strip() for value in raw.split(',') if value.strip()]
    if not values:
        raise ConfigurationError("Empty grid axis", {'sweep': 'empty axis'})
    return values
