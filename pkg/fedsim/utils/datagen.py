"""
Synthetic non-IID federations and CSV ingestion.

Every client draws its label mix from a Dirichlet distribution and its size
from a log-normal distribution, so the federation shows both label skew and a
long tail of client sizes. Features come from class-conditional Gaussians
centred on scaled one-hot corners.
"""
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, StructuralError
from .numkit import PrngStream, fork_stream

logger = logging.getLogger(__name__)

# Stream labels under the federation seed
SIZE_STREAM = 1
LABEL_MIX_STREAM = 2
EXAMPLE_STREAM = 3


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


@dataclass(eq=False)
class ClientDataset:
    """The examples held by one client, stored column-wise."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    weight: float = 1.0
    name: str = ''

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise StructuralError(f"Client {self.client_id}: features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise StructuralError(
                f"Client {self.client_id}: {self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] == 0:
            raise ConfigurationError(f"Client {self.client_id} has no examples")
        if not self.weight > 0:
            raise ConfigurationError(f"Client {self.client_id} weight must be positive, got {self.weight}")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def size(self):
        return len(self)

    @property
    def feature_dim(self):
        return int(self.features.shape[1])

    def examples(self):
        for row, label in zip(self.features, self.labels):
            yield Example(features=row, label=int(label))

    def take(self, indices):
        return ClientDataset(
            client_id=self.client_id,
            features=self.features[indices],
            labels=self.labels[indices],
            weight=self.weight,
            name=self.name,
        )


@dataclass(frozen=True)
class FederationSpec:
    num_clients: int = 100
    feature_dim: int = 16
    num_classes: int = 2
    label_skew_alpha: float = 0.5
    size_lognormal_sigma: float = 1.0
    mean_examples_per_client: int = 50
    class_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        errors = {}
        if self.num_clients < 1:
            errors['num_clients'] = 'must be at least 1'
        if self.feature_dim < 1:
            errors['feature_dim'] = 'must be at least 1'
        if self.num_classes < 2:
            errors['num_classes'] = 'must be at least 2'
        if self.num_classes > self.feature_dim:
            errors['num_classes'] = 'class means sit on one-hot corners, so num_classes <= feature_dim'
        if not self.label_skew_alpha > 0:
            errors['label_skew_alpha'] = 'must be positive'
        if self.size_lognormal_sigma < 0:
            errors['size_lognormal_sigma'] = 'must be non-negative'
        if self.mean_examples_per_client < 1:
            errors['mean_examples_per_client'] = 'must be at least 1'
        if errors:
            raise ConfigurationError(f"Invalid federation spec: {errors}", errors)

    def class_means(self):
        return self.class_separation * np.eye(self.num_classes, self.feature_dim)


def _allocate_labels(proportions, size):
    """Split ``size`` examples over classes by largest remainder."""
    raw = proportions * size
    counts = np.floor(raw).astype(np.int64)
    shortfall = size - int(counts.sum())
    if shortfall > 0:
        # stable order: larger remainder first, lower class index on ties
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:shortfall]] += 1
    return counts


def generate_federation(spec):
    """Build ``spec.num_clients`` client datasets, fully determined by ``spec.seed``."""
    root = PrngStream(spec.seed)
    size_rng = fork_stream(root, SIZE_STREAM)
    mix_rng = fork_stream(root, LABEL_MIX_STREAM)
    example_root = fork_stream(root, EXAMPLE_STREAM)

    sigma = spec.size_lognormal_sigma
    mu = math.log(spec.mean_examples_per_client) - sigma ** 2 / 2.0
    raw_sizes = np.exp(mu + sigma * size_rng.generator.standard_normal(spec.num_clients))
    sizes = np.maximum(1, np.rint(raw_sizes)).astype(np.int64)

    means = spec.class_means()
    concentration = np.full(spec.num_classes, float(spec.label_skew_alpha))
    federation = []
    for client_id in range(spec.num_clients):
        proportions = mix_rng.generator.dirichlet(concentration)
        counts = _allocate_labels(proportions, int(sizes[client_id]))
        rng = fork_stream(example_root, client_id)
        labels = rng.permutation(np.repeat(np.arange(spec.num_classes), counts))
        noise = rng.generator.standard_normal((labels.shape[0], spec.feature_dim))
        federation.append(ClientDataset(client_id=client_id, features=means[labels] + noise, labels=labels))

    logger.info(
        f"Generated federation: {spec.num_clients} clients, {int(sizes.sum())} examples, "
        f"median size {float(np.median(sizes)):.1f}, max size {int(sizes.max())}"
    )
    return federation


def federation_digest(federation):
    """SHA-256 over every client's id, features and labels."""
    digest = hashlib.sha256()
    for client in federation:
        digest.update(np.int64(client.client_id).tobytes())
        digest.update(np.ascontiguousarray(client.features, dtype='<f8').tobytes())
        digest.update(np.ascontiguousarray(client.labels, dtype='<i8').tobytes())
    return digest.hexdigest()


def load_csv_federation(path, feature_columns, label_column, client_column):
    """
    Read a header-first, comma-separated UTF-8 file into one dataset per
    distinct ``client_column`` value. Client ids follow first appearance and
    rows keep their file order within a client.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"CSV file not found: {path}")

    rows_by_client = {}
    with path.open(newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for column in [*feature_columns, label_column, client_column]:
            if column not in header:
                raise IngestionError(f"{path}: unknown column '{column}' (header: {header})", line=1)

        # line 1 is the header
        for line_no, row in enumerate(reader, start=2):
            if None in row or any(value is None for value in row.values()):
                raise IngestionError(f"{path}:{line_no}: malformed row (wrong number of fields)", line=line_no)
            try:
                features = [float(row[column]) for column in feature_columns]
            except ValueError:
                raise IngestionError(f"{path}:{line_no}: non-numeric feature value", line=line_no)
            if not all(math.isfinite(value) for value in features):
                raise IngestionError(f"{path}:{line_no}: non-finite feature value", line=line_no)
            try:
                label_value = float(row[label_column])
            except ValueError:
                raise IngestionError(f"{path}:{line_no}: non-numeric label '{row[label_column]}'", line=line_no)
            if not label_value.is_integer() or label_value < 0:
                raise IngestionError(f"{path}:{line_no}: label must be a non-negative integer", line=line_no)
            rows_by_client.setdefault(row[client_column], []).append((features, int(label_value)))

    if not rows_by_client:
        raise IngestionError(f"{path}: no data rows", line=2)

    federation = []
    for client_id, (key, rows) in enumerate(rows_by_client.items()):
        federation.append(ClientDataset(
            client_id=client_id,
            features=np.array([features for features, _ in rows], dtype=np.float64),
            labels=np.array([label for _, label in rows], dtype=np.int64),
            name=key,
        ))
    logger.info(f"Loaded {len(federation)} clients from {path}")
    return federation


def num_classes_of(federation):
    return int(max(int(client.labels.max()) for client in federation)) + 1


def train_eval_split(federation, eval_fraction, seed):
    """
    Hold out ``eval_fraction`` of every client's examples. Clients with a
    single example stay whole in the training federation.

    Returns ``(train_federation, eval_dataset)``.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigurationError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")

    root = PrngStream(seed)
    train, eval_features, eval_labels = [], [], []
    for client in federation:
        n = len(client)
        held_out = 0 if n == 1 else min(n - 1, int(round(eval_fraction * n)))
        if held_out == 0:
            train.append(client)
            continue
        order = fork_stream(root, client.client_id).permutation(n)
        eval_idx = np.sort(order[:held_out])
        train_idx = np.sort(order[held_out:])
        train.append(client.take(train_idx))
        eval_features.append(client.features[eval_idx])
        eval_labels.append(client.labels[eval_idx])

    if not eval_labels:
        raise ConfigurationError("Evaluation pool is empty: every client has a single example or eval_fraction is too small")

    eval_dataset = ClientDataset(
        client_id=-1,
        features=np.concatenate(eval_features),
        labels=np.concatenate(eval_labels),
        name='eval',
    )
    return train, eval_dataset
