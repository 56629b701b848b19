import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from fedsim.utils.datagen import (
    ClientDataset,
    FederationSpec,
    federation_digest,
    generate_federation,
    load_csv_federation,
    num_classes_of,
    train_eval_split,
)
from fedsim.utils.errors import ConfigurationError, IngestionError, StructuralError


class GenerateFederationTests(SimpleTestCase):

    def test_deterministic_per_seed(self):
        spec = FederationSpec(num_clients=30, feature_dim=5, seed=4)
        self.assertEqual(federation_digest(generate_federation(spec)), federation_digest(generate_federation(spec)))
        other = FederationSpec(num_clients=30, feature_dim=5, seed=5)
        self.assertNotEqual(federation_digest(generate_federation(spec)), federation_digest(generate_federation(other)))

    def test_shapes(self):
        spec = FederationSpec(num_clients=25, feature_dim=6, num_classes=3, mean_examples_per_client=20)
        federation = generate_federation(spec)
        self.assertEqual(len(federation), 25)
        self.assertEqual([client.client_id for client in federation], list(range(25)))
        for client in federation:
            self.assertGreaterEqual(len(client), 1)
            self.assertEqual(client.features.shape, (len(client), 6))
            self.assertTrue(set(client.labels.tolist()) <= {0, 1, 2})

    def test_sizes_have_a_long_tail(self):
        federation = generate_federation(FederationSpec(num_clients=400, size_lognormal_sigma=1.0, mean_examples_per_client=50))
        sizes = np.array([len(client) for client in federation])
        self.assertGreater(sizes.max(), 4 * np.median(sizes))

    def test_huge_alpha_gives_balanced_clients(self):
        spec = FederationSpec(num_clients=50, label_skew_alpha=1e6, size_lognormal_sigma=0.0, mean_examples_per_client=40)
        for client in generate_federation(spec):
            counts = np.bincount(client.labels, minlength=2)
            self.assertLessEqual(abs(int(counts[0]) - len(client) / 2), 1)

    def test_small_alpha_gives_skewed_clients(self):
        spec = FederationSpec(num_clients=200, label_skew_alpha=0.05, size_lognormal_sigma=0.0, mean_examples_per_client=40)
        majority = [np.bincount(c.labels, minlength=2).max() / len(c) for c in generate_federation(spec)]
        self.assertGreater(float(np.mean(majority)), 0.8)

    def test_invalid_spec(self):
        with self.assertRaises(ConfigurationError):
            FederationSpec(num_classes=5, feature_dim=3)
        with self.assertRaises(ConfigurationError):
            FederationSpec(label_skew_alpha=0.0)
        with self.assertRaises(ConfigurationError):
            FederationSpec(num_clients=0)


class ClientDatasetTests(SimpleTestCase):

    def test_rejects_mismatched_rows(self):
        with self.assertRaises(StructuralError):
            ClientDataset(0, np.zeros((3, 2)), np.zeros(2))

    def test_rejects_empty(self):
        with self.assertRaises(ConfigurationError):
            ClientDataset(0, np.zeros((0, 2)), np.zeros(0))

    def test_examples_and_take(self):
        data = ClientDataset(3, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], [0, 1, 1])
        self.assertEqual([e.label for e in data.examples()], [0, 1, 1])
        subset = data.take([2, 0])
        self.assertEqual(subset.client_id, 3)
        assert_array_equal(subset.labels, [1, 0])


class CsvIngestionTests(SimpleTestCase):

    def _write(self, text):
        directory = tempfile.mkdtemp()
        path = Path(directory) / 'data.csv'
        path.write_text(text, encoding='utf-8')
        return path

    def test_groups_by_client_in_first_appearance_order(self):
        path = self._write('user,x1,x2,label\nbob,1,2,0\nann,3,4,1\nbob,5,6,1\n')
        federation = load_csv_federation(path, ['x1', 'x2'], 'label', 'user')
        self.assertEqual([c.name for c in federation], ['bob', 'ann'])
        self.assertEqual([c.client_id for c in federation], [0, 1])
        assert_array_equal(federation[0].features, [[1.0, 2.0], [5.0, 6.0]])
        assert_array_equal(federation[0].labels, [0, 1])
        self.assertEqual(num_classes_of(federation), 2)

    def test_bad_value_reports_line(self):
        path = self._write('user,x1,label\na,1,0\nb,oops,1\n')
        with self.assertRaises(IngestionError) as ctx:
            load_csv_federation(path, ['x1'], 'label', 'user')
        self.assertEqual(ctx.exception.line, 3)

    def test_negative_label_rejected(self):
        path = self._write('user,x1,label\na,1,-1\n')
        with self.assertRaises(IngestionError) as ctx:
            load_csv_federation(path, ['x1'], 'label', 'user')
        self.assertEqual(ctx.exception.line, 2)

    def test_unknown_column(self):
        path = self._write('user,x1,label\na,1,0\n')
        with self.assertRaises(IngestionError):
            load_csv_federation(path, ['x9'], 'label', 'user')

    def test_missing_file(self):
        with self.assertRaises(IngestionError):
            load_csv_federation('/nonexistent/data.csv', ['x1'], 'label', 'user')


class TrainEvalSplitTests(SimpleTestCase):

    def test_partition_is_exact(self):
        federation = generate_federation(FederationSpec(num_clients=20, feature_dim=3, mean_examples_per_client=15))
        train, eval_dataset = train_eval_split(federation, 0.25, seed=1)
        self.assertEqual(len(train), 20)
        total = sum(len(c) for c in federation)
        self.assertEqual(sum(len(c) for c in train) + len(eval_dataset), total)
        self.assertEqual(eval_dataset.client_id, -1)

    def test_single_example_clients_stay_whole(self):
        federation = [
            ClientDataset(0, [[1.0]], [0]),
            ClientDataset(1, [[1.0], [2.0], [3.0], [4.0]], [0, 1, 0, 1]),
        ]
        train, eval_dataset = train_eval_split(federation, 0.5, seed=0)
        self.assertEqual(len(train[0]), 1)
        self.assertEqual(len(train[1]), 2)
        self.assertEqual(len(eval_dataset), 2)

    def test_empty_eval_pool(self):
        federation = [ClientDataset(0, [[1.0]], [0])]
        with self.assertRaises(ConfigurationError):
            train_eval_split(federation, 0.5, seed=0)

    def test_invalid_fraction(self):
        with self.assertRaises(ConfigurationError):
            train_eval_split([ClientDataset(0, [[1.0], [2.0]], [0, 1])], 1.0, seed=0)
