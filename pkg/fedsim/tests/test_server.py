import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from fedsim.utils.errors import ConfigurationError, ProtocolError, StructuralError
from fedsim.utils.learners import ModelParams
from fedsim.utils.numkit import PrngStream
from fedsim.utils.server import (
    ServerState,
    StrategyConfig,
    buffer_add,
    fedasync_apply,
    maybe_flush,
    staleness_weight,
    sync_aggregate,
)

from .helpers import fedbuff, make_update


def fresh_state(dim=2):
    return ServerState(model=ModelParams(None, np.zeros(dim)))


class StalenessWeightTests(SimpleTestCase):

    def test_values(self):
        self.assertEqual(staleness_weight(0, 0.5), 1.0)
        self.assertEqual(staleness_weight(3, 0.5), 0.5)
        self.assertEqual(staleness_weight(7, 0.0), 1.0)

    def test_monotone_in_tau(self):
        weights = [staleness_weight(tau, 0.5) for tau in range(20)]
        self.assertEqual(weights, sorted(weights, reverse=True))

    def test_negative_staleness(self):
        with self.assertRaises(ProtocolError):
            staleness_weight(-1, 0.5)


class StrategyConfigTests(SimpleTestCase):

    def test_fedasync_forces_single_slot_buffer(self):
        self.assertEqual(StrategyConfig(kind='fedasync', buffer_size=10).buffer_size, 1)

    def test_momentum_only_for_fedavgm(self):
        with self.assertRaises(ConfigurationError) as ctx:
            StrategyConfig(kind='fedbuff', momentum=0.9)
        self.assertIn('momentum', ctx.exception.errors)
        self.assertEqual(StrategyConfig(kind='fedavgm', buffer_size=4, momentum=0.9).momentum, 0.9)

    def test_rejects_bad_values(self):
        for kwargs in ({'kind': 'scaffold'}, {'buffer_size': 0}, {'eta_global': 0.0},
                       {'eta_global': float('inf')}, {'staleness_alpha': -0.5}, {'aggregate_mode': 'max'}):
            with self.subTest(**kwargs):
                with self.assertRaises(ConfigurationError):
                    StrategyConfig(**kwargs)


class BufferTests(SimpleTestCase):

    def test_flush_applies_weighted_sum(self):
        state = fresh_state()
        state.step = 3
        cfg = fedbuff(2, staleness_alpha=0.5)
        buffer_add(state, make_update([1.0, 0.0], client_id=1, pull_version=3), cfg)
        state, flushed = maybe_flush(state, cfg)
        self.assertFalse(flushed)
        self.assertEqual(state.fill_count, 1)
        buffer_add(state, make_update([0.0, 2.0], client_id=2, pull_version=0), cfg)
        state, flushed = maybe_flush(state, cfg)
        self.assertTrue(flushed)
        assert_allclose(state.model.flat, [-1.0, -1.0])
        self.assertEqual(state.step, 4)
        self.assertEqual(state.fill_count, 0)
        self.assertEqual(state.total_client_updates, 2)

    def test_mean_mode_divides_by_buffer_size(self):
        state = fresh_state()
        cfg = fedbuff(2, aggregate_mode='mean', eta_global=2.0)
        buffer_add(state, make_update([1.0, 1.0], client_id=1), cfg)
        buffer_add(state, make_update([3.0, 1.0], client_id=2), cfg)
        state, _ = maybe_flush(state, cfg)
        assert_allclose(state.model.flat, [-4.0, -2.0])

    def test_example_weighting(self):
        state = fresh_state(1)
        cfg = fedbuff(1)
        buffer_add(state, make_update([0.5], num_examples=6), cfg, weighting='example_weight')
        state, _ = maybe_flush(state, cfg)
        assert_allclose(state.model.flat, [-3.0])

    def test_future_pull_is_rejected(self):
        state = fresh_state()
        with self.assertRaises(ProtocolError):
            buffer_add(state, make_update([1.0, 1.0], pull_version=1), fedbuff(2))

    def test_dimension_mismatch(self):
        with self.assertRaises(StructuralError):
            buffer_add(fresh_state(2), make_update([1.0, 1.0, 1.0]), fedbuff(2))

    def test_sync_strategy_cannot_buffer(self):
        with self.assertRaises(ConfigurationError):
            buffer_add(fresh_state(), make_update([1.0, 1.0]), StrategyConfig(kind='fedavg', buffer_size=2))

    def test_insertion_order_does_not_change_the_step(self):
        rng = PrngStream(5)
        updates = [make_update(rng.generator.standard_normal(4), client_id=i, pull_version=i % 3) for i in range(8)]
        results = []
        for order in (range(8), reversed(range(8)), [3, 1, 7, 0, 5, 2, 6, 4]):
            state = fresh_state(4)
            state.step = 2
            cfg = fedbuff(8)
            for i in order:
                buffer_add(state, updates[i], cfg)
            state, _ = maybe_flush(state, cfg)
            results.append(np.array(state.model.flat))
        assert_array_equal(results[0], results[1])
        assert_array_equal(results[0], results[2])

    def test_random_event_sequence_matches_bookkeeping(self):
        rng = PrngStream(11)
        cfg = fedbuff(5, staleness_alpha=0.5, eta_global=0.3)
        state = fresh_state(3)
        expected = np.zeros(3)
        pending = []
        for n in range(1, 10001):
            pull = rng.integers(state.step + 1)
            delta = rng.generator.standard_normal(3)
            client_id = rng.integers(50)
            buffer_add(state, make_update(delta, client_id=client_id, pull_version=pull), cfg)
            pending.append((client_id, n, staleness_weight(state.step - pull, 0.5) * delta))
            state, flushed = maybe_flush(state, cfg)
            if flushed:
                total = np.zeros(3)
                for _, _, contribution in sorted(pending, key=lambda entry: entry[:2]):
                    total = total + contribution
                expected = expected - 0.3 * total
                pending = []
            self.assertEqual(state.step, n // 5)
            self.assertEqual(state.fill_count, n % 5)
        self.assertEqual(state.total_client_updates, 10000)
        assert_allclose(state.model.flat, expected, rtol=0, atol=1e-9)


class FedAsyncTests(SimpleTestCase):

    def test_every_update_is_a_step(self):
        cfg = StrategyConfig(kind='fedasync', staleness_alpha=1.0)
        state = fresh_state(1)
        fedasync_apply(state, make_update([1.0]), cfg)
        fedasync_apply(state, make_update([1.0], pull_version=0), cfg)
        # second update is one step stale: weight 1/2
        assert_allclose(state.model.flat, [-1.5])
        self.assertEqual(state.step, 2)

    def test_requires_fedasync(self):
        with self.assertRaises(ConfigurationError):
            fedasync_apply(fresh_state(1), make_update([1.0]), fedbuff(1))


class SyncAggregateTests(SimpleTestCase):

    def test_heavy_ball_momentum(self):
        cfg = StrategyConfig(kind='fedavgm', buffer_size=1, momentum=0.5)
        state = fresh_state(1)
        for _ in range(2):
            sync_aggregate(state, [make_update([1.0], pull_version=state.step)], cfg)
        assert_allclose(state.model.flat, [-2.5])
        assert_allclose(state.momentum, [1.5])

    def test_fedbuff_reduces_to_fedavg(self):
        rng = PrngStream(3)
        updates = [make_update(rng.generator.standard_normal(5), client_id=i) for i in range(6)]

        buffered = fresh_state(5)
        cfg = fedbuff(6, eta_global=0.7)
        for update in reversed(updates):
            buffer_add(buffered, update, cfg)
        buffered, _ = maybe_flush(buffered, cfg)

        synced = fresh_state(5)
        sync_aggregate(synced, updates, StrategyConfig(kind='fedavg', buffer_size=6, eta_global=0.7))
        assert_array_equal(buffered.model.flat, synced.model.flat)

    def test_empty_round(self):
        with self.assertRaises(ProtocolError):
            sync_aggregate(fresh_state(), [], StrategyConfig(kind='fedavg', buffer_size=2))

    def test_mixed_pull_versions(self):
        state = fresh_state(1)
        state.step = 2
        updates = [make_update([1.0], client_id=0, pull_version=2), make_update([1.0], client_id=1, pull_version=1)]
        with self.assertRaises(ProtocolError):
            sync_aggregate(state, updates, StrategyConfig(kind='fedavg', buffer_size=2))
