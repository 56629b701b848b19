import math
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from fedsim.utils.errors import ConfigurationError, ProtocolError
from fedsim.utils.harness import simulate
from fedsim.utils.metrics import TargetOutcome, render_csv, updates_to_target
from fedsim.utils.numkit import DurationDist
from fedsim.utils.runconfig import load_run_config
from fedsim.utils.server import StrategyConfig
from fedsim.utils.simulator import (
    SimConfig,
    compute_staleness,
    run_async,
    run_simulation,
    run_sync,
    staleness_histogram,
)

from .helpers import fedbuff, local_config, replay_staleness, sim_config, tiny_setup


class SimConfigTests(SimpleTestCase):

    def test_selected_per_round_rounds_up(self):
        self.assertEqual(SimConfig(concurrency=10, overselection_factor=1.3).selected_per_round, 13)
        self.assertEqual(SimConfig(concurrency=10, overselection_factor=1.25).selected_per_round, 13)
        self.assertEqual(SimConfig(concurrency=10).selected_per_round, 10)

    def test_rejects_bad_values(self):
        for kwargs in ({'concurrency': 0}, {'budget': -1}, {'tau_max': -1}, {'overselection_factor': 0.9},
                       {'eval_every': 0.0}, {'eval_every_steps': -1}, {'start_stagger': -0.1}):
            with self.subTest(**kwargs):
                with self.assertRaises(ConfigurationError):
                    SimConfig(**kwargs)


class ComputeStalenessTests(SimpleTestCase):

    def test_tau_and_cutoff(self):
        check = compute_staleness(2, 5)
        self.assertEqual((check.tau, check.accepted), (3, True))
        self.assertFalse(compute_staleness(2, 5, tau_max=2).accepted)
        self.assertTrue(compute_staleness(2, 4, tau_max=2).accepted)

    def test_future_pull(self):
        with self.assertRaises(ProtocolError):
            compute_staleness(5, 2)


class AsyncEngineTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.train, cls.eval_dataset, cls.model0 = tiny_setup()

    def run_fedbuff(self, sim_cfg, buffer_size, eval_dataset=None, **strategy):
        return run_async(sim_cfg, fedbuff(buffer_size, **strategy), local_config(), self.train, self.model0,
                         eval_dataset=eval_dataset)

    def test_staleness_matches_replay_from_timestamps(self):
        cases = 0
        for concurrency in (2, 4, 16):
            for kind in ('constant', 'half_normal', 'uniform', 'exponential'):
                for buffer_size in sorted({1, 2, max(1, concurrency // 2)}):
                    if cases == 20:
                        break
                    cfg = sim_config(concurrency=concurrency, budget=120, duration_dist=DurationDist(kind),
                                     seed=cases)
                    log = self.run_fedbuff(cfg, buffer_size)
                    with self.subTest(M=concurrency, dist=kind, K=buffer_size):
                        self.assertEqual([r.tau for r in log.staleness], replay_staleness(log.staleness, buffer_size))
                    cases += 1
        self.assertEqual(cases, 20)

    def test_buffer_equal_to_concurrency_is_never_stale(self):
        log = self.run_fedbuff(sim_config(concurrency=5, budget=100), 5)
        histogram = staleness_histogram(log)
        self.assertEqual(histogram.counts, (100,))
        self.assertEqual(histogram.mode_bin, 0)

    def test_staggered_starts_ramp_up_then_hold(self):
        log = self.run_fedbuff(sim_config(concurrency=4, budget=40, start_stagger=0.25), 2)
        self.assertEqual(log.active_trace[:4], [(0.0, 1), (0.25, 2), (0.5, 3), (0.75, 4)])
        last_start = max(record.start_time for record in log.staleness)
        held = [active for time, active in log.active_trace if 0.75 <= time <= last_start]
        self.assertTrue(held)
        self.assertEqual(set(held), {4})

    def test_active_clients_never_exceed_concurrency(self):
        cfg = sim_config(concurrency=6, budget=200, duration_dist=DurationDist('exponential'), seed=3)
        log = self.run_fedbuff(cfg, 3)
        self.assertTrue(all(0 <= active <= 6 for _, active in log.active_trace))
        self.assertEqual(log.active_trace[-1][1], 0)

    def test_budget_counts_every_update(self):
        cfg = sim_config(concurrency=8, budget=150, duration_dist=DurationDist('half_normal'), seed=1)
        log = self.run_fedbuff(cfg, 3, eval_dataset=self.eval_dataset)
        self.assertEqual(len(log.staleness), 150)
        self.assertEqual(log.client_updates, 150)
        self.assertEqual(log.buffer_insertions, 150)
        self.assertEqual(log.metadata['final_step'], 150 // 3)
        self.assertEqual(log.rows[-1].client_updates, 150)

    def test_zero_budget(self):
        log = self.run_fedbuff(sim_config(concurrency=4, budget=0), 2, eval_dataset=self.eval_dataset)
        self.assertEqual(log.rows, [])
        self.assertEqual(log.staleness, [])
        self.assertIs(log.final_model, self.model0)

    def test_tau_max_drops_and_counts_old_updates(self):
        cfg = sim_config(concurrency=16, budget=200, tau_max=2, duration_dist=DurationDist('exponential'), seed=4)
        log = self.run_fedbuff(cfg, 2)
        rejected = [record for record in log.staleness if not record.accepted]
        self.assertGreater(log.rejected, 0)
        self.assertEqual(log.rejected, len(rejected))
        self.assertTrue(all(record.tau > 2 for record in rejected))
        self.assertTrue(all(tau <= 2 for tau in log.accepted_taus))
        self.assertEqual(log.buffer_insertions + log.rejected, 200)

    def test_same_seed_same_output(self):
        cfg = sim_config(concurrency=8, budget=120, duration_dist=DurationDist('half_normal'), seed=21)
        first = self.run_fedbuff(cfg, 4, eval_dataset=self.eval_dataset)
        second = self.run_fedbuff(cfg, 4, eval_dataset=self.eval_dataset)
        self.assertEqual(render_csv(first), render_csv(second))
        assert_array_equal(first.final_model.flat, second.final_model.flat)

    def test_histogram_conserves_updates(self):
        cfg = sim_config(concurrency=16, budget=300, duration_dist=DurationDist('half_normal'), seed=8)
        log = self.run_fedbuff(cfg, 4)
        for width in (1, 3, 7):
            histogram = staleness_histogram(log, width)
            self.assertEqual(histogram.total, 300)
            self.assertEqual(histogram.bin_width, width)
        with self.assertRaises(ConfigurationError):
            staleness_histogram(log, 0)

    def test_requires_async_strategy(self):
        with self.assertRaises(ConfigurationError):
            run_async(sim_config(concurrency=4), StrategyConfig(kind='fedavg', buffer_size=4), local_config(),
                      self.train, self.model0)

    def test_concurrency_above_federation_size(self):
        with self.assertRaises(ConfigurationError):
            self.run_fedbuff(sim_config(concurrency=len(self.train) + 1), 2)

    def test_divergence_is_flagged(self):
        cfg = sim_config(concurrency=4, budget=200, eval_every_steps=1)
        log = self.run_fedbuff(cfg, 2, eval_dataset=self.eval_dataset, eta_global=1e6)
        self.assertTrue(log.diverged)
        self.assertLess(log.client_updates, 200)
        self.assertEqual(updates_to_target(log, 0.999), TargetOutcome.DIVERGED)


class SyncEngineTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.train, cls.eval_dataset, cls.model0 = tiny_setup()

    def run_fedavg(self, sim_cfg):
        return run_sync(sim_cfg, StrategyConfig(kind='fedavg', buffer_size=sim_cfg.concurrency), local_config(),
                        self.train, self.model0, eval_dataset=self.eval_dataset)

    def test_overselection_counts(self):
        log = self.run_fedavg(sim_config(concurrency=10, overselection_factor=1.3, budget=13))
        self.assertEqual(log.sync_selections, 13)
        self.assertEqual(log.discarded, 3)
        self.assertEqual(log.client_updates, 13)
        self.assertEqual(len(log.staleness), 10)
        self.assertTrue(all(record.tau == 0 for record in log.staleness))

    def test_overselection_shortens_every_round(self):
        dist = DurationDist('half_normal')
        plain = self.run_fedavg(sim_config(concurrency=10, budget=300, duration_dist=dist, seed=2))
        over = self.run_fedavg(sim_config(concurrency=10, overselection_factor=1.3, budget=390,
                                          duration_dist=dist, seed=2))
        self.assertEqual(len(plain.flushes), 30)
        self.assertEqual(len(over.flushes), 30)

        def round_lengths(log):
            ends = [flush.sim_time for flush in log.flushes]
            return [end - start for start, end in zip([0.0] + ends[:-1], ends)]

        # the kept ten are the fastest of thirteen draws whose first ten are the plain round
        for index, (fast, slow) in enumerate(zip(round_lengths(over), round_lengths(plain))):
            with self.subTest(round=index):
                self.assertLessEqual(fast, slow + 1e-12)
        self.assertLess(over.flushes[-1].sim_time, plain.flushes[-1].sim_time)

    def test_round_lasts_as_long_as_its_slowest_kept_client(self):
        log = self.run_fedavg(sim_config(concurrency=5, budget=20))
        self.assertEqual([flush.sim_time for flush in log.flushes], [1.0, 2.0, 3.0, 4.0])

    def test_requires_sync_strategy(self):
        with self.assertRaises(ConfigurationError):
            run_sync(sim_config(concurrency=4), fedbuff(4), local_config(), self.train, self.model0)

    def test_selection_above_federation_size(self):
        with self.assertRaises(ConfigurationError):
            self.run_fedavg(sim_config(concurrency=len(self.train), overselection_factor=2.0))


class EngineEquivalenceTests(SimpleTestCase):

    def test_fedbuff_with_full_buffer_matches_fedavg(self):
        train, _, model0 = tiny_setup(seed=5)
        cfg = sim_config(concurrency=8, budget=400, seed=9)
        trajectories = {}
        for strategy in (fedbuff(8), StrategyConfig(kind='fedavg', buffer_size=8)):
            seen = []
            run_simulation(cfg, strategy, local_config(), train, model0,
                           observer=lambda step, model: seen.append((step, np.array(model.flat))))
            trajectories[strategy.kind] = seen

        self.assertEqual(len(trajectories['fedbuff']), 50)
        self.assertEqual(len(trajectories['fedavg']), 50)
        for (step_a, a), (step_b, b) in zip(trajectories['fedbuff'], trajectories['fedavg']):
            self.assertEqual(step_a, step_b)
            self.assertLessEqual(float(np.max(np.abs(a - b))), 1e-12)

    def test_rows_stay_time_ordered(self):
        train, eval_dataset, model0 = tiny_setup(seed=6)
        cfg = sim_config(concurrency=6, budget=90, duration_dist=DurationDist('exponential'), eval_every=0.5)
        log = run_simulation(cfg, fedbuff(3), local_config(), train, model0, eval_dataset=eval_dataset)
        times = [row.sim_time for row in log.rows]
        self.assertEqual(times, sorted(times))
        self.assertEqual(len(set(times)), len(times))
        self.assertTrue(all(math.isfinite(row.accuracy) for row in log.rows))


class StalenessReferenceTests(SimpleTestCase):
    """FedBuff at M=1000, K=10 with half-normal durations, run from the committed reference config."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cfg = load_run_config(Path(__file__).resolve().parent / 'golden' / 'staleness_reference.cfg')
        cls.log = simulate(cfg, build='test-build')
        cls.taus = np.asarray(cls.log.accepted_taus, dtype=np.float64)

    def test_every_update_is_binned(self):
        self.assertFalse(self.log.diverged)
        self.assertEqual(staleness_histogram(self.log, 50).total, 20000)

    def test_single_peak(self):
        counts = np.asarray(staleness_histogram(self.log, 50).counts)
        # the sparse tail past the 99th percentile is left out
        body = counts[:int(np.quantile(self.taus, 0.99)) // 50 + 1]
        peak = int(np.argmax(body))
        self.assertTrue(np.all(np.diff(body[:peak + 1]) >= 0), body)
        self.assertTrue(np.all(np.diff(body[peak:]) <= 0), body)

    def test_long_right_tail(self):
        centred = self.taus - self.taus.mean()
        self.assertGreater(np.mean(centred ** 3), 0.0)
        self.assertGreater(self.taus.mean(), np.median(self.taus))
