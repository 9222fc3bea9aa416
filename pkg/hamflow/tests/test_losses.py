import numpy as np
from django.test import SimpleTestCase, tag

from hamflow.diffnet import ParameterSet, gradient_check, jitter_parameters
from hamflow.exceptions import EmptyBatch, InvalidParameter, MissingTargets, TrainingDiverged
from hamflow.flowmap import AnalyticFlowMap, FixedStepFlowMap, IterateFlowMap, T0CenteredFlowMap, TaylorFlowMap
from hamflow.hamiltonians import make_system
from hamflow.integrators import VelocityVerlet
from hamflow.losses import (
    CollocationBatch, CollocationSpec, DataObjective, NormSpec, OptimizerConfig, ResidualObjective, build_dataset,
    data_loss, exact_residual, exact_residual_loss, holdout_split, joint_loss, progressive_horizon, residual_loss,
    sample_collocation, scheme_residual, shift_coverage, train,
)


class CollocationTests(SimpleTestCase):
    def test_grid_batch_layout(self):
        spec = CollocationSpec(dim=2, T=10.0, N=41, batch_size=3)
        batch = sample_collocation(spec, np.random.default_rng(0), h=0.5)
        self.assertEqual(len(batch), 3 * 41)
        self.assertEqual(batch.n_points, 3)
        np.testing.assert_allclose(batch.t[:41], np.linspace(0.0, 10.0, 41))
        np.testing.assert_allclose(batch.u[0], batch.u[40])

    def test_grid_shift(self):
        spec = CollocationSpec(dim=2, N=5, T=1.0, shift='uniform', batch_size=1)
        batch = sample_collocation(spec, np.random.default_rng(0), h=0.1)
        tau = batch.t[0]
        self.assertTrue(0.0 <= tau < 0.1)
        np.testing.assert_allclose(batch.t, np.linspace(0.0, 1.0, 5) + tau)
        with self.assertRaises(InvalidParameter):
            sample_collocation(spec, np.random.default_rng(0))
        with self.assertRaises(InvalidParameter):
            sample_collocation(CollocationSpec(dim=2, shift=0.3), np.random.default_rng(0), h=0.1)

    def test_random_and_fixed_times(self):
        spec = CollocationSpec(dim=2, time_mode='random', T=5.0, times_per_point=4, batch_size=6)
        batch = sample_collocation(spec, np.random.default_rng(1))
        self.assertEqual(len(batch), 24)
        self.assertTrue(np.all((batch.t >= 0.0) & (batch.t <= 5.0)))
        fixed = sample_collocation(CollocationSpec(dim=2, time_mode='fixed', T0=1.5, batch_size=2),
                                   np.random.default_rng(1))
        np.testing.assert_allclose(fixed.t, [1.5, 1.5])

    def test_shell_radii(self):
        spec = CollocationSpec(dim=4, phase_mode='shell', radii=(1.1, 1.7), shell_index=(0, 1),
                               low=(0.0, 0.0, 0.0, 0.0), high=(0.0, 0.0, 6.0, 6.0), batch_size=200,
                               time_mode='random', eps_range=(0.05, 0.4))
        batch = sample_collocation(spec, np.random.default_rng(2))
        radius = np.linalg.norm(batch.u[:, :2], axis=-1)
        self.assertTrue(np.all((radius >= 1.1) & (radius <= 1.7)))
        self.assertTrue(np.all((batch.u[:, 2:] >= 0.0) & (batch.u[:, 2:] <= 6.0)))
        self.assertTrue(np.all((batch.eps >= 0.05) & (batch.eps <= 0.4)))

    def test_spec_validation(self):
        with self.assertRaises(InvalidParameter):
            CollocationSpec(dim=2, phase_mode='shell')
        with self.assertRaises(InvalidParameter):
            CollocationSpec(dim=2, time_mode='fixed')
        with self.assertRaises(EmptyBatch):
            CollocationSpec(dim=2, phase_mode='samples', samples=np.empty((0, 2)))
        with self.assertRaises(EmptyBatch):
            CollocationSpec(dim=2, batch_size=0)

    def test_shift_coverage(self):
        spec = CollocationSpec(dim=2, T=10.0, N=41)
        self.assertEqual(shift_coverage(spec, 0.5), (True, 0.0))
        covered, gap = shift_coverage(spec, 0.1)
        self.assertFalse(covered)
        self.assertAlmostEqual(gap, 0.15)

    def test_progressive_horizon(self):
        schedule = {'T_start': 1.0, 'T': 5.0, 'ramp_iterations': 100}
        self.assertAlmostEqual(progressive_horizon(50, schedule), 3.0)
        self.assertAlmostEqual(progressive_horizon(500, schedule), 5.0)
        self.assertEqual(progressive_horizon(50, None, 7.0), 7.0)

    def test_holdout_split(self):
        train_idx, test_idx = holdout_split(10, 0.1, np.random.default_rng(0))
        self.assertEqual((len(train_idx), len(test_idx)), (9, 1))
        self.assertFalse(set(train_idx) & set(test_idx))
        again = holdout_split(10, 0.1, np.random.default_rng(0))
        np.testing.assert_array_equal(again[1], test_idx)


class NormTests(SimpleTestCase):
    def test_unit_weight_energy_norm_equals_plain(self):
        r = np.random.default_rng(0).standard_normal((5, 4))
        np.testing.assert_allclose(NormSpec.for_fput(1, 1.0).squared(r).data, NormSpec().squared(r).data)

    def test_fast_block_weighting(self):
        r = np.zeros((1, 4))
        r[0, 3] = 1.0
        self.assertAlmostEqual(float(NormSpec.for_fput(1, 50.0).squared(r).data[0]), 2500.0)

    def test_block_size_mismatch(self):
        with self.assertRaises(InvalidParameter):
            NormSpec.for_fput(3, 50.0).squared(np.zeros((1, 4)))
        with self.assertRaises(InvalidParameter):
            NormSpec('energy')


class ResidualTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')
        self.scheme = VelocityVerlet(self.system, 0.5)

    def test_exact_flow_residual_loss(self):
        batch = CollocationBatch(np.array([[0.0, 1.0]]), np.array([0.0]), None, 1)
        expected = np.array([-np.sin(0.5) + 0.25 * np.cos(0.5) + 0.25, np.cos(0.5) - 0.875])
        loss = residual_loss(AnalyticFlowMap.rotation(self.system), self.scheme, self.system, None, batch=batch)
        self.assertAlmostEqual(float(loss.data), 0.25 * float(expected @ expected), places=14)
        np.testing.assert_allclose(
            scheme_residual(AnalyticFlowMap.rotation(self.system), self.scheme, self.system, [0.0, 1.0], 0.0),
            expected, atol=1e-15)

    def test_scheme_iterates_have_zero_residual(self):
        spec = CollocationSpec(dim=2, T=10.0, N=21, phase_mode='shell', radii=(0.99, 1.01), batch_size=4)
        loss = residual_loss(IterateFlowMap(self.scheme), self.scheme, self.system, spec, rng=np.random.default_rng(0))
        self.assertLess(float(loss.data), 1e-26)

    def test_exact_residual_of_the_exact_flow(self):
        rotation = AnalyticFlowMap.rotation(self.system)
        self.assertLess(np.max(np.abs(exact_residual(rotation, self.system, [0.3, 0.8], 1.2))), 1e-8)
        spec = CollocationSpec(dim=2, time_mode='random', T=2.0, batch_size=5)
        self.assertLess(float(exact_residual_loss(rotation, self.system, spec, rng=np.random.default_rng(0)).data),
                        1e-15)

    def test_empty_batch(self):
        batch = CollocationBatch(np.empty((0, 2)), np.empty(0), None, 0)
        with self.assertRaises(EmptyBatch):
            residual_loss(AnalyticFlowMap.rotation(self.system), self.scheme, self.system, None, batch=batch)

    def test_residual_loss_gradient(self):
        system = make_system('npco', {'eps': 0.05})
        scheme = VelocityVerlet(system, 0.05)
        spec = CollocationSpec(dim=4, time_mode='random', T=1.0, times_per_point=2, low=-1.0, high=1.0,
                               batch_size=4)
        norm = NormSpec('energy', (3, 1), 2.0)
        for seed in (1, 2, 3):
            with self.subTest(seed=seed):
                flow_map = TaylorFlowMap(system, 2, hidden_widths=(6, 6), window=1.0, seed=seed)
                jitter_parameters(flow_map.params, np.random.default_rng(seed))
                batch = sample_collocation(spec, np.random.default_rng(seed + 10))

                def function():
                    return residual_loss(flow_map, scheme, system, spec, norm, batch=batch)

                self.assertLess(gradient_check(function, flow_map.params, n_probes=40,
                                               rng=np.random.default_rng(seed)), 1e-5)

    def test_exact_residual_loss_gradient(self):
        spec = CollocationSpec(dim=2, time_mode='random', T=2.0, times_per_point=2, batch_size=4)
        for order in (1, 2):
            for seed in (1, 2, 3):
                with self.subTest(order=order, seed=seed):
                    flow_map = TaylorFlowMap(self.system, order, hidden_widths=(6, 6), window=2.0, seed=seed)
                    jitter_parameters(flow_map.params, np.random.default_rng(seed))
                    batch = sample_collocation(spec, np.random.default_rng(seed + 10))

                    def function():
                        return exact_residual_loss(flow_map, self.system, spec, batch=batch)

                    self.assertLess(gradient_check(function, flow_map.params, n_probes=40,
                                                   rng=np.random.default_rng(seed)), 1e-5)


class DataLossTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')
        inputs = np.random.default_rng(0).uniform(-1.0, 1.0, size=(6, 2))
        self.dataset = build_dataset(self.system, inputs, 0.5, S=3)

    def test_targets_follow_the_reference_flow(self):
        self.assertEqual(self.dataset.targets.shape, (6, 3, 2))
        rotation = AnalyticFlowMap.rotation(self.system)
        np.testing.assert_allclose(self.dataset.targets[:, 2], rotation.evaluate(self.dataset.inputs, 1.5),
                                   atol=1e-9)

    def test_exact_map_has_zero_loss(self):
        loss = data_loss(AnalyticFlowMap.rotation(self.system, T0=0.5), self.dataset, S=3)
        self.assertLess(float(loss.data), 1e-16)

    def test_missing_targets(self):
        with self.assertRaises(MissingTargets):
            data_loss(AnalyticFlowMap.rotation(self.system, T0=0.5), self.dataset, S=4)

    def test_composed_gradient(self):
        for seed in (1, 2, 3):
            with self.subTest(seed=seed):
                flow_map = FixedStepFlowMap(self.system, 0.5, (6, 6), seed=seed)
                jitter_parameters(flow_map.params, np.random.default_rng(seed))

                def function():
                    return data_loss(flow_map, self.dataset, S=2)

                self.assertLess(gradient_check(function, flow_map.params, n_probes=40,
                                               rng=np.random.default_rng(seed)), 1e-5)

    def test_joint_loss_gradient(self):
        scheme = VelocityVerlet(self.system, 0.5)
        spec = CollocationSpec(dim=2, T=2.0, N=5, batch_size=3)
        for order in (1, 2):
            for seed in (1, 2, 3):
                with self.subTest(order=order, seed=seed):
                    centered = T0CenteredFlowMap(self.system, 0.5, (6, 6), (6, 6), order=order, seed=seed,
                                                 window=2.0)
                    jitter_parameters(centered.params, np.random.default_rng(seed))
                    batch = sample_collocation(spec, np.random.default_rng(seed + 10), h=scheme.h)

                    def function():
                        return joint_loss(centered.fixed, centered.variable, scheme, self.system, self.dataset,
                                          spec, S=2, batch=batch)

                    self.assertLess(gradient_check(function, centered.params, n_probes=40,
                                                   rng=np.random.default_rng(seed)), 1e-5)

    def test_gate_coordinates_are_checked(self):
        flow_map = FixedStepFlowMap(self.system, 0.5, (6, 6), seed=3)
        jitter_parameters(flow_map.params, np.random.default_rng(3))
        gates = [name for name in flow_map.params if name.endswith('.gate')]
        self.assertEqual(gates, ['fixed.block1.gate'])

        def function():
            return data_loss(flow_map, self.dataset, S=2)

        self.assertLess(gradient_check(function, flow_map.params, names=gates, rng=np.random.default_rng(2)), 1e-5)

    def test_joint_loss_of_exact_pieces(self):
        scheme = VelocityVerlet(self.system, 0.5)
        spec = CollocationSpec(dim=2, T=2.0, N=5, batch_size=3)
        loss = joint_loss(AnalyticFlowMap.rotation(self.system, T0=0.5), IterateFlowMap(scheme), scheme,
                          self.system, self.dataset, spec, S=3, rng=np.random.default_rng(0))
        self.assertLess(float(loss.data), 1e-16)

    def test_objective_holds_out_a_test_set(self):
        flow_map = FixedStepFlowMap(self.system, 0.5, (4,))
        objective = DataObjective(flow_map, self.dataset, S=2, test_fraction=0.2)
        self.assertEqual(len(objective.train_set) + len(objective.test_set), 6)
        self.assertGreater(objective.test(), 0.0)


class TrainTests(SimpleTestCase):
    def test_residual_training_reduces_the_loss(self):
        system = make_system('harmonic')
        scheme = VelocityVerlet(system, 0.5)
        flow_map = TaylorFlowMap(system, 1, hidden_widths=(8, 8), window=10.0)
        spec = CollocationSpec(dim=2, T=10.0, N=41, phase_mode='shell', radii=(0.99, 1.01), batch_size=10)
        objective = ResidualObjective(flow_map, scheme, system, spec, seed=0)
        calls = []
        record = train(objective, flow_map.params, OptimizerConfig(lr=1e-2), iterations=200, eval_every=50,
                       checkpoint=calls.append)
        self.assertEqual(record.iterations, 200)
        self.assertEqual(calls, [50, 100, 150, 200])
        self.assertLess(record.train_loss[-1], record.train_loss[0])
        self.assertEqual(len(record.rows()), 4)
        self.assertIsNotNone(record.rows()[-1]['test_loss'])

    def test_same_seed_same_losses(self):
        system = make_system('harmonic')
        scheme = VelocityVerlet(system, 0.5)
        spec = CollocationSpec(dim=2, T=2.0, N=5, batch_size=4, resample=True)
        losses = []
        for _ in range(2):
            flow_map = TaylorFlowMap(system, 1, hidden_widths=(4,), window=2.0, seed=3)
            objective = ResidualObjective(flow_map, scheme, system, spec, seed=3)
            losses.append(train(objective, flow_map.params, iterations=5, seed=3, record_timing=False).train_loss)
        self.assertEqual(losses[0], losses[1])

    def test_quadratic_bowl_converges(self):
        params = ParameterSet()
        params.register('w', np.array([3.0, -2.0, 0.5]))
        centre = np.array([1.0, 0.0, -1.0])

        def objective(iteration, rng):
            diff = params['w'] - centre
            return (diff * diff).sum()

        record = train(objective, params, OptimizerConfig(lr=0.05), iterations=5000, eval_every=1000,
                       record_timing=False)
        self.assertLess(record.final_loss, 1e-10)
        self.assertEqual([row['iteration'] for row in record.rows()], [1000, 2000, 3000, 4000, 5000])

    def test_non_finite_loss_stops_training(self):
        params = ParameterSet()
        params.register('x', np.ones(2))

        def objective(iteration, rng):
            return (params['x'] * np.nan).sum()

        with self.assertRaises(TrainingDiverged):
            train(objective, params, iterations=3)


@tag('acceptance')
class HarmonicCollocationAcceptanceTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')
        self.scheme = VelocityVerlet(self.system, 0.5)

    def objective(self, N, exact=False):
        flow_map = TaylorFlowMap(self.system, 1, hidden_widths=(32, 32), window=10.0, seed=0)
        spec = CollocationSpec(dim=2, T=10.0, N=N, phase_mode='shell', radii=(0.999, 1.001), batch_size=10)
        return flow_map, ResidualObjective(flow_map, self.scheme, self.system, spec, seed=0, exact=exact,
                                           test_fraction=0)

    def test_sparse_grid_leaves_gaps(self):
        # t = k + 1/2 links grid points of N=41 that N=11 never pairs
        times = np.arange(9) + 0.5
        worst = {}
        for N in (11, 41):
            flow_map, objective = self.objective(N)
            train(objective, flow_map.params, OptimizerConfig(lr=2e-3, lr_decay=0.99985), iterations=20000,
                  eval_every=5000, record_timing=False)
            points = objective.train_batch.u[::N]
            worst[N] = max(np.max(np.linalg.norm(scheme_residual(flow_map, self.scheme, self.system, points, t),
                                                 axis=-1)) for t in times)
        self.assertGreaterEqual(worst[11], 10 * worst[41])

    def test_exact_residual_step_costs_more(self):
        walls = {}
        for exact in (False, True):
            runs = []
            for _ in range(3):
                flow_map, objective = self.objective(41, exact=exact)
                runs.append(train(objective, flow_map.params, iterations=50, eval_every=50).wall_ms)
            walls[exact] = min(runs)
        self.assertGreaterEqual(walls[True], 1.5 * walls[False])
