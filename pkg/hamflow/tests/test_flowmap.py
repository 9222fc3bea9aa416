import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from hamflow.diffnet import jitter_parameters
from hamflow.exceptions import InvalidParameter, InvalidTime
from hamflow.flowmap import (
    AnalyticFlowMap, FixedStepFlowMap, IterateFlowMap, T0CenteredFlowMap, TaylorFlowMap, eval_fixed, eval_variable,
    load_flowmap, rollout_compose, save_flowmap, t0_centered_eval, taylor_consistency,
)
from hamflow.hamiltonians import make_system
from hamflow.integrators import VelocityVerlet


def jittered(flow_map, seed=0, scale=0.1):
    jitter_parameters(flow_map.params, np.random.default_rng(seed), scale)
    return flow_map


class TaylorFlowMapTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('npco', {'eps': 0.05})
        self.states = 0.5 * np.random.default_rng(1).standard_normal((6, 4))

    def test_identity_at_zero_time(self):
        for order in (0, 1, 2):
            flow_map = jittered(TaylorFlowMap(self.system, order, hidden_widths=(8, 8), seed=order))
            np.testing.assert_array_equal(flow_map.evaluate(self.states, 0.0), self.states)

    def test_time_derivatives_at_zero(self):
        flow_map = jittered(TaylorFlowMap(self.system, 2, hidden_widths=(8, 8), window=1.0))
        report = taylor_consistency(flow_map, self.system, self.states)
        self.assertLess(report['first'], 1e-5)
        self.assertLess(report['second'], 1e-2)

    def test_order_zero_has_no_taylor_terms(self):
        flow_map = TaylorFlowMap(self.system, 0, hidden_widths=(8, 8))
        self.assertEqual(taylor_consistency(flow_map, self.system, self.states), {'first': None, 'second': None})

    def test_slow_fast_orders(self):
        system = make_system('fput', {'omega': 5, 'm': 1})
        flow_map = jittered(TaylorFlowMap(system, orders=(2, 0), hidden_widths=(8, 8)))
        self.assertIn('taylor.slow.log_rate3', flow_map.params)
        self.assertIn('taylor.fast.log_rate1', flow_map.params)
        self.assertNotIn('taylor.fast.log_rate2', flow_map.params)
        states = 0.2 * np.random.default_rng(2).standard_normal((4, 4))
        report = taylor_consistency(flow_map, system, states)
        self.assertLess(report['first'], 1e-5)

    def test_orders_need_a_partition(self):
        with self.assertRaises(InvalidParameter):
            TaylorFlowMap(self.system, orders=(2, 0))

    def test_batch_matches_single_evaluation(self):
        flow_map = jittered(TaylorFlowMap(self.system, 2, hidden_widths=(8, 8)))
        times = np.linspace(0.1, 0.6, len(self.states))
        batch = flow_map.evaluate(self.states, times)
        for k, (u, t) in enumerate(zip(self.states, times)):
            np.testing.assert_allclose(flow_map.evaluate(u, t), batch[k], atol=1e-12)


class ConditionedFlowMapTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('alpha')
        self.flow_map = jittered(TaylorFlowMap(self.system, 2, hidden_widths=(8, 8), speed_preserving=True,
                                               window=5.0, eps_range=(0.05, 0.4)))
        self.states = np.array([[1.0, 1.0, 0.5, 0.5], [-0.3, 1.2, 2.0, 4.0]])

    def test_speed_preserving_output(self):
        out = eval_variable(self.flow_map, self.system, self.states, 0.7, eps=0.2)
        np.testing.assert_allclose(np.linalg.norm(out[:, :2], axis=-1),
                                   np.linalg.norm(self.states[:, :2], axis=-1), rtol=1e-12)

    def test_eps_is_required(self):
        with self.assertRaises(InvalidParameter):
            eval_variable(self.flow_map, self.system, self.states, 0.7)
        with self.assertRaises(InvalidParameter):
            eval_variable(TaylorFlowMap(make_system('harmonic'), 1, hidden_widths=(4,)),
                          make_system('harmonic'), [0.0, 1.0], 0.5, eps=0.1)

    def test_negative_time(self):
        with self.assertRaises(InvalidTime):
            eval_variable(self.flow_map, self.system, self.states, -0.1, eps=0.2)

    def test_input_width_includes_eps(self):
        self.assertEqual(self.flow_map.config.input_width, 2 * 4 + 2)


class FixedAndCenteredMapTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')

    def test_fixed_map_has_no_identity_term(self):
        flow_map = FixedStepFlowMap(self.system, 1.0, (8, 8))
        np.testing.assert_allclose(eval_fixed(flow_map, self.system, [0.0, 1.0]), [0.0, 0.0])

    def test_fixed_map_needs_positive_step(self):
        with self.assertRaises(InvalidParameter):
            FixedStepFlowMap(self.system, 0.0)

    def test_centered_map_starts_at_the_fixed_map(self):
        flow_map = jittered(T0CenteredFlowMap(self.system, 1.0, (8, 8), (8, 8), order=2))
        u = np.array([0.3, 0.4])
        fixed = flow_map.fixed.evaluate(u)
        np.testing.assert_allclose(flow_map.evaluate(u, 1.0), fixed)
        np.testing.assert_allclose(t0_centered_eval(flow_map.fixed, flow_map.variable, self.system, u, 1.5),
                                   flow_map.evaluate(u, 1.5))
        with self.assertRaises(InvalidTime):
            flow_map.evaluate(u, 0.5)
        with self.assertRaises(InvalidTime):
            t0_centered_eval(flow_map.fixed, flow_map.variable, self.system, u, 0.5)

    def test_shared_parameters(self):
        flow_map = T0CenteredFlowMap(self.system, 1.0, (4,), (4,), order=1)
        names = list(flow_map.params)
        self.assertTrue(any(n.startswith('fixed.') for n in names))
        self.assertTrue(any(n.startswith('taylor.') for n in names))


class RolloutTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')

    def test_rotation_returns_after_four_quarter_turns(self):
        states = rollout_compose(AnalyticFlowMap.rotation(self.system), [0.0, 1.0], np.pi / 2, 4)
        self.assertEqual(states.shape, (4, 2))
        np.testing.assert_allclose(states[0], [-1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(states[-1], [0.0, 1.0], atol=1e-14)

    def test_fixed_map_only_advances_by_its_step(self):
        flow_map = AnalyticFlowMap.rotation(self.system, T0=0.5)
        self.assertEqual(rollout_compose(flow_map, [0.0, 1.0], 0.5, 2).shape, (2, 2))
        with self.assertRaises(InvalidParameter):
            rollout_compose(flow_map, [0.0, 1.0], 0.25, 2)

    def test_zero_steps(self):
        self.assertEqual(rollout_compose(AnalyticFlowMap.identity(self.system), [0.0, 1.0], 1.0, 0).shape, (0, 2))

    def test_iterates_follow_the_scheme(self):
        scheme = VelocityVerlet(self.system, 0.5)
        flow_map = IterateFlowMap(scheme)
        np.testing.assert_allclose(flow_map.evaluate([0.0, 1.0], 0.5), [-0.46875, 0.875])
        two = scheme.step(scheme.step(np.array([0.0, 1.0]))[0])[0]
        np.testing.assert_allclose(flow_map.evaluate([0.0, 1.0], 1.0), two)
        np.testing.assert_allclose(flow_map.evaluate([0.0, 1.0], 0.25), [-0.234375, 0.9375])


class CheckpointTests(SimpleTestCase):
    def test_save_and_load(self):
        system = make_system('fput', {'omega': 5, 'm': 1})
        flow_map = jittered(TaylorFlowMap(system, orders=(2, 0), hidden_widths=(8, 8), window=0.125))
        states = 0.1 * np.random.default_rng(3).standard_normal((3, 4))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_flowmap(flow_map, Path(tmp) / 'checkpoint.npz', {'iteration': 7})
            loaded, meta = load_flowmap(path)
        self.assertEqual(meta['iteration'], 7)
        self.assertEqual(meta['system'], {'name': 'fput', 'params': {'omega': 5.0, 'm': 1}})
        self.assertEqual(loaded.window, 0.125)
        np.testing.assert_array_equal(loaded.evaluate(states, 0.1), flow_map.evaluate(states, 0.1))

    def test_centered_round_trip(self):
        system = make_system('harmonic')
        flow_map = jittered(T0CenteredFlowMap(system, 0.5, (4,), (4,), order=1))
        with tempfile.TemporaryDirectory() as tmp:
            loaded, _ = load_flowmap(save_flowmap(flow_map, Path(tmp) / 'c.npz'))
        self.assertEqual(loaded.kind, 't0_centered')
        np.testing.assert_array_equal(loaded.evaluate([0.1, 0.2], 0.8), flow_map.evaluate([0.1, 0.2], 0.8))
