import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag

from hamflow.evalharness import (
    BenchmarkReport, ErrorSeries, FlowMapSolver, SchemeSolver, benchmark, energy_error, energy_exchange_profile,
    RecordEncoder, export_results, fit_error_growth, poincare_section, read_results, render_records, rollout_errors,
    section_mismatch, traj_error,
)
from hamflow.exceptions import InvalidParameter, UndefinedMetric
from hamflow.flowmap import AnalyticFlowMap
from hamflow.hamiltonians import make_system
from hamflow.integrators import integrate, make_scheme


class MetricTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')

    def test_traj_error(self):
        self.assertAlmostEqual(traj_error([3.0, 0.0], [0.0, 4.0]), 5.0)
        np.testing.assert_allclose(traj_error(np.ones((3, 2)), np.zeros((3, 2))), np.sqrt(2.0))

    def test_energy_error(self):
        self.assertAlmostEqual(energy_error(self.system, [0.0, 2.0], [0.0, 1.0]), 3.0)

    def test_energy_error_needs_nonzero_reference(self):
        with self.assertRaises(UndefinedMetric):
            energy_error(self.system, [0.0, 1.0], [0.0, 0.0])


class PoincareTests(SimpleTestCase):
    def setUp(self):
        t = np.linspace(0.0, 4 * np.pi, 2001)
        states = np.stack([np.sin(t), np.cos(t), t, 2 * t], axis=-1)
        self.trajectory = (t, states)

    def test_crossings_with_positive_vx(self):
        section = poincare_section(self.trajectory)
        self.assertEqual(len(section), 2)
        np.testing.assert_allclose(section.times, [np.pi / 2, 5 * np.pi / 2], atol=1e-5)
        np.testing.assert_allclose(section.points[:, 1], 2 * section.points[:, 0])

    def test_direction_filter(self):
        self.assertEqual(len(poincare_section(self.trajectory, direction='ascending')), 0)
        self.assertEqual(len(poincare_section(self.trajectory, direction='descending')), 2)
        with self.assertRaises(InvalidParameter):
            poincare_section(self.trajectory, direction='sideways')

    def test_crossing_at_the_first_sample(self):
        t = np.linspace(0.0, 3 * np.pi, 1501)
        states = np.stack([np.cos(t), -np.sin(t), t, 2 * t], axis=-1)
        section = poincare_section((t, states))
        self.assertEqual(len(section), 2)
        np.testing.assert_allclose(section.times, [0.0, 2 * np.pi], atol=1e-5)
        np.testing.assert_allclose(section.points[0], [0.0, 0.0])
        self.assertEqual(len(poincare_section((t, states), direction='descending')), 2)
        self.assertEqual(len(poincare_section((t, states), direction='ascending')), 0)

    def test_section_mismatch(self):
        section = poincare_section(self.trajectory)
        self.assertEqual(section_mismatch(section, section), 0.0)
        shifted = section.points + np.array([0.0, 1.0])
        self.assertGreater(section_mismatch(shifted, section), 0.0)
        with self.assertRaises(UndefinedMetric):
            section_mismatch(np.empty((0, 2)), section)

    def test_alpha_orbit_has_a_section(self):
        system = make_system('alpha')
        trajectory = integrate(system, 'rk4', [1.0, 1.0, 0.5, 0.5], h=0.01, n_steps=2000, eps=0.27)
        section = poincare_section(trajectory)
        self.assertGreater(len(section), 0)
        self.assertEqual(section.points.shape[1], 2)


class ErrorGrowthTests(SimpleTestCase):
    def test_exponential_fit(self):
        times = np.linspace(0.0, 10.0, 11)
        delta0, rate = fit_error_growth(1e-3 * np.exp(0.5 * times), times)
        self.assertAlmostEqual(delta0, 1e-3, places=12)
        self.assertAlmostEqual(rate, 0.5, places=10)

    def test_decay_is_not_worst_case(self):
        times = np.linspace(0.0, 4.0, 5)
        series = ErrorSeries(times, np.exp(-0.5 * times), np.zeros(5))
        fit_error_growth(series)
        self.assertFalse(series.worst_case)
        self.assertAlmostEqual(series.rate, -0.5)

    def test_too_few_points(self):
        with self.assertRaises(UndefinedMetric):
            fit_error_growth(np.array([0.0, 1e-3]), np.array([0.0, 1.0]))


class RolloutTests(SimpleTestCase):
    def test_exact_flow_has_no_error(self):
        system = make_system('harmonic')
        series = rollout_errors(AnalyticFlowMap.rotation(system), system, [0.0, 1.0], 0.5, 4)
        np.testing.assert_allclose(series.times, [0.0, 0.5, 1.0, 1.5, 2.0])
        self.assertLess(np.max(series.traj_err), 1e-8)
        self.assertLess(np.max(series.energy_err), 1e-8)

    def test_energy_exchange_profile(self):
        system = make_system('fput', {'omega': 50, 'm': 1})
        states = np.array([[0.5, 0.0, 1.0, 0.0], [0.5, 0.0, 0.0, 0.02]])
        profile = energy_exchange_profile(system, (np.array([0.0, 1.0]), states))
        np.testing.assert_allclose(profile.total, [0.5, 0.5])
        self.assertEqual(list(profile.to_frame().columns), ['t', 'I1', 'I', 'H'])
        with self.assertRaises(InvalidParameter):
            energy_exchange_profile(system, (np.array([0.0, 1.0]), states), stride=0)


class BenchmarkTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')
        self.batch = np.array([[0.0, 1.0], [1.0, 0.0]])

    def test_scheme_and_flow_map_solvers(self):
        solvers = [SchemeSolver(make_scheme('rk4', self.system, 0.1)),
                   FlowMapSolver(AnalyticFlowMap.rotation(self.system), dt=0.5)]
        reports = benchmark(solvers, self.system, self.batch, 1.0, repeats=1, record_timing=False)
        self.assertEqual([r.solver for r in reports], ['rk4(h=0.1)', 'flowmap(dt=0.5)'])
        self.assertLess(reports[0].traj_err, 1e-5)
        self.assertLess(reports[1].traj_err, 1e-8)
        self.assertEqual(reports[0].batch, 2)

    def test_scheme_solver_covers_a_partial_step(self):
        solver = SchemeSolver(make_scheme('rk4', self.system, 0.3))
        reports = benchmark([solver], self.system, self.batch, 1.0, repeats=1)
        self.assertLess(reports[0].traj_err, 1e-3)

    def test_horizon_must_be_a_multiple_of_the_map_step(self):
        solver = FlowMapSolver(AnalyticFlowMap.rotation(self.system), dt=0.5)
        with self.assertRaises(InvalidParameter):
            benchmark([solver], self.system, self.batch, 0.75, repeats=1)

    def test_no_solvers(self):
        self.assertEqual(benchmark([], self.system, self.batch, 1.0), [])


class ExportTests(SimpleTestCase):
    def test_csv_keeps_full_precision(self):
        times = np.array([0.0, 0.1, 0.2])
        series = ErrorSeries(times, np.array([0.0, 1 / 3, 2 / 7]), np.array([0.0, 1e-17, np.pi]))
        with tempfile.TemporaryDirectory() as tmp:
            frame = read_results(export_results(series, Path(tmp) / 'errors.csv'))
        np.testing.assert_array_equal(frame['traj_err'].to_numpy(), series.traj_err)
        np.testing.assert_array_equal(frame['energy_err'].to_numpy(), series.energy_err)

    def test_json_writes_inf_as_null(self):
        report = BenchmarkReport('rk4', 1, 1.0, 2.0, 2.0, float('inf'), 0.5)
        with tempfile.TemporaryDirectory() as tmp:
            path = export_results([report], Path(tmp) / 'bench.json', fmt='json')
            rows = json.loads(path.read_text())
        self.assertIsNone(rows[0]['traj_err'])
        self.assertEqual(rows[0]['H_err'], 0.5)

    def test_unknown_record_or_format(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(InvalidParameter):
                export_results(object(), Path(tmp) / 'x.csv')
            with self.assertRaises(InvalidParameter):
                export_results(ErrorSeries(np.zeros(1), np.zeros(1), np.zeros(1)), Path(tmp) / 'x.txt', fmt='txt')

    def test_records_render_numpy_scalars(self):
        frame = pd.DataFrame({'n': np.array([1, 2], dtype=np.int64), 'x': [np.inf, 0.25]})
        self.assertEqual(json.loads(render_records(frame)), [{'n': 1, 'x': None}, {'n': 2, 'x': 0.25}])
        self.assertEqual(json.dumps({'k': np.int64(3), 'f': np.float32(0.5)}, cls=RecordEncoder), '{"k": 3, "f": 0.5}')


@tag('acceptance')
class LongRunAcceptanceTests(SimpleTestCase):
    def test_frozen_alpha_section_is_one_point(self):
        system = make_system('alpha', {'eps': 0.0})
        trajectory = integrate(system, 'rk4', [1.0, 1.0, 0.5, 0.5], h=0.01, n_steps=5000)
        section = poincare_section(trajectory)
        self.assertGreater(len(section), 5)
        self.assertLess(np.max(np.ptp(section.points, axis=0)), 1e-6)

    def test_fput_stiff_springs_exchange_energy(self):
        system = make_system('fput', {'omega': 50, 'm': 3})
        u0 = np.zeros(12)
        u0[[0, 3, 6]] = 1.0
        u0[9] = 1.0 / 50
        trajectory = integrate(system, 'velocity_verlet', u0, h=2.0 ** -11, n_steps=100 * 2 ** 11)
        profile = energy_exchange_profile(system, trajectory, stride=64)
        total0 = profile.total[0]
        self.assertLess(np.max(np.abs(profile.total - total0)) / total0, 0.05)
        self.assertGreater(np.max(np.ptp(profile.stiff, axis=0)), 0.2 * total0)
        self.assertLess(np.max(np.abs(profile.energy - profile.energy[0])) / profile.energy[0], 1e-4)
