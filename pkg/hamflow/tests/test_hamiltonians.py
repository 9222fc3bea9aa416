import pickle

import numpy as np
from django.test import SimpleTestCase

from hamflow.exceptions import DimensionMismatch, InvalidParameter, UnknownSystem
from hamflow.hamiltonians import (
    LinearSystem, PhaseState, eval_hamiltonian, fput_energy_terms, jacobian, make_system, stiff_spring_energies,
    symplectic_inverse, vector_field,
)


def numeric_jacobian(system, u, eps=None, step=1e-6):
    out = np.empty((system.size, system.size))
    for k in range(system.size):
        shift = np.zeros(system.size)
        shift[k] = step
        out[:, k] = (system.vector_field(u + shift, eps) - system.vector_field(u - shift, eps)) / (2 * step)
    return out


class HarmonicOscillatorTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('harmonic')

    def test_energy_and_vector_field(self):
        # u = (p, q)
        self.assertAlmostEqual(float(self.system.energy([0.0, 1.0])), 0.5)
        np.testing.assert_allclose(self.system.vector_field([0.0, 1.0]), [-1.0, 0.0])

    def test_jacobian_is_rotation_generator(self):
        np.testing.assert_allclose(self.system.jacobian([0.3, -0.2]), [[0.0, -1.0], [1.0, 0.0]])

    def test_batches_broadcast(self):
        u = np.random.default_rng(0).standard_normal((5, 3, 2))
        self.assertEqual(self.system.energy(u).shape, (5, 3))
        self.assertEqual(self.system.jacobian(u).shape, (5, 3, 2, 2))

    def test_module_level_operations(self):
        u = np.array([0.6, 0.8])
        self.assertAlmostEqual(float(eval_hamiltonian(self.system, u)), 0.5)
        np.testing.assert_allclose(vector_field(self.system, u), [-0.8, 0.6])
        np.testing.assert_allclose(jacobian(self.system, u), self.system.jacobian(u))

    def test_wrong_width_is_rejected(self):
        with self.assertRaises(DimensionMismatch):
            self.system.energy([0.0, 1.0, 2.0])


class CanonicalSystemTests(SimpleTestCase):
    def test_vector_field_is_symplectic_gradient(self):
        rng = np.random.default_rng(1)
        for system in (make_system('npco', {'eps': 0.05}), make_system('fput', {'omega': 50, 'm': 3})):
            u = 0.3 * rng.standard_normal(system.size)
            expected = symplectic_inverse(system) @ system.gradient(u)
            np.testing.assert_allclose(system.vector_field(u), expected, atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(2)
        systems = [
            make_system('npco', {'eps': 0.05}),
            make_system('fput', {'omega': 5, 'm': 2}),
            make_system('alpha'),
        ]
        for system in systems:
            u = 0.5 * rng.standard_normal(system.size)
            np.testing.assert_allclose(system.jacobian(u), numeric_jacobian(system, u), atol=1e-6)


class FermiPastaUlamTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('fput', {'omega': 50, 'm': 3})

    def test_sizes_and_partition(self):
        self.assertEqual(self.system.size, 12)
        self.assertEqual(self.system.partition.slow, tuple(range(6)))
        self.assertEqual(self.system.partition.fast, tuple(range(6, 12)))

    def test_energy_terms_sum_to_hamiltonian(self):
        u = 0.1 * np.random.default_rng(3).standard_normal((4, 12))
        terms = fput_energy_terms(self.system, u)
        np.testing.assert_allclose(terms['stiff'] + terms['slow_kinetic'] + terms['quartic'],
                                   self.system.energy(u), rtol=1e-12)

    def test_stiff_spring_energies(self):
        u = np.zeros(12)
        u[6] = 1.0       # y_f,1
        u[9] = 0.02      # x_f,1
        energies, total = stiff_spring_energies(self.system, u)
        self.assertAlmostEqual(energies[0], 0.5 * (1.0 + 2500 * 0.0004))
        self.assertAlmostEqual(float(total), energies[0])

    def test_stiff_energies_need_fput(self):
        with self.assertRaises(InvalidParameter):
            stiff_spring_energies(make_system('harmonic'), [0.0, 1.0])


class AlphaParticleTests(SimpleTestCase):
    def setUp(self):
        self.system = make_system('alpha')

    def test_speed_is_conserved_by_the_field(self):
        u = np.array([0.7, -0.4, 1.2, 3.0])
        self.assertAlmostEqual(float(self.system.gradient(u) @ self.system.vector_field(u)), 0.0)

    def test_eps_is_a_per_row_input(self):
        u = np.tile([1.0, 2.0, 0.0, 0.0], (2, 1))
        f = self.system.vector_field(u, np.array([0.1, 0.3]))
        np.testing.assert_allclose(f[:, 2], [0.1, 0.3])
        np.testing.assert_allclose(f[:, 3], [0.2, 0.6])

    def test_negative_eps_is_rejected(self):
        with self.assertRaises(InvalidParameter):
            self.system.vector_field([1.0, 0.0, 0.0, 0.0], -0.1)

    def test_is_not_canonical(self):
        self.assertFalse(self.system.canonical)
        self.assertFalse(self.system.separable)
        self.assertTrue(self.system.conditioned)


class MakeSystemTests(SimpleTestCase):
    def test_defaults(self):
        self.assertEqual(make_system('npco').params['eps'], 0.05)
        self.assertEqual(make_system('alpha').params['B0'], 1.0)

    def test_errors(self):
        with self.assertRaises(UnknownSystem):
            make_system('pendulum')
        with self.assertRaises(InvalidParameter):
            make_system('npco', {'eps': 1.5})
        with self.assertRaises(InvalidParameter):
            make_system('fput', {'omega': 50})
        with self.assertRaises(InvalidParameter):
            make_system('fput', {'omega': 50, 'm': 0})
        with self.assertRaises(InvalidParameter):
            make_system('harmonic', {'omega': 2.0})
        with self.assertRaises(InvalidParameter):
            make_system('npco', {'eps': float('nan')})

    def test_systems_pickle_by_name(self):
        system = make_system('fput', {'omega': 50, 'm': 2})
        clone = pickle.loads(pickle.dumps(system))
        self.assertEqual(clone.omega, 50.0)
        self.assertEqual(clone.size, 8)

    def test_linear_system(self):
        system = LinearSystem([[-1.0]])
        np.testing.assert_allclose(system.vector_field([2.0]), [-2.0])
        self.assertEqual(pickle.loads(pickle.dumps(system)).matrix.tolist(), [[-1.0]])


class PhaseStateTests(SimpleTestCase):
    def test_coords_are_read_only(self):
        state = PhaseState([0.0, 1.0])
        self.assertEqual(state.dim, 2)
        with self.assertRaises(ValueError):
            state.coords[0] = 3.0

    def test_non_finite_coords_are_rejected(self):
        with self.assertRaises(InvalidParameter):
            PhaseState([0.0, float('inf')])
        with self.assertRaises(DimensionMismatch):
            PhaseState([[0.0, 1.0]])
