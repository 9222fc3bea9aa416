"""
Benchmark Hamiltonian systems with hand-coded first and second derivatives.

Coordinate orderings (fixed, one per system):

    harmonic   u = (p, q)
    npco       u = (p1, p2, q1, q2)
    fput       u = (y_s[0:m], x_s[0:m], y_f[0:m], x_f[0:m])
    alpha      u = (vx, vy, x, y)

All evaluators accept a single state of shape (2d,) or a batch (..., 2d) and
broadcast over the leading axes. Systems are immutable after construction.
"""
import logging
import numbers
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .exceptions import DimensionMismatch, InvalidParameter, UnknownSystem

logger = logging.getLogger('hamflow.numerics')


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseState:
    coords: np.ndarray
    eps: float | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 1:
            raise DimensionMismatch(f"PhaseState expects a flat vector, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise InvalidParameter('PhaseState coordinates must be finite')
        coords.setflags(write=False)
        object.__setattr__(self, 'coords', coords)

    @property
    def dim(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class SlowFastPartition:
    slow: tuple
    fast: tuple

    def __post_init__(self):
        object.__setattr__(self, 'slow', tuple(int(i) for i in self.slow))
        object.__setattr__(self, 'fast', tuple(int(i) for i in self.fast))
        if set(self.slow) & set(self.fast):
            raise InvalidParameter('slow and fast index lists overlap')
        if len(set(self.slow)) != len(self.slow) or len(set(self.fast)) != len(self.fast):
            raise InvalidParameter('repeated index in slow/fast partition')

    def validate_for(self, size):
        if sorted(self.slow + self.fast) != list(range(size)):
            raise InvalidParameter(f"slow/fast partition does not cover 0..{size - 1}")
        return self


# ---------------------------------------------------------------------------
# Base classes
# ---------------------------------------------------------------------------

class HamiltonianSystem:
    """
    Evaluators for H, ∇H, f and Df plus structural metadata.

    Subclasses fill in p_index/q_index (where the momenta and positions live
    inside u) and the evaluator hooks. Canonical systems satisfy
    f(u) = J⁻¹∇H(u) for the J matching their ordering.
    """

    name = 'base'
    canonical = True
    separable = False
    conditioned = False
    potential_floor = 0.0

    def __init__(self, d, params=None, partition=None):
        self.d = int(d)
        self.size = 2 * self.d
        self.params = MappingProxyType(dict(params or {}))
        self.partition = partition.validate_for(self.size) if partition else None

    def __repr__(self):
        params = ', '.join(f"{k}={v}" for k, v in self.params.items())
        return f"<{self.__class__.__name__} {self.name} 2d={self.size} {params}>"

    def __reduce__(self):
        return (make_system, (self.name, dict(self.params)))

    # -- coordinate helpers -------------------------------------------------

    @property
    def p_index(self):
        return np.arange(self.d)

    @property
    def q_index(self):
        return np.arange(self.d, self.size)

    @property
    def velocity_index(self):
        return self.p_index

    def coords(self, u, eps=None):
        """Coerce a PhaseState / array to (float64 array, eps) and check the width."""
        if isinstance(u, PhaseState):
            eps = u.eps if eps is None else eps
            u = u.coords
        arr = np.asarray(u, dtype=np.float64)
        if arr.ndim == 0 or arr.shape[-1] != self.size:
            raise DimensionMismatch(
                f"{self.name} expects states of width {self.size}, got shape {arr.shape}"
            )
        return arr, eps

    def split(self, u):
        return u[..., self.p_index], u[..., self.q_index]

    def join(self, p, q):
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        shape = np.broadcast_shapes(p.shape[:-1], q.shape[:-1]) + (self.size,)
        u = np.empty(shape)
        u[..., self.p_index] = p
        u[..., self.q_index] = q
        return u

    # -- evaluators ---------------------------------------------------------

    def energy(self, u, eps=None):
        raise NotImplementedError

    def gradient(self, u, eps=None):
        raise NotImplementedError

    def vector_field(self, u, eps=None):
        raise NotImplementedError

    def hessian(self, u, eps=None):
        raise NotImplementedError

    def jacobian(self, u, eps=None):
        u, eps = self.coords(u, eps)
        return np.matmul(symplectic_inverse(self), self.hessian(u, eps))


class SeparableSystem(HamiltonianSystem):
    """H(p, q) = ½ pᵀM⁻¹p + V(q) with diagonal M."""

    separable = True

    @property
    def mass_inv(self):
        return np.ones(self.d)

    @property
    def mass(self):
        return 1.0 / self.mass_inv

    def potential(self, q):
        raise NotImplementedError

    def force(self, q):
        """F(q) = −∇V(q)."""
        raise NotImplementedError

    def potential_hessian(self, q):
        raise NotImplementedError

    def kinetic(self, p):
        return 0.5 * np.sum(self.mass_inv * p * p, axis=-1)

    def energy(self, u, eps=None):
        u, _ = self.coords(u)
        p, q = self.split(u)
        return self.kinetic(p) + self.potential(q)

    def gradient(self, u, eps=None):
        u, _ = self.coords(u)
        p, q = self.split(u)
        return self.join(self.mass_inv * p, -self.force(q))

    def vector_field(self, u, eps=None):
        u, _ = self.coords(u)
        p, q = self.split(u)
        out = np.empty_like(u)
        out[..., self.p_index] = self.force(q)
        out[..., self.q_index] = self.mass_inv * p
        return out

    def hessian(self, u, eps=None):
        u, _ = self.coords(u)
        _, q = self.split(u)
        pi, qi = self.p_index, self.q_index
        out = np.zeros(u.shape + (self.size,))
        out[..., pi[:, None], pi[None, :]] = np.diag(self.mass_inv)
        out[..., qi[:, None], qi[None, :]] = self.potential_hessian(q)
        return out


def symplectic_inverse(system):
    """J⁻¹ for the system's ordering: (J⁻¹∇H)_p = −∂H/∂q, (J⁻¹∇H)_q = ∂H/∂p."""
    out = np.zeros((system.size, system.size))
    for p, q in zip(system.p_index, system.q_index):
        out[p, q] = -1.0
        out[q, p] = 1.0
    return out


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

class HarmonicOscillator(SeparableSystem):
    name = 'harmonic'

    def __init__(self):
        super().__init__(1, {})

    def potential(self, q):
        return 0.5 * np.sum(q * q, axis=-1)

    def force(self, q):
        return -q

    def potential_hessian(self, q):
        return np.broadcast_to(np.eye(1), q.shape[:-1] + (1, 1)).copy()


class NonlinearOscillators(SeparableSystem):
    """
    Two coupled oscillators with frequency ratio 1 : ε,

        H = ½(q1² + p1²) + ½ε(q2² + p2²) + ε q1 q2 sin(2q1 + 2q2).
    """

    name = 'npco'

    def __init__(self, eps):
        if not 0.0 < eps < 1.0:
            raise InvalidParameter(f"npco requires 0 < eps < 1, got {eps}")
        super().__init__(2, {'eps': float(eps)})
        self.eps = float(eps)

    @property
    def mass_inv(self):
        return np.array([1.0, self.eps])

    def _coupling(self, q):
        q1, q2 = q[..., 0], q[..., 1]
        s = 2.0 * q1 + 2.0 * q2
        return q1, q2, np.sin(s), np.cos(s)

    def potential(self, q):
        q1, q2, sin_s, _ = self._coupling(q)
        return 0.5 * q1 * q1 + 0.5 * self.eps * q2 * q2 + self.eps * q1 * q2 * sin_s

    def force(self, q):
        q1, q2, sin_s, cos_s = self._coupling(q)
        u1 = q2 * sin_s + 2.0 * q1 * q2 * cos_s
        u2 = q1 * sin_s + 2.0 * q1 * q2 * cos_s
        return -np.stack([q1 + self.eps * u1, self.eps * q2 + self.eps * u2], axis=-1)

    def potential_hessian(self, q):
        q1, q2, sin_s, cos_s = self._coupling(q)
        u11 = 4.0 * q2 * cos_s - 4.0 * q1 * q2 * sin_s
        u22 = 4.0 * q1 * cos_s - 4.0 * q1 * q2 * sin_s
        u12 = sin_s + 2.0 * (q1 + q2) * cos_s - 4.0 * q1 * q2 * sin_s
        out = np.empty(q.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + self.eps * u11
        out[..., 1, 1] = self.eps + self.eps * u22
        out[..., 0, 1] = self.eps * u12
        out[..., 1, 0] = self.eps * u12
        return out


class FermiPastaUlam(SeparableSystem):
    """
    FPUT chain in slow/fast variables. With q = (x_s, x_f) the potential is

        V = ω²/2 Σ x_f² + ¼ Σ_k a_k⁴,   a = C q,

    where the spring elongations are a_0 = x_s1 − x_f1,
    a_i = x_s,i+1 − x_f,i+1 − x_s,i − x_f,i and a_m = x_s,m + x_f,m.
    """

    name = 'fput'

    def __init__(self, omega, m):
        if omega <= 0:
            raise InvalidParameter(f"fput requires omega > 0, got {omega}")
        if int(m) != m or m < 1:
            raise InvalidParameter(f"fput requires an integer m >= 1, got {m}")
        m = int(m)
        slow = tuple(range(0, 2 * m))
        fast = tuple(range(2 * m, 4 * m))
        super().__init__(2 * m, {'omega': float(omega), 'm': m}, SlowFastPartition(slow, fast))
        self.omega = float(omega)
        self.m = m
        self._springs = self._spring_matrix(m)
        self._stiff = np.concatenate([np.zeros(m), np.full(m, self.omega ** 2)])

    @staticmethod
    def _spring_matrix(m):
        c = np.zeros((m + 1, 2 * m))
        c[0, 0], c[0, m] = 1.0, -1.0
        for i in range(1, m):
            c[i, i] = 1.0
            c[i, m + i] = -1.0
            c[i, i - 1] = -1.0
            c[i, m + i - 1] = -1.0
        c[m, m - 1], c[m, 2 * m - 1] = 1.0, 1.0
        return c

    @property
    def p_index(self):
        m = self.m
        return np.concatenate([np.arange(0, m), np.arange(2 * m, 3 * m)])

    @property
    def q_index(self):
        m = self.m
        return np.concatenate([np.arange(m, 2 * m), np.arange(3 * m, 4 * m)])

    def elongations(self, q):
        return q @ self._springs.T

    def potential(self, q):
        a = self.elongations(q)
        return 0.5 * np.sum(self._stiff * q * q, axis=-1) + 0.25 * np.sum(a ** 4, axis=-1)

    def force(self, q):
        a = self.elongations(q)
        return -(self._stiff * q + (a ** 3) @ self._springs)

    def potential_hessian(self, q):
        a = self.elongations(q)
        c = self._springs
        quartic = np.einsum('ki,...k,kj->...ij', c, 3.0 * a * a, c)
        return quartic + np.diag(self._stiff)


class AlphaParticle(HamiltonianSystem):
    """
    Guiding-center scale charged particle in a planar magnetic field:

        v̇x = B vy,  v̇y = −B vx,  ẋ = ε vx,  ẏ = ε vy,
        B(x, y) = B0 + a1 cos(k1 x + k2 y) + a2 cos(k3 x + k4 y).

    Non-canonical. ε is an input channel: every evaluator takes ``eps``
    (scalar or one value per batch row) and falls back to params['eps'].
    energy() is the conserved speed proxy ½(vx² + vy²).
    """

    name = 'alpha'
    canonical = False
    conditioned = True

    def __init__(self, eps, B0, a1, a2, k1, k2, k3, k4):
        if eps < 0:
            raise InvalidParameter(f"alpha requires eps >= 0, got {eps}")
        params = dict(eps=eps, B0=B0, a1=a1, a2=a2, k1=k1, k2=k2, k3=k3, k4=k4)
        super().__init__(2, {k: float(v) for k, v in params.items()})

    @property
    def velocity_index(self):
        return np.array([0, 1])

    def _eps(self, eps):
        if eps is None:
            return self.params['eps']
        eps = np.asarray(eps, dtype=np.float64)
        if np.any(eps < 0):
            raise InvalidParameter('alpha requires eps >= 0')
        return eps

    def field(self, x, y):
        """Returns B and its partial derivatives (B_x, B_y)."""
        p = self.params
        phase1 = p['k1'] * x + p['k2'] * y
        phase2 = p['k3'] * x + p['k4'] * y
        b = p['B0'] + p['a1'] * np.cos(phase1) + p['a2'] * np.cos(phase2)
        s1 = p['a1'] * np.sin(phase1)
        s2 = p['a2'] * np.sin(phase2)
        return b, -(p['k1'] * s1 + p['k3'] * s2), -(p['k2'] * s1 + p['k4'] * s2)

    def energy(self, u, eps=None):
        u, _ = self.coords(u)
        return 0.5 * (u[..., 0] ** 2 + u[..., 1] ** 2)

    def gradient(self, u, eps=None):
        u, _ = self.coords(u)
        out = np.zeros_like(u)
        out[..., 0:2] = u[..., 0:2]
        return out

    def vector_field(self, u, eps=None):
        u, eps = self.coords(u, eps)
        eps = self._eps(eps)
        vx, vy, x, y = (u[..., i] for i in range(4))
        b, _, _ = self.field(x, y)
        return np.stack(np.broadcast_arrays(b * vy, -b * vx, eps * vx, eps * vy), axis=-1)

    def jacobian(self, u, eps=None):
        u, eps = self.coords(u, eps)
        eps = self._eps(eps)
        vx, vy, x, y = (u[..., i] for i in range(4))
        b, bx, by = self.field(x, y)
        out = np.zeros(u.shape + (4,))
        out[..., 0, 1] = b
        out[..., 0, 2] = bx * vy
        out[..., 0, 3] = by * vy
        out[..., 1, 0] = -b
        out[..., 1, 2] = -bx * vx
        out[..., 1, 3] = -by * vx
        out[..., 2, 0] = eps
        out[..., 3, 1] = eps
        return out


class LinearSystem(HamiltonianSystem):
    """u' = A u for any square A; used for scalar and linear checks."""

    name = 'linear'
    canonical = False

    def __init__(self, matrix):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        if matrix.shape[0] != matrix.shape[1]:
            raise InvalidParameter(f"linear system needs a square matrix, got {matrix.shape}")
        self.matrix = matrix
        super().__init__(0, {'matrix': matrix.tolist()})
        self.size = matrix.shape[0]
        self.d = self.size // 2

    def __reduce__(self):
        return (LinearSystem, (self.matrix,))

    @property
    def p_index(self):
        return np.arange(self.size)

    @property
    def q_index(self):
        return np.arange(0)

    def energy(self, u, eps=None):
        u, _ = self.coords(u)
        return 0.5 * np.sum(u * u, axis=-1)

    def gradient(self, u, eps=None):
        u, _ = self.coords(u)
        return u.copy()

    def vector_field(self, u, eps=None):
        u, _ = self.coords(u)
        return u @ self.matrix.T

    def jacobian(self, u, eps=None):
        u, _ = self.coords(u)
        return np.broadcast_to(self.matrix, u.shape + (self.size,)).copy()


# ---------------------------------------------------------------------------
# Factory + module-level operations
# ---------------------------------------------------------------------------

SYSTEM_DEFAULTS = {
    'harmonic': {},
    'npco': {'eps': 0.05},
    'fput': {},
    'alpha': {'eps': 0.1, 'B0': 1.0, 'a1': 0.5, 'a2': 0.5,
              'k1': 1.0, 'k2': 0.0, 'k3': 0.0, 'k4': 1.0},
}

SYSTEM_REQUIRED = {
    'harmonic': (),
    'npco': ('eps',),
    'fput': ('omega', 'm'),
    'alpha': ('eps', 'B0', 'a1', 'a2', 'k1', 'k2', 'k3', 'k4'),
}

SYSTEM_CLASSES = {
    'harmonic': HarmonicOscillator,
    'npco': NonlinearOscillators,
    'fput': FermiPastaUlam,
    'alpha': AlphaParticle,
}


def make_system(name, params=None):
    """
    Build one of the named systems.

    Usage:
        make_system('fput', {'omega': 50, 'm': 3})   # 2d = 12
        make_system('npco')                          # eps = 0.05
    """
    if name not in SYSTEM_CLASSES:
        raise UnknownSystem(f"unknown system '{name}' (expected one of {sorted(SYSTEM_CLASSES)})")
    params = dict(params or {})
    required = SYSTEM_REQUIRED[name]
    unknown = set(params) - set(required)
    if unknown:
        raise InvalidParameter(f"unknown parameters for {name}: {sorted(unknown)}")
    merged = {**SYSTEM_DEFAULTS[name], **params}
    missing = [key for key in required if key not in merged]
    if missing:
        raise InvalidParameter(f"missing parameters for {name}: {missing}")
    for key, value in merged.items():
        if not isinstance(value, numbers.Real) or isinstance(value, bool) or not np.isfinite(value):
            raise InvalidParameter(f"parameter {name}.{key} must be a finite number, got {value!r}")
    return SYSTEM_CLASSES[name](**merged)


def eval_hamiltonian(system, u):
    return system.energy(u)


def vector_field(system, u):
    return system.vector_field(u)


def jacobian(system, u):
    return system.jacobian(u)


def _require_fput(system):
    if not isinstance(system, FermiPastaUlam):
        raise InvalidParameter(f"stiff-spring energies need the fput system, got {system.name}")


def stiff_spring_energies(system, u):
    """I_j = ½(y_f,j² + ω² x_f,j²) and their sum."""
    _require_fput(system)
    u, _ = system.coords(u)
    m = system.m
    y_f = u[..., 2 * m:3 * m]
    x_f = u[..., 3 * m:4 * m]
    energies = 0.5 * (y_f * y_f + system.omega ** 2 * x_f * x_f)
    return energies, np.sum(energies, axis=-1)


def fput_energy_terms(system, u):
    """H regrouped as stiff-spring energy + slow kinetic energy + quartic springs."""
    _require_fput(system)
    u, _ = system.coords(u)
    m = system.m
    _, stiff = stiff_spring_energies(system, u)
    y_s = u[..., 0:m]
    _, q = system.split(u)
    return {
        'stiff': stiff,
        'slow_kinetic': 0.5 * np.sum(y_s * y_s, axis=-1),
        'quartic': 0.25 * np.sum(system.elongations(q) ** 4, axis=-1),
    }
