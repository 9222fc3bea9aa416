"""
One-step integrators written in implicit-explicit form

    Φ^Im_h(u_{n+1}) = Φ^Ex_h(u_n).

Each scheme exposes both maps, their Jacobians and the linearized residual
(D_next, D_now) used by the residual losses and the adjoint checks. Steps work
on a single state (2d,) or a batch (n, 2d).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    InvalidParameter, InvalidTime, StepFailure, ToleranceUnreachable, UnsupportedScheme,
)
from .hamiltonians import FermiPastaUlam

logger = logging.getLogger('hamflow.numerics')


def _eye_like(u):
    n = u.shape[-1]
    return np.broadcast_to(np.eye(n), u.shape + (n,))


# ---------------------------------------------------------------------------
# Scheme descriptors
# ---------------------------------------------------------------------------

class Scheme:
    """
    Base descriptor. Explicit schemes keep Φ^Im = id and DΦ^Im = I.

    Attributes:
        system      the HamiltonianSystem being integrated
        h           step size (model time)
        order       formal order p
        newton_tol  residual tolerance of implicit stages (scaled by max(1, ‖u‖))
        max_iter    Newton iteration cap
    """

    name = 'scheme'
    order = 1
    implicit = False
    imex = True

    def __init__(self, system, h, newton_tol=1e-12, max_iter=50):
        if h < 0 or not np.isfinite(h):
            raise InvalidParameter(f"step size must be >= 0, got {h}")
        self.system = system
        self.h = float(h)
        self.newton_tol = float(newton_tol)
        self.max_iter = int(max_iter)

    def __repr__(self):
        return f"<{self.__class__.__name__} h={self.h} order={self.order}>"

    def with_step(self, h):
        return type(self)(self.system, h, self.newton_tol, self.max_iter)

    def describe(self):
        return {'name': self.name, 'h': self.h, 'order': self.order,
                'newton_tol': self.newton_tol, 'max_iter': self.max_iter}

    # -- IMEX maps -----------------------------------------------------------

    def explicit_map(self, u, eps=None):
        raise NotImplementedError

    def explicit_jacobian(self, u, eps=None):
        raise NotImplementedError

    def implicit_map(self, u, eps=None):
        return np.array(u, dtype=np.float64, copy=True)

    def implicit_jacobian(self, u, eps=None):
        return _eye_like(np.asarray(u)).copy()

    def residual(self, u_now, u_next, eps=None):
        return self.implicit_map(u_next, eps) - self.explicit_map(u_now, eps)

    def residual_jacobians(self, u_now, u_next, eps=None):
        """(D_next, D_now) with δR = D_next δu_next − D_now δu_now."""
        return self.implicit_jacobian(u_next, eps), self.explicit_jacobian(u_now, eps)

    # -- stepping -----------------------------------------------------------

    def step(self, u, eps=None):
        """Returns (u_next, newton_iterations, residual_norm)."""
        return self.explicit_map(u, eps), 0, 0.0

    def _newton(self, residual_fn, jacobian_fn, u, guess):
        tol = self.newton_tol * max(1.0, float(np.max(np.linalg.norm(u, axis=-1))))
        v = guess
        norm = np.inf
        for iteration in range(self.max_iter + 1):
            g = residual_fn(v)
            norm = float(np.max(np.linalg.norm(g, axis=-1)))
            if not np.isfinite(norm):
                break
            if norm < tol:
                return v, iteration, norm
            if iteration == self.max_iter:
                break
            try:
                delta = np.linalg.solve(jacobian_fn(v), -g[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise StepFailure(
                    f"{self.name}: singular Newton matrix (residual {norm:.3e})",
                    last_iterate=v, residual_norm=norm,
                )
            if not np.all(np.isfinite(delta)):
                raise StepFailure(
                    f"{self.name}: non-finite Newton update (residual {norm:.3e})",
                    last_iterate=v, residual_norm=norm,
                )
            v = v + delta
        logger.warning(f"[NEWTON] {self.name} h={self.h} | no convergence | residual: {norm:.3e}")
        raise StepFailure(
            f"{self.name}: Newton did not converge in {self.max_iter} iterations (residual {norm:.3e})",
            last_iterate=v, residual_norm=norm,
        )


class ExplicitRungeKutta(Scheme):
    """
    s-stage explicit RK from a Butcher tableau (a, b).

    DΦ^Ex = I + h Σ b_i Dk_i with Dk_i = Df(Y_i)(I + h Σ_j a_ij Dk_j).
    """

    a = np.zeros((1, 1))
    b = np.ones(1)

    def _stages(self, u, eps):
        f = self.system.vector_field
        stages, slopes = [], []
        for i in range(len(self.b)):
            y = u + self.h * sum((self.a[i, j] * slopes[j] for j in range(i) if self.a[i, j]), np.zeros_like(u))
            stages.append(y)
            slopes.append(f(y, eps))
        return stages, slopes

    def explicit_map(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        _, slopes = self._stages(u, eps)
        return u + self.h * sum(bi * k for bi, k in zip(self.b, slopes))

    def explicit_jacobian(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        stages, _ = self._stages(u, eps)
        eye = _eye_like(u)
        dks = []
        for i, y in enumerate(stages):
            inner = eye + self.h * sum((self.a[i, j] * dks[j] for j in range(i) if self.a[i, j]), np.zeros_like(eye))
            dks.append(np.matmul(self.system.jacobian(y, eps), inner))
        return eye + self.h * sum(bi * dk for bi, dk in zip(self.b, dks))


class ForwardEuler(ExplicitRungeKutta):
    name = 'forward_euler'
    order = 1

    def explicit_map(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        return u + self.h * self.system.vector_field(u, eps)


class ClassicalRK4(ExplicitRungeKutta):
    name = 'rk4'
    order = 4
    a = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    b = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


class VelocityVerlet(Scheme):
    """
    Half-kick / drift / half-kick for separable H = ½pᵀM⁻¹p + V(q).

        Φ^Ex(q, p) = (q + h M⁻¹(p + h/2 F(q)),  p + h/2 F(q))
        Φ^Im(q, p) = (q,  p − h/2 F(q))
    """

    name = 'velocity_verlet'
    order = 2

    def __init__(self, system, h, newton_tol=1e-12, max_iter=50):
        if not getattr(system, 'separable', False):
            raise UnsupportedScheme(f"velocity_verlet needs a separable system, {system.name} is not")
        super().__init__(system, h, newton_tol, max_iter)

    def _kick(self, u):
        u = np.asarray(u, dtype=np.float64)
        p, q = self.system.split(u)
        return p, q, self.system.force(q)

    def explicit_map(self, u, eps=None):
        p, q, force = self._kick(u)
        p_half = p + 0.5 * self.h * force
        return self.system.join(p_half, q + self.h * self.system.mass_inv * p_half)

    def implicit_map(self, u, eps=None):
        p, q, force = self._kick(u)
        return self.system.join(p - 0.5 * self.h * force, q)

    def _blocks(self, u, sign, drift):
        u = np.asarray(u, dtype=np.float64)
        _, q = self.system.split(u)
        dforce = -self.system.potential_hessian(q)
        pi, qi = self.system.p_index, self.system.q_index
        minv = self.system.mass_inv
        out = np.zeros(u.shape + (u.shape[-1],))
        eye = np.eye(len(pi))
        out[..., pi[:, None], pi[None, :]] = eye
        out[..., pi[:, None], qi[None, :]] = sign * 0.5 * self.h * dforce
        if drift:
            out[..., qi[:, None], pi[None, :]] = self.h * np.diag(minv)
            out[..., qi[:, None], qi[None, :]] = eye + 0.5 * self.h ** 2 * minv[:, None] * dforce
        else:
            out[..., qi[:, None], qi[None, :]] = eye
        return out

    def explicit_jacobian(self, u, eps=None):
        return self._blocks(u, 1.0, drift=True)

    def implicit_jacobian(self, u, eps=None):
        return self._blocks(u, -1.0, drift=False)

    def step(self, u, eps=None):
        p, q, force = self._kick(u)
        p_half = p + 0.5 * self.h * force
        q_next = q + self.h * self.system.mass_inv * p_half
        p_next = p_half + 0.5 * self.h * self.system.force(q_next)
        return self.system.join(p_next, q_next), 0, 0.0


class ImplicitEuler(Scheme):
    """Φ^Im(u) = u − h f(u), Φ^Ex = id."""

    name = 'implicit_euler'
    order = 1
    implicit = True

    def explicit_map(self, u, eps=None):
        return np.array(u, dtype=np.float64, copy=True)

    def explicit_jacobian(self, u, eps=None):
        return _eye_like(np.asarray(u)).copy()

    def implicit_map(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        return u - self.h * self.system.vector_field(u, eps)

    def implicit_jacobian(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        return _eye_like(u) - self.h * self.system.jacobian(u, eps)

    def step(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        guess = u + self.h * self.system.vector_field(u, eps)
        return self._newton(
            lambda v: self.implicit_map(v, eps) - u,
            lambda v: self.implicit_jacobian(v, eps),
            u, guess,
        )


class ImplicitMidpoint(Scheme):
    """
    u_{n+1} = u_n + h f((u_n + u_{n+1})/2).

    Not IMEX-separable; the residual is used in its two-argument form
    R = u_next − u_now − h f(avg) with D_next = I − h/2 A, D_now = I + h/2 A
    and A = Df(avg).
    """

    name = 'implicit_midpoint'
    order = 2
    implicit = True
    imex = False

    def explicit_map(self, u, eps=None):
        raise UnsupportedScheme('implicit_midpoint has no separate explicit map; use residual()')

    def explicit_jacobian(self, u, eps=None):
        raise UnsupportedScheme('implicit_midpoint has no separate explicit map; use residual_jacobians()')

    def residual(self, u_now, u_next, eps=None):
        u_now = np.asarray(u_now, dtype=np.float64)
        u_next = np.asarray(u_next, dtype=np.float64)
        return u_next - u_now - self.h * self.system.vector_field(0.5 * (u_now + u_next), eps)

    def residual_jacobians(self, u_now, u_next, eps=None):
        u_now = np.asarray(u_now, dtype=np.float64)
        u_next = np.asarray(u_next, dtype=np.float64)
        a = self.system.jacobian(0.5 * (u_now + u_next), eps)
        eye = _eye_like(u_now)
        return eye - 0.5 * self.h * a, eye + 0.5 * self.h * a

    def step(self, u, eps=None):
        u = np.asarray(u, dtype=np.float64)
        guess = u + self.h * self.system.vector_field(u, eps)
        return self._newton(
            lambda v: self.residual(u, v, eps),
            lambda v: self.residual_jacobians(u, v, eps)[0],
            u, guess,
        )


SCHEMES = {
    'forward_euler': ForwardEuler,
    'rk4': ClassicalRK4,
    'velocity_verlet': VelocityVerlet,
    'implicit_euler': ImplicitEuler,
    'implicit_midpoint': ImplicitMidpoint,
}


def make_scheme(name, system, h, newton_tol=1e-12, max_iter=50):
    if name not in SCHEMES:
        raise UnsupportedScheme(f"unknown scheme '{name}' (expected one of {sorted(SCHEMES)})")
    return SCHEMES[name](system, h, newton_tol, max_iter)


# ---------------------------------------------------------------------------
# Single-step operations
# ---------------------------------------------------------------------------

def forward_euler_step(system, u, h, eps=None):
    u, eps = system.coords(u, eps)
    return ForwardEuler(system, h).step(u, eps)[0]


def velocity_verlet_step(system, u, h):
    u, _ = system.coords(u)
    return VelocityVerlet(system, h).step(u)[0]


def implicit_midpoint_step(system, u, h, newton_tol=1e-12, max_iter=50, eps=None):
    u, eps = system.coords(u, eps)
    return ImplicitMidpoint(system, h, newton_tol, max_iter).step(u, eps)[0]


def rk4_step(system, u, h, eps=None):
    u, eps = system.coords(u, eps)
    return ClassicalRK4(system, h).step(u, eps)[0]


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    newton_iterations: np.ndarray = field(default=None)
    residual_norms: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.states[-1]


def integrate(system, scheme, u0, h=None, n_steps=0, eps=None, t0=0.0):
    """
    Advance u0 by n_steps of ``scheme`` (a Scheme or a scheme name).

    States have shape (n_steps + 1,) + u0.shape, so batches of initial
    conditions integrate in lockstep.
    """
    u, eps = system.coords(u0, eps)
    if isinstance(scheme, str):
        if h is None:
            raise InvalidParameter('integrate needs h when the scheme is given by name')
        scheme = make_scheme(scheme, system, h)
    elif h is not None and h != scheme.h:
        scheme = scheme.with_step(h)
    if n_steps < 0 or int(n_steps) != n_steps:
        raise InvalidParameter(f"n_steps must be a non-negative integer, got {n_steps}")
    n_steps = int(n_steps)
    if n_steps and scheme.h <= 0:
        raise InvalidParameter('integrate needs h > 0')
    states = np.empty((n_steps + 1,) + u.shape)
    iterations = np.zeros(n_steps, dtype=np.int64)
    residuals = np.zeros(n_steps)
    states[0] = u
    for n in range(n_steps):
        try:
            states[n + 1], iterations[n], residuals[n] = scheme.step(states[n], eps)
        except StepFailure as exc:
            raise exc.at_step(n) from exc
    times = t0 + scheme.h * np.arange(n_steps + 1)
    return Trajectory(times, states, iterations, residuals)


FPUT_REFERENCE_STEPS = ((50.0, 2.0 ** -11), (np.inf, 2.0 ** -15))


def reference_flow(system, u0, t, tol=1e-10, eps=None, max_steps=2 ** 22):
    """
    High-resolution approximation of φ_t(u0).

    FPUT uses Velocity Verlet at 2⁻¹¹ (ω ≤ 50) or 2⁻¹⁵; everything else uses
    RK4, doubling the step count until the Richardson estimate |y_2n − y_n|/15
    drops below ``tol``. ``tol`` only drives the RK4 branch.
    """
    u, eps = system.coords(u0, eps)
    if t < 0:
        raise InvalidTime(f"reference_flow needs t >= 0, got {t}")
    if t == 0:
        return u.copy()

    if isinstance(system, FermiPastaUlam):
        h_max = next(h for omega, h in FPUT_REFERENCE_STEPS if system.omega <= omega)
        n = math.ceil(t / h_max - 1e-9)
        if n > max_steps:
            raise ToleranceUnreachable(f"FPUT reference to t={t} needs {n} steps (limit {max_steps})")
        scheme = VelocityVerlet(system, t / n)
        for _ in range(n):
            u = scheme.step(u)[0]
        return u

    n = max(1, math.ceil(t / 0.05))
    coarse = _rk4_advance(system, u, t, n, eps)
    error = np.inf
    while 2 * n <= max_steps:
        n *= 2
        fine = _rk4_advance(system, u, t, n, eps)
        error = float(np.max(np.abs(fine - coarse))) / 15.0
        if error < tol:
            return fine
        coarse = fine
    raise ToleranceUnreachable(
        f"reference_flow could not reach tol={tol} within {max_steps} RK4 steps (last estimate {error:.3e})"
    )


def _rk4_advance(system, u, t, n, eps):
    scheme = ClassicalRK4(system, t / n)
    for _ in range(n):
        u = scheme.explicit_map(u, eps)
    return u
