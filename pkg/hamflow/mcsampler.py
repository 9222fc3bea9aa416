"""
Microcanonical sampling on H = H0 level sets.

HMC-H₀ alternates two moves that both keep H fixed:

1. momentum refreshment on the sphere ½ pᵀM⁻¹p = H0 − U(q);
2. Hamiltonian flow for a random duration t ~ Exp(mean λ).

Chains for different energy levels are independent and run through
``workers.parallel_map``.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg

from .containers import load_arrays, save_arrays
from .exceptions import EmptyIntersection, InfeasiblePosition, InvalidParameter, UnsupportedScheme
from .integrators import make_scheme
from .workers import parallel_map

logger = logging.getLogger('hamflow.numerics')

RANK_TOL = 1e-12


@dataclass(frozen=True)
class McSamplerConfig:
    H0: float
    lam: float = 1.0
    scheme: str = 'velocity_verlet'
    h: float = None
    n_samples: int = 100
    levels: int = 16
    band_std: float = None
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidParameter(f"integration-time mean lambda must be > 0, got {self.lam}")
        if self.n_samples < 0:
            raise InvalidParameter(f"chain length must be >= 0, got {self.n_samples}")
        if self.levels < 1:
            raise InvalidParameter(f"need at least one energy level, got {self.levels}")

    @property
    def step(self):
        return self.h if self.h is not None else min(0.01, self.lam / 100.0)

    @property
    def std(self):
        return self.band_std if self.band_std is not None else abs(self.H0) / 10.0


@dataclass
class SampleSet:
    """States (n, 2d) tagged with chain id, step within the chain and energy level."""

    coords: np.ndarray
    chain_id: np.ndarray
    step: np.ndarray
    energy_level: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.coords)

    @classmethod
    def empty(cls, size, meta=None):
        return cls(np.empty((0, size)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                   np.empty(0), meta or {})

    @classmethod
    def concat(cls, parts, meta=None):
        parts = list(parts)
        return cls(
            np.concatenate([p.coords for p in parts]),
            np.concatenate([p.chain_id for p in parts]),
            np.concatenate([p.step for p in parts]),
            np.concatenate([p.energy_level for p in parts]),
            meta or {},
        )

    def to_frame(self):
        frame = pd.DataFrame({
            'chain_id': self.chain_id.astype(np.int64),
            'step': self.step.astype(np.int64),
            'energy_level': self.energy_level,
        })
        coords = pd.DataFrame(self.coords, columns=[f"c{i}" for i in range(self.coords.shape[1])])
        return pd.concat([frame, coords], axis=1)

    @classmethod
    def from_frame(cls, frame, meta=None):
        columns = sorted((c for c in frame.columns if c.startswith('c') and c[1:].isdigit()), key=lambda c: int(c[1:]))
        return cls(frame[columns].to_numpy(dtype=np.float64), frame['chain_id'].to_numpy(dtype=np.int64),
                   frame['step'].to_numpy(dtype=np.int64), frame['energy_level'].to_numpy(dtype=np.float64),
                   meta or {})

    def save(self, path):
        arrays = {'coords': self.coords, 'chain_id': self.chain_id, 'step': self.step,
                  'energy_level': self.energy_level}
        return save_arrays(path, arrays, self.meta)

    @classmethod
    def from_container(cls, path):
        arrays, meta = load_arrays(path)
        return cls(arrays['coords'], arrays['chain_id'].astype(np.int64), arrays['step'].astype(np.int64),
                   arrays['energy_level'], meta)


@dataclass(frozen=True)
class LinearConstraintSpec:
    """{x : A x = b, xᵀ M x = c}."""

    A: np.ndarray
    b: np.ndarray
    M: np.ndarray
    c: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        d = A.shape[1]
        if M.shape != (d, d) or b.shape != (A.shape[0],):
            raise InvalidParameter(f"incompatible shapes A{A.shape}, b{b.shape}, M{M.shape}")
        if self.c < 0:
            raise InvalidParameter(f"level c must be >= 0, got {self.c}")
        if not np.allclose(M, M.T):
            raise InvalidParameter('metric M must be symmetric')
        try:
            factor = linalg.cho_factor(M)
        except linalg.LinAlgError:
            raise InvalidParameter('metric M must be positive definite')
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise InvalidParameter('constraint matrix A must have full row rank')
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'M', M)
        object.__setattr__(self, 'c', float(self.c))
        object.__setattr__(self, '_factor', factor)


# ---------------------------------------------------------------------------
# Momentum refreshment
# ---------------------------------------------------------------------------

def _require_separable(system):
    if not getattr(system, 'separable', False):
        raise UnsupportedScheme(f"HMC-H0 needs a separable system, {system.name} is not")


def _unit_sphere(rng, n):
    while True:
        z = rng.standard_normal(n)
        norm = np.linalg.norm(z)
        if norm > 0:
            return z / norm


def refresh_momentum(q, system, H0, rng=None):
    """ξ = sqrt(2(H0 − U(q))) M^{1/2} ξ0 with ξ0 uniform on the unit sphere."""
    _require_separable(system)
    rng = rng if rng is not None else np.random.default_rng()
    q = np.asarray(q, dtype=np.float64)
    gap = H0 - float(system.potential(q))
    if gap < 0:
        raise InfeasiblePosition(f"U(q) = {H0 - gap:.6g} exceeds the target energy {H0:.6g}")
    xi0 = _unit_sphere(rng, system.d)
    return math.sqrt(2.0 * gap) * np.sqrt(system.mass) * xi0


def _flow(scheme, u, duration):
    n_full = int(duration // scheme.h)
    for _ in range(n_full):
        u = scheme.step(u)[0]
    remainder = duration - n_full * scheme.h
    if remainder > 0:
        u = scheme.with_step(remainder).step(u)[0]
    return u


def hmc_h0_chain(system, q0, config, rng=None, chain_id=0, level=None):
    """N samples on H = level (defaults to config.H0), starting from position q0."""
    _require_separable(system)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    energy = config.H0 if level is None else float(level)
    q = np.asarray(q0, dtype=np.float64)
    if float(system.potential(q)) > energy:
        raise InfeasiblePosition(f"start position has U(q0) = {float(system.potential(q)):.6g} > H0 = {energy:.6g}")

    scheme = make_scheme(config.scheme, system, config.step)
    states = np.empty((config.n_samples, system.size))
    for n in range(config.n_samples):
        for attempt in range(config.max_retries + 1):
            p = refresh_momentum(q, system, energy, rng)
            duration = rng.exponential(config.lam)
            u = _flow(scheme, system.join(p, q), duration)
            _, q_next = system.split(u)
            if float(system.potential(q_next)) <= energy:
                break
            logger.warning(f"[HMC] chain {chain_id} step {n} | U(q) above H0 after flow | retry {attempt + 1}")
        else:
            raise InfeasiblePosition(f"chain {chain_id} left the energy shell {config.max_retries + 1} times at step {n}")
        states[n] = u
        q = q_next

    if config.n_samples:
        drift = np.max(np.abs(system.energy(states) - energy)) / max(abs(energy), 1e-300)
        logger.info(f"[HMC] chain {chain_id} | samples: {config.n_samples} | H0: {energy:.6g} | max drift: {drift:.2e}")
    return SampleSet(
        states,
        np.full(config.n_samples, chain_id, dtype=np.int64),
        np.arange(config.n_samples, dtype=np.int64),
        np.full(config.n_samples, energy),
        {'H0': energy, 'lambda': config.lam, 'h': config.step, 'scheme': config.scheme},
    )


def _level_chain(system, q0, config, seed_seq, chain_id, level):
    return hmc_h0_chain(system, q0, config, np.random.default_rng(seed_seq), chain_id, level)


def draw_levels(config, floor, rng, max_draws=1000):
    """config.levels energies from Normal(H0, std²) truncated to E > floor."""
    levels = []
    for _ in range(max_draws):
        if len(levels) == config.levels:
            break
        value = rng.normal(config.H0, config.std) if config.std > 0 else config.H0
        if value > floor:
            levels.append(float(value))
    if not levels:
        raise InfeasiblePosition(f"no energy level above {floor} drawn around H0 = {config.H0}")
    return levels


def narrowband_dataset(system, q_pool, config, per_level=None, workers=1):
    """
    One chain per narrowband energy level, concatenated in level order.

    Each chain starts from the first pool position (in a seeded shuffle) that
    is feasible for its level; levels without one are skipped.
    """
    _require_separable(system)
    rng = np.random.default_rng(config.seed)
    q_pool = np.atleast_2d(np.asarray(q_pool, dtype=np.float64))
    levels = draw_levels(config, system.potential_floor, rng)
    seeds = np.random.SeedSequence(config.seed).spawn(len(levels))
    chain_config = config if per_level is None else _with_length(config, per_level)
    potentials = system.potential(q_pool)

    jobs = []
    for index, level in enumerate(levels):
        feasible = np.flatnonzero(potentials < level)
        if len(feasible) == 0:
            logger.warning(f"[HMC] level {index} | E={level:.6g} below every pool position | skipped")
            continue
        q0 = q_pool[rng.choice(feasible)]
        jobs.append((system, q0, chain_config, seeds[index], index, level))
    if not jobs:
        raise InfeasiblePosition('every drawn energy level lies below the potential of every pool position')

    parts = parallel_map(_level_chain, jobs, workers)
    meta = {'H0': config.H0, 'lambda': config.lam, 'h': config.step, 'scheme': config.scheme,
            'levels': [job[-1] for job in jobs], 'seed': config.seed, 'system': system.name}
    return SampleSet.concat(parts, meta)


def _with_length(config, n):
    return replace(config, n_samples=int(n))


# ---------------------------------------------------------------------------
# Linearly constrained refreshment
# ---------------------------------------------------------------------------

def null_space_basis(A, tol=RANK_TOL):
    """Orthonormal basis of ker A from a pivoted QR of Aᵀ."""
    q, r, _ = linalg.qr(A.T, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * (diag[0] if diag.size else 1.0)))
    return q[:, rank:]


def particular_solution(spec):
    """x_p = M⁻¹Aᵀ(AM⁻¹Aᵀ)⁻¹b, the M-smallest solution of A x = b."""
    minv_at = linalg.cho_solve(spec._factor, spec.A.T)
    return minv_at @ np.linalg.solve(spec.A @ minv_at, spec.b)


def constrained_refresh(spec, rng=None):
    """Uniform-direction draw on {A x = b} ∩ {xᵀ M x = c}."""
    rng = rng if rng is not None else np.random.default_rng()
    x_p = particular_solution(spec)
    base = float(x_p @ spec.M @ x_p)
    slack = spec.c - base
    scale = 1e-12 * max(1.0, spec.c)
    if slack < -scale:
        raise EmptyIntersection(f"x_pᵀMx_p = {base:.6g} exceeds c = {spec.c:.6g}; the intersection is empty")
    if slack <= scale:
        return x_p

    basis = null_space_basis(spec.A)
    if basis.shape[1] == 0:
        raise EmptyIntersection('A has a trivial null space and x_p is off the level set')
    while True:
        w = basis @ _unit_sphere(rng, basis.shape[1])
        a = float(w @ spec.M @ w)
        if a > 0:
            break
    b = 2.0 * float(x_p @ spec.M @ w)
    c = base - spec.c
    root = math.sqrt(max(b * b - 4.0 * a * c, 0.0))
    alpha = (-b + root) / (2.0 * a) if rng.integers(2) else (-b - root) / (2.0 * a)
    return x_p + alpha * w
