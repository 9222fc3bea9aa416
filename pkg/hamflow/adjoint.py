"""
Adjoint checks for the discrete residual loss.

For grid times t_n (spacing h) write Φ_n = Φ(u, t_n) and
w_n = R_h[Φ](u, t_n) with linearization δw_n = D_next^n δΦ_{n+1} − D_now^n δΦ_n.
Stationarity of ½ Σ ‖w_n‖² in every direction ψ with ψ(t_0) = 0 reads

    (D_next^{k-1})ᵀ w_{k-1} = (D_now^k)ᵀ w_k      k = 1..N      (backward recurrence)
    (D_next^N)ᵀ w_N = 0                                          (terminal condition)

so whenever every D_next is invertible a critical point has all w_n = 0.
The checks here quantify those identities on concrete maps; they never
certify optimality.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import InvalidParameter
from .workers import parallel_map

logger = logging.getLogger('hamflow.numerics')

SINGULAR_COND = 1e12
DEGENERATE_MARGIN = 1e-12


@dataclass
class AdjointChain:
    times: np.ndarray
    states: np.ndarray
    residuals: np.ndarray
    transported: np.ndarray = None
    defects: np.ndarray = None
    condition_numbers: np.ndarray = None
    singular_steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    @property
    def forces_zero(self):
        """True when every transport matrix is invertible (critical points have w ≡ 0)."""
        return self.condition_numbers is not None and not self.singular_steps

    @property
    def max_residual(self):
        return float(np.max(np.linalg.norm(self.residuals, axis=-1)))


@dataclass
class ConditionReport:
    times: np.ndarray
    eigenvalues: np.ndarray
    min_margin: np.ndarray
    condition_number: np.ndarray
    flagged: np.ndarray
    h: float
    kind: str = 'midpoint'

    @property
    def passed(self):
        return not bool(np.any(self.flagged))

    def to_frame(self):
        return pd.DataFrame({
            'step': np.arange(len(self.times), dtype=np.int64),
            'min_margin': self.min_margin,
            'condition_number': self.condition_number,
            'flagged': self.flagged.astype(bool),
        })


@dataclass
class FirstVariation:
    lhs: float
    rhs: float
    gap: float


# ---------------------------------------------------------------------------
# Residual sequence
# ---------------------------------------------------------------------------

def _grid(grid):
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise InvalidParameter('adjoint checks need at least one grid time')
    if np.any(grid < 0):
        raise InvalidParameter('grid times must be >= 0')
    return grid


def _trajectory(flow_map, u, times, eps=None):
    """Φ(u, t) for every t; shape (len(times), 2d)."""
    u = np.asarray(u, dtype=np.float64)
    batch = np.broadcast_to(u, (len(times),) + u.shape)
    return flow_map.evaluate(batch, times, eps)


def residual_sequence(flow_map, scheme, system, u, grid, eps=None):
    """w_n = R_h[Φ](u, t_n) for n = 0..N."""
    times = _grid(grid)
    u, eps = system.coords(u, eps)
    now = _trajectory(flow_map, u, times, eps)
    nxt = _trajectory(flow_map, u, times + scheme.h, eps)
    residuals = scheme.residual(now, nxt, eps)
    return AdjointChain(times, now, residuals)


# ---------------------------------------------------------------------------
# First variation
# ---------------------------------------------------------------------------

def first_variation_check(flow_map, scheme, system, u, grid, psi, eps=None, step=1e-6):
    """
    Compare d/dε ½ Σ_n ‖R_h[Φ + εψ](u, t_n)‖² at ε = 0 (central difference)
    with Σ_n ⟨w_n, D_next ψ(t_n + h) − D_now ψ(t_n)⟩.

    ``psi(u, t)`` returns perturbations with the states' shape; ψ(u, t_0) = 0 is required.
    """
    times = _grid(grid)
    u, eps = system.coords(u, eps)
    start = np.asarray(psi(u, np.array([times[0]])), dtype=np.float64)
    if np.max(np.abs(start)) > 1e-12:
        raise InvalidParameter(f"test direction must vanish at t_0 = {times[0]}")

    now = _trajectory(flow_map, u, times, eps)
    nxt = _trajectory(flow_map, u, times + scheme.h, eps)
    psi_now = np.asarray(psi(u, times), dtype=np.float64).reshape(now.shape)
    psi_next = np.asarray(psi(u, times + scheme.h), dtype=np.float64).reshape(now.shape)

    def loss(e):
        r = scheme.residual(now + e * psi_now, nxt + e * psi_next, eps)
        return 0.5 * float(np.sum(r * r))

    lhs = (loss(step) - loss(-step)) / (2.0 * step)
    w = scheme.residual(now, nxt, eps)
    d_next, d_now = scheme.residual_jacobians(now, nxt, eps)
    variation = np.einsum('nij,nj->ni', d_next, psi_next) - np.einsum('nij,nj->ni', d_now, psi_now)
    rhs = float(np.sum(w * variation))
    gap = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-30)
    return FirstVariation(lhs, rhs, gap)


# ---------------------------------------------------------------------------
# Backward transport
# ---------------------------------------------------------------------------

def backward_transport(chain, scheme, flow_map, system, u, eps=None):
    """
    Run the backward recurrence on ``chain``.

    Fills ``transported`` (the terminal residual carried backward), ``defects``
    (per-equation stationarity defects, terminal one last) and the condition
    numbers of every D_nextᵀ. Singular steps are recorded, not raised.
    """
    times = chain.times
    if len(times) > 1 and not np.allclose(np.diff(times), scheme.h, rtol=1e-9, atol=1e-12):
        raise InvalidParameter('backward transport needs grid spacing equal to the scheme step h')
    u, eps = system.coords(u, eps)
    now = chain.states
    nxt = _trajectory(flow_map, u, times + scheme.h, eps)
    d_next, d_now = scheme.residual_jacobians(now, nxt, eps)
    w = chain.residuals
    n_last = len(times) - 1

    with np.errstate(divide='ignore', invalid='ignore'):
        conds = np.linalg.cond(d_next)
    conds = np.where(np.isfinite(conds), conds, np.inf)
    singular = [int(n) for n in np.flatnonzero(conds > SINGULAR_COND)]
    for n in singular:
        logger.warning(f"[ADJOINT] step {n} | singular transport matrix | cond: {conds[n]:.3e}")

    defects = np.empty(len(times))
    for k in range(1, len(times)):
        defects[k - 1] = np.linalg.norm(d_next[k - 1].T @ w[k - 1] - d_now[k].T @ w[k])
    defects[n_last] = np.linalg.norm(d_next[n_last].T @ w[n_last])

    transported = np.full_like(w, np.nan)
    transported[n_last] = w[n_last]
    for k in range(n_last, 0, -1):
        if (k - 1) in singular or not np.all(np.isfinite(transported[k])):
            break
        transported[k - 1] = np.linalg.solve(d_next[k - 1].T, d_now[k].T @ transported[k])

    chain.transported = transported
    chain.defects = defects
    chain.condition_numbers = conds
    chain.singular_steps = singular
    return chain


# ---------------------------------------------------------------------------
# Condition scans
# ---------------------------------------------------------------------------

def _midpoint_chunk(flow_map, system, u, times, h, eps):
    rows = []
    for t in times:
        stamp = np.full(len(u), t)
        avg = 0.5 * (flow_map.evaluate(u, stamp, eps) + flow_map.evaluate(u, stamp + h, eps))
        rows.append(np.linalg.eigvals(system.jacobian(avg, eps)))
    return np.stack(rows)


def _chunks(u, workers):
    return [c for c in np.array_split(u, max(1, min(workers, len(u)))) if len(c)]


def midpoint_condition_scan(flow_map, system, u_batch, grid, h, eps=None, workers=1):
    """
    Eigenvalues λ_i of Df at (Φ(u,t) + Φ(u,t+h))/2 and the margins
    min_i |1 + (h/2) λ_i| per grid time (minimum over the batch).
    """
    times = _grid(grid)
    u_batch = np.atleast_2d(system.coords(u_batch, eps)[0])
    if eps is not None and np.ndim(eps):
        raise InvalidParameter('condition scans take one scalar eps for the whole batch')
    jobs = [(flow_map, system, chunk, times, h, eps) for chunk in _chunks(u_batch, workers)]
    eigen = np.concatenate(parallel_map(_midpoint_chunk, jobs, workers), axis=1)
    factors = np.abs(1.0 + 0.5 * h * eigen)
    margins = factors.min(axis=(1, 2))
    with np.errstate(divide='ignore'):
        cond = np.where(margins > 0, factors.max(axis=(1, 2)) / margins, np.inf)
    flagged = margins < DEGENERATE_MARGIN
    if flagged.any():
        logger.warning(f"[ADJOINT] midpoint scan h={h} | {int(flagged.sum())} degenerate step(s)")
    return ConditionReport(times, eigen, margins, cond, flagged, h, 'midpoint')


def _implicit_chunk(flow_map, scheme, u, times, eps):
    rows = []
    for t in times:
        stamp = np.full(len(u), t)
        now = flow_map.evaluate(u, stamp, eps)
        nxt = flow_map.evaluate(u, stamp + scheme.h, eps)
        d_next, _ = scheme.residual_jacobians(now, nxt, eps)
        rows.append(np.linalg.svd(d_next, compute_uv=False))
    return np.stack(rows)


def implicit_condition_scan(flow_map, scheme, system, u_batch, grid, eps=None, workers=1):
    """Singular values of DΦ^Im (D_next) along the grid; flags steps where it is not invertible."""
    times = _grid(grid)
    u_batch = np.atleast_2d(system.coords(u_batch, eps)[0])
    jobs = [(flow_map, scheme, chunk, times, eps) for chunk in _chunks(u_batch, workers)]
    sigma = np.concatenate(parallel_map(_implicit_chunk, jobs, workers), axis=1)
    smallest = sigma.min(axis=(1, 2))
    with np.errstate(divide='ignore'):
        cond = np.where(smallest > 0, sigma.max(axis=(1, 2)) / smallest, np.inf)
    flagged = cond > SINGULAR_COND
    return ConditionReport(times, sigma, smallest, cond, flagged, scheme.h, 'implicit')
