"""
Long-time evaluation: error metrics, FPUT energy profiles, Poincaré sections,
error-growth fits, benchmarks and CSV/JSON export.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.serializers.json import DjangoJSONEncoder
from scipy.spatial.distance import directed_hausdorff, pdist

from .exceptions import InvalidParameter, UndefinedMetric
from .flowmap import rollout_compose
from .hamiltonians import stiff_spring_energies
from .integrators import Trajectory, reference_flow
from .workers import parallel_map

logger = logging.getLogger('hamflow.runs')

CSV_FLOAT_FORMAT = '%.17g'


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ErrorSeries:
    times: np.ndarray
    traj_err: np.ndarray
    energy_err: np.ndarray
    delta0: float = None
    rate: float = None
    worst_case: bool = None

    def to_frame(self):
        return pd.DataFrame({'t': self.times, 'traj_err': self.traj_err, 'energy_err': self.energy_err})


@dataclass
class PoincareSection:
    times: np.ndarray
    points: np.ndarray
    section: str = 'theta=0 (v_y = 0, v_x > 0)'
    interpolation: str = 'linear'
    direction: str = 'any'

    def __len__(self):
        return len(self.times)

    def to_frame(self):
        points = self.points.reshape(-1, 2)
        return pd.DataFrame({'t': self.times, 'x': points[:, 0], 'y': points[:, 1]})


@dataclass
class EnergyProfile:
    times: np.ndarray
    stiff: np.ndarray
    total: np.ndarray
    energy: np.ndarray

    def to_frame(self):
        frame = pd.DataFrame({'t': self.times})
        for j in range(self.stiff.shape[1]):
            frame[f"I{j + 1}"] = self.stiff[:, j]
        frame['I'] = self.total
        frame['H'] = self.energy
        return frame


@dataclass
class BenchmarkReport:
    solver: str
    batch: int
    T: float
    wall_ms: float
    per_traj_ms: float
    traj_err: float
    H_err: float
    workers: int = 1


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def traj_error(prediction, reference):
    """‖ũ − u‖₂ along the last axis (a float for single states)."""
    diff = np.asarray(prediction, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    out = np.linalg.norm(diff, axis=-1)
    return float(out) if out.ndim == 0 else out


def energy_error(system, prediction, reference, eps=None):
    """|H(ũ) − H(u)| / |H(u)|."""
    h_ref = np.asarray(system.energy(reference, eps), dtype=np.float64)
    if np.any(np.abs(h_ref) < 1e-300):
        raise UndefinedMetric('relative energy error is undefined for a reference with H = 0')
    out = np.abs(system.energy(prediction, eps) - h_ref) / np.abs(h_ref)
    return float(out) if np.ndim(out) == 0 else out


def _unpack(trajectory):
    if isinstance(trajectory, Trajectory):
        return trajectory.times, trajectory.states
    times, states = trajectory
    return np.asarray(times, dtype=np.float64), np.asarray(states, dtype=np.float64)


def energy_exchange_profile(system, trajectory, stride=1):
    """(t, I_1..I_m, I, H) every ``stride`` samples of an FPUT trajectory."""
    if stride < 1:
        raise InvalidParameter(f"stride must be >= 1, got {stride}")
    times, states = _unpack(trajectory)
    times, states = times[::stride], states[::stride]
    stiff, total = stiff_spring_energies(system, states)
    return EnergyProfile(times, np.atleast_2d(stiff), np.atleast_1d(total), np.atleast_1d(system.energy(states)))


def poincare_section(trajectory, velocity_index=(0, 1), position_index=(2, 3), direction='any'):
    """
    Crossings of v_y = 0 with v_x > 0, located by linear interpolation in time.

    ``direction`` picks sign changes of v_y: 'ascending' (− to +),
    'descending' (+ to −) or 'any'. For B > 0 the gyration turns clockwise,
    so the θ = 0 crossings there are descending.
    """
    if direction not in ('any', 'ascending', 'descending'):
        raise InvalidParameter(f"direction must be 'any', 'ascending' or 'descending', got '{direction}'")
    times, states = _unpack(trajectory)
    vx = states[:, velocity_index[0]]
    vy = states[:, velocity_index[1]]
    up = (vy[:-1] < 0) & (vy[1:] >= 0)
    down = (vy[:-1] > 0) & (vy[1:] <= 0)
    mask = {'any': up | down, 'ascending': up, 'descending': down}[direction]

    out_t, out_xy = [], []
    # the pair scan only sees zeros at the right end of a pair
    if len(vy) > 1 and vy[0] == 0 and vx[0] > 0:
        heading = 'ascending' if vy[1] > 0 else 'descending' if vy[1] < 0 else None
        if heading is not None and direction in ('any', heading):
            out_t.append(times[0])
            out_xy.append(states[0][list(position_index)])
    for k in np.flatnonzero(mask):
        frac = vy[k] / (vy[k] - vy[k + 1])
        state = states[k] + frac * (states[k + 1] - states[k])
        if state[velocity_index[0]] <= 0:
            continue
        out_t.append(times[k] + frac * (times[k + 1] - times[k]))
        out_xy.append(state[list(position_index)])
    points = np.array(out_xy, dtype=np.float64).reshape(-1, 2)
    return PoincareSection(np.array(out_t, dtype=np.float64), points, direction=direction)


def section_mismatch(section, reference):
    """Symmetric Hausdorff distance between two section clouds over the reference cloud diameter."""
    a = section.points if isinstance(section, PoincareSection) else np.asarray(section, dtype=np.float64)
    b = reference.points if isinstance(reference, PoincareSection) else np.asarray(reference, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetric('section mismatch needs two nonempty point clouds')
    distance = max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])
    diameter = float(pdist(b).max()) if len(b) > 1 else 0.0
    if diameter == 0.0:
        raise UndefinedMetric('reference section has zero diameter')
    return distance / diameter


def fit_error_growth(series, times=None):
    """
    Least-squares fit log e(t) = log δ0 + L t over the strictly positive errors.

    Accepts an ErrorSeries (uses traj_err and stores the fit on it) or an
    error array plus ``times``. L < 0 marks the series as not worst-case.
    """
    if isinstance(series, ErrorSeries):
        times, errors = series.times, series.traj_err
    else:
        errors = np.asarray(series, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
    keep = errors > 0
    if keep.sum() < 2:
        raise UndefinedMetric('error-growth fit needs at least two positive errors')
    rate, intercept = np.polyfit(times[keep], np.log(errors[keep]), 1)
    delta0, rate = float(np.exp(intercept)), float(rate)
    if isinstance(series, ErrorSeries):
        series.delta0, series.rate, series.worst_case = delta0, rate, rate >= 0
    return delta0, rate


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def reference_rollout(system, u0, dt, K, eps=None, tol=1e-10):
    states = np.empty((K,) + np.shape(u0))
    u = np.asarray(u0, dtype=np.float64)
    for k in range(K):
        u = reference_flow(system, u, dt, tol=tol, eps=eps)
        states[k] = u
    return states


def rollout_errors(flow_map, system, u0, dt, K, eps=None, reference_tol=1e-10):
    """ErrorSeries of a K-step rollout against the reference flow, sampled at the map's step."""
    if flow_map.kind == 'fixed':
        dt = flow_map.T0
    u0 = np.asarray(u0, dtype=np.float64)
    predicted = rollout_compose(flow_map, u0, dt, K, eps)
    reference = reference_rollout(system, u0, dt, K, eps, reference_tol)
    times = dt * np.arange(K + 1)
    traj = np.concatenate([[0.0], traj_error(predicted, reference)])
    energy = np.concatenate([[0.0], energy_error(system, predicted, reference, eps)])
    return ErrorSeries(times, traj, energy)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

class SchemeSolver:
    """Advance with a one-step scheme; a short final step covers T not divisible by h."""

    def __init__(self, scheme, eps=None, name=None):
        self.scheme = scheme
        self.eps = eps
        self.name = name or f"{scheme.name}(h={scheme.h:g})"

    def advance(self, u, T):
        n = int(np.floor(T / self.scheme.h + 1e-9))
        for _ in range(n):
            u = self.scheme.step(u, self.eps)[0]
        rest = T - n * self.scheme.h
        if rest > 1e-12 * max(T, 1.0):
            u = self.scheme.with_step(rest).step(u, self.eps)[0]
        return u


class FlowMapSolver:
    """Advance by composing a flow map with step dt (T0 for fixed maps)."""

    def __init__(self, flow_map, dt=None, eps=None, name=None):
        self.flow_map = flow_map
        self.dt = flow_map.T0 if flow_map.kind == 'fixed' else dt
        if self.dt is None or self.dt <= 0:
            raise InvalidParameter('FlowMapSolver needs a positive dt')
        self.eps = eps
        self.name = name or f"flowmap(dt={self.dt:g})"

    def advance(self, u, T):
        K = int(round(T / self.dt))
        if not np.isclose(K * self.dt, T):
            raise InvalidParameter(f"T={T} is not a multiple of the map step {self.dt}")
        for _ in range(K):
            u = self.flow_map.evaluate(u, self.dt, self.eps)
        return u


def _advance_chunk(solver, u, T):
    return solver.advance(u, T)


def _advance(solver, u, T, workers):
    if workers <= 1 or len(u) <= 1:
        return solver.advance(u, T)
    chunks = [c for c in np.array_split(u, min(workers, len(u))) if len(c)]
    return np.concatenate(parallel_map(_advance_chunk, [(solver, c, T) for c in chunks], workers))


def benchmark(solvers, system, u_batch, T_s, repeats=3, horizon=1, eps=None, workers=1,
              reference=None, record_timing=True):
    """
    Time each solver over ``horizon``·T_s on the whole batch and score it at
    that time against the reference flow. One warm call per solver is discarded.
    """
    solvers = list(solvers)
    if not solvers:
        return []
    u_batch = np.atleast_2d(system.coords(u_batch, eps)[0])
    T = float(T_s) * horizon
    if reference is None:
        reference = np.stack([reference_flow(system, u, T, eps=eps) for u in u_batch])

    reports = []
    for solver in solvers:
        _advance(solver, u_batch, T, workers)
        walls = []
        for _ in range(max(1, repeats)):
            started = time.perf_counter()
            final = _advance(solver, u_batch, T, workers)
            walls.append((time.perf_counter() - started) * 1000)
        wall = float(np.mean(walls)) if record_timing else 0.0
        report = BenchmarkReport(
            solver.name, len(u_batch), T, wall, wall / len(u_batch),
            float(np.mean(traj_error(final, reference))),
            float(np.mean(energy_error(system, final, reference, eps))),
            workers,
        )
        logger.info(f"[BENCH] {report.solver} | batch: {report.batch} | T: {T:g} | süre: {wall:.1f}ms "
                    f"| traj_err: {report.traj_err:.2e} | H_err: {report.H_err:.2e}")
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def trajectory_frame(trajectory):
    times, states = _unpack(trajectory)
    states = states.reshape(len(times), -1)
    frame = pd.DataFrame(states, columns=[f"u{i}" for i in range(states.shape[1])])
    frame.insert(0, 't', times)
    return frame


def to_frame(record):
    """DataFrame for any exportable record type."""
    if isinstance(record, pd.DataFrame):
        return record
    if isinstance(record, Trajectory):
        return trajectory_frame(record)
    if isinstance(record, (list, tuple)) and all(isinstance(r, BenchmarkReport) for r in record):
        columns = [f for f in BenchmarkReport.__dataclass_fields__]
        return pd.DataFrame([asdict(r) for r in record], columns=columns)
    if hasattr(record, 'to_frame'):
        return record.to_frame()
    if hasattr(record, 'rows'):
        return pd.DataFrame(record.rows(), columns=['iteration', 'train_loss', 'test_loss', 'wall_ms'])
    raise InvalidParameter(f"don't know how to export {type(record).__name__}")


class RecordEncoder(DjangoJSONEncoder):
    def default(self, o):
        if isinstance(o, np.generic):
            return o.item()
        return super().default(o)


def render_records(frame):
    """DataFrame -> JSON list of row dicts; NaN and inf become null."""
    frame = frame.replace([np.inf, -np.inf], np.nan)
    records = frame.astype(object).where(frame.notna(), None).to_dict(orient='records')
    return json.dumps(records, cls=RecordEncoder)


def export_results(record, path, fmt='csv', float_format=CSV_FLOAT_FORMAT):
    """Write ``record`` as CSV (pandas, round-trip precision) or JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = to_frame(record)
    if fmt == 'csv':
        frame.to_csv(path, index=False, float_format=float_format)
    elif fmt == 'json':
        path.write_text(render_records(frame))
    else:
        raise InvalidParameter(f"export format must be 'csv' or 'json', got '{fmt}'")
    return path


def read_results(path):
    path = Path(path)
    if path.suffix == '.json':
        return pd.DataFrame(json.loads(path.read_text()))
    return pd.read_csv(path, float_precision='round_trip')
