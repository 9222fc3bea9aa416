"""
Training objectives and the training loop.

    residual_loss  (h/2)·mean_u Σ_n ‖R_h[Φ](u, t_n + τ)‖²
    exact_residual ∂ₜΦ − f(Φ), central difference in t
    data_loss      1/(2S) Σ_k mean_u ‖Φᵏ_T0(u) − φ_kT0(u)‖²
    joint_loss     data_loss + residual_loss of the T0-centered composite

Losses return scalar Tensors so ``diffnet.grad`` can differentiate them.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diffnet import Adam, Tensor, as_tensor, grad, linearized
from .exceptions import EmptyBatch, InvalidParameter, MissingTargets, TrainingDiverged
from .integrators import reference_flow

logger = logging.getLogger('hamflow.training')

TIME_MODES = ('grid', 'random', 'fixed')
PHASE_MODES = ('box', 'shell', 'samples')
EXACT_RESIDUAL_STEP = 5e-3


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollocationSpec:
    """
    Where (u, t[, ε]) collocation points come from.

    time_mode:  grid   N points on [0, T] shifted by τ (``shift``; 'uniform' draws τ ~ U[0, h))
                random times_per_point draws from U[0, T] per phase point
                fixed  every point at t = T0
    phase_mode: box     uniform in [low, high] per coordinate
                shell   ``shell_index`` coordinates uniform in direction with radius in ``radii``,
                        the rest uniform in the box
                samples rows of ``samples`` (e.g. an HMC-H₀ SampleSet)
    """

    dim: int
    time_mode: str = 'grid'
    T: float = 10.0
    N: int = 41
    shift: object = 0.0
    T0: float = None
    times_per_point: int = 1
    phase_mode: str = 'box'
    low: object = -1.0
    high: object = 1.0
    radii: tuple = None
    shell_index: tuple = None
    samples: np.ndarray = None
    batch_size: int = 10
    resample: bool = False
    eps_range: tuple = None

    def __post_init__(self):
        if self.time_mode not in TIME_MODES:
            raise InvalidParameter(f"time_mode must be one of {TIME_MODES}, got '{self.time_mode}'")
        if self.phase_mode not in PHASE_MODES:
            raise InvalidParameter(f"phase_mode must be one of {PHASE_MODES}, got '{self.phase_mode}'")
        if self.time_mode != 'fixed' and not self.T > 0:
            raise InvalidParameter(f"collocation horizon T must be > 0, got {self.T}")
        if self.time_mode == 'grid' and self.N < 2:
            raise InvalidParameter(f"grid collocation needs N >= 2, got {self.N}")
        if self.time_mode == 'fixed' and (self.T0 is None or self.T0 <= 0):
            raise InvalidParameter('fixed time mode needs T0 > 0')
        if self.phase_mode == 'shell':
            if self.radii is None or not 0 <= self.radii[0] < self.radii[1]:
                raise InvalidParameter(f"shell radii must satisfy 0 <= r_min < r_max, got {self.radii}")
        if self.phase_mode == 'samples' and (self.samples is None or len(self.samples) == 0):
            raise EmptyBatch('samples phase mode needs a nonempty sample array')
        if self.batch_size < 1:
            raise EmptyBatch(f"batch size must be >= 1, got {self.batch_size}")
        if self.eps_range is not None and not 0 <= self.eps_range[0] <= self.eps_range[1]:
            raise InvalidParameter(f"eps_range must satisfy 0 <= lo <= hi, got {self.eps_range}")

    def grid_times(self):
        return np.linspace(0.0, self.T, self.N)


@dataclass(frozen=True)
class NormSpec:
    mode: str = 'plain'
    blocks: tuple = None
    omega: float = 1.0

    def __post_init__(self):
        if self.mode not in ('plain', 'energy'):
            raise InvalidParameter(f"norm mode must be 'plain' or 'energy', got '{self.mode}'")
        if not self.omega > 0:
            raise InvalidParameter(f"norm weight omega must be > 0, got {self.omega}")
        if self.mode == 'energy' and (self.blocks is None or len(self.blocks) != 2):
            raise InvalidParameter('energy-balanced norm needs block sizes (3m, m)')

    @classmethod
    def for_fput(cls, m, omega):
        return cls('energy', (3 * m, m), omega)

    def weights(self, size):
        if self.mode == 'plain':
            return None
        if sum(self.blocks) != size:
            raise InvalidParameter(f"norm blocks {self.blocks} do not match state width {size}")
        return np.concatenate([np.ones(self.blocks[0]), np.full(self.blocks[1], float(self.omega))])

    def squared(self, r):
        """Row-wise ‖Ω r‖² on a Tensor (or array) of shape (n, 2d)."""
        r = as_tensor(r)
        w = self.weights(r.shape[-1])
        if w is not None:
            r = r * w
        return (r * r).sum(axis=-1)


@dataclass
class CollocationBatch:
    u: np.ndarray
    t: np.ndarray
    eps: np.ndarray = None
    n_points: int = 0

    def __len__(self):
        return len(self.t)


@dataclass
class DataSet:
    """inputs (n, 2d) with targets (n, S, 2d): targets[:, k-1] = φ_{k·T0}(inputs)."""

    inputs: np.ndarray
    targets: np.ndarray
    T0: float
    eps: np.ndarray = None

    def __len__(self):
        return len(self.inputs)

    def subset(self, index):
        eps = None if self.eps is None else self.eps[index]
        return DataSet(self.inputs[index], self.targets[index], self.T0, eps)


@dataclass
class TrainRecord:
    iterations: int = 0
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    wall_ms: float = 0.0
    seed: int = 0
    checkpoints: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.train_loss[-1] if self.train_loss else None

    def rows(self):
        """One row per evaluation checkpoint: (iteration, train_loss, test_loss, wall_ms)."""
        return [
            {'iteration': it, 'train_loss': self.train_loss[it - 1], 'test_loss': test, 'wall_ms': wall}
            for it, test, wall in self.test_loss
        ]


# ---------------------------------------------------------------------------
# Collocation
# ---------------------------------------------------------------------------

def _box(spec, rng, n):
    low = np.broadcast_to(np.asarray(spec.low, dtype=np.float64), (spec.dim,))
    high = np.broadcast_to(np.asarray(spec.high, dtype=np.float64), (spec.dim,))
    return rng.uniform(low, high, size=(n, spec.dim))


def draw_phase_points(spec, rng, n):
    if spec.phase_mode == 'samples':
        samples = np.asarray(spec.samples, dtype=np.float64)
        return samples[rng.choice(len(samples), size=n, replace=len(samples) < n)]
    u = _box(spec, rng, n)
    if spec.phase_mode == 'shell':
        index = np.asarray(spec.shell_index if spec.shell_index is not None else range(spec.dim))
        direction = rng.standard_normal((n, len(index)))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = rng.uniform(spec.radii[0], spec.radii[1], size=(n, 1))
        u[:, index] = radius * direction
    return u


def sample_collocation(spec, rng, h=None):
    """Draw one batch of (u, t[, ε]) pairs. Phase points are repeated across their times."""
    points = draw_phase_points(spec, rng, spec.batch_size)
    eps = None
    if spec.eps_range is not None:
        eps = rng.uniform(spec.eps_range[0], spec.eps_range[1], size=spec.batch_size)

    if spec.time_mode == 'grid':
        tau = spec.shift
        if tau == 'uniform':
            if h is None:
                raise InvalidParameter("shift='uniform' needs the scheme step h")
            tau = rng.uniform(0.0, h)
        elif h is not None and not 0 <= float(tau) < h:
            raise InvalidParameter(f"grid shift must lie in [0, h), got {tau}")
        times = spec.grid_times() + float(tau)
        per_point = np.tile(times, (spec.batch_size, 1))
    elif spec.time_mode == 'random':
        per_point = rng.uniform(0.0, spec.T, size=(spec.batch_size, spec.times_per_point))
    else:
        per_point = np.full((spec.batch_size, 1), float(spec.T0))

    repeats = per_point.shape[1]
    u = np.repeat(points, repeats, axis=0)
    eps = None if eps is None else np.repeat(eps, repeats)
    return CollocationBatch(u, per_point.reshape(-1), eps, spec.batch_size)


def shift_coverage(spec, h):
    """
    Do the intervals [t_n, t_n + h] of a grid cover [0, T]?

    Returns (covered, largest uncovered gap).
    """
    spacing = spec.T / (spec.N - 1)
    gap = max(0.0, spacing - h)
    return gap == 0.0, gap


def progressive_horizon(iteration, schedule=None, T=None):
    """T grows linearly from ``T_start`` to ``T`` over ``ramp_iterations``; constant without a schedule."""
    if not schedule:
        return T
    start, end, ramp = schedule['T_start'], schedule['T'], max(int(schedule['ramp_iterations']), 1)
    return start + (end - start) * min(iteration / ramp, 1.0)


def holdout_split(n, fraction=0.1, rng=None):
    """Deterministic (train, test) index split with ``fraction`` held out."""
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(n)
    n_test = int(round(n * fraction)) if n > 1 else 0
    if fraction > 0 and n > 1:
        n_test = max(n_test, 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------

def _residual_node(flow_map, scheme, u, t, eps=None):
    now = flow_map.forward(u, t, eps)
    nxt = flow_map.forward(u, np.asarray(t) + scheme.h, eps)
    value = scheme.residual(now.data, nxt.data, eps)
    d_next, d_now = scheme.residual_jacobians(now.data, nxt.data, eps)
    return linearized(value, [(nxt, d_next), (now, -d_now)])


def scheme_residual(flow_map, scheme, system, u, t, eps=None):
    """Φ^Im_h(Φ(u, t+h)) − Φ^Ex_h(Φ(u, t)) as an array."""
    u, eps = system.coords(u, eps)
    single = u.ndim == 1
    out = _residual_node(flow_map, scheme, u[None, :] if single else u, t, eps).data
    return out[0] if single else out


def _exact_residual_node(flow_map, system, u, t, eps=None, step=EXACT_RESIDUAL_STEP):
    # five-point stencil; t - 2·step < 0 is fine, the gates are odd in t
    t = np.asarray(t, dtype=np.float64)
    far = flow_map.forward(u, t + 2 * step, eps) - flow_map.forward(u, t - 2 * step, eps)
    near = flow_map.forward(u, t + step, eps) - flow_map.forward(u, t - step, eps)
    centre = flow_map.forward(u, t, eps)
    f = linearized(system.vector_field(centre.data, eps), [(centre, system.jacobian(centre.data, eps))])
    return (near * 8.0 - far) * (1.0 / (12.0 * step)) - f


def exact_residual(flow_map, system, u, t, eps=None):
    """∂ₜΦ(u, t) − f(Φ(u, t)) with a fourth-order central difference in t."""
    u, eps = system.coords(u, eps)
    single = u.ndim == 1
    out = _exact_residual_node(flow_map, system, u[None, :] if single else u, t, eps).data
    return out[0] if single else out


def _check_batch(batch):
    if batch is None or len(batch) == 0 or batch.n_points == 0:
        raise EmptyBatch('collocation batch is empty')


def residual_loss(flow_map, scheme, system, colloc, norm=None, rng=None, batch=None):
    """(h/2)·mean over phase points of Σ_times ‖R_h‖²_norm."""
    norm = norm or NormSpec()
    if batch is None:
        batch = sample_collocation(colloc, rng if rng is not None else np.random.default_rng(0), scheme.h)
    _check_batch(batch)
    squared = norm.squared(_residual_node(flow_map, scheme, batch.u, batch.t, batch.eps))
    return squared.sum() * (0.5 * scheme.h / batch.n_points)


def exact_residual_loss(flow_map, system, colloc, norm=None, rng=None, batch=None):
    """Exact-residual baseline; the time weight is half the mean collocation spacing."""
    norm = norm or NormSpec()
    if batch is None:
        batch = sample_collocation(colloc, rng if rng is not None else np.random.default_rng(0))
    _check_batch(batch)
    per_point = len(batch) / batch.n_points
    weight = colloc.T / per_point if colloc.time_mode != 'fixed' else 1.0
    squared = norm.squared(_exact_residual_node(flow_map, system, batch.u, batch.t, batch.eps))
    return squared.sum() * (0.5 * weight / batch.n_points)


# ---------------------------------------------------------------------------
# Data losses
# ---------------------------------------------------------------------------

def build_dataset(system, inputs, T0, S=1, tol=1e-10, eps=None):
    """k-step reference targets φ_{k·T0}(u) for k = 1..S."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise EmptyBatch('dataset needs at least one input state')
    targets = np.empty((len(inputs), S, inputs.shape[-1]))
    u = inputs
    # the whole batch advances in lockstep
    for k in range(S):
        u = reference_flow(system, u, T0, tol=tol, eps=eps)
        targets[:, k] = u
    return DataSet(inputs, targets, T0, eps)


def data_loss(fixed_map, dataset, S=1, norm=None):
    """1/(2S) Σ_k mean_u ‖Φᵏ_T0(u) − φ_{kT0}(u)‖²_norm."""
    norm = norm or NormSpec()
    if len(dataset) == 0:
        raise EmptyBatch('data loss needs a nonempty dataset')
    if dataset.targets.ndim != 3 or dataset.targets.shape[1] < S:
        have = dataset.targets.shape[1] if dataset.targets.ndim == 3 else 0
        raise MissingTargets(f"data loss with S={S} needs {S} targets per input, dataset has {have}")
    state = Tensor(dataset.inputs)
    total = None
    for k in range(S):
        state = fixed_map.forward(state, eps=dataset.eps)
        term = norm.squared(state - dataset.targets[:, k]).mean()
        total = term if total is None else total + term
    return total * (0.5 / S)


class _CenteredMap:
    """Φ(Φ_T0(u), t) with t measured from T0."""

    def __init__(self, fixed_map, var_map):
        self.fixed_map = fixed_map
        self.var_map = var_map

    def forward(self, u, t, eps=None):
        return self.var_map.forward(self.fixed_map.forward(u, eps=eps), t, eps)


def joint_loss(fixed_map, var_map, scheme, system, dataset, colloc, norm=None, S=1, rng=None, batch=None):
    """Data loss of Φ_T0 plus the residual loss of the T0-centered composite on [T0, T0 + T]."""
    return (data_loss(fixed_map, dataset, S, norm)
            + residual_loss(_CenteredMap(fixed_map, var_map), scheme, system, colloc, norm, rng, batch))


# ---------------------------------------------------------------------------
# Objectives (closures for train)
# ---------------------------------------------------------------------------

class ResidualObjective:
    """
    Scheme (or exact) residual objective.

    With ``resample`` off the phase points are drawn once and split 90/10 into
    train/test; otherwise each iteration draws a fresh batch and the test batch
    is drawn once up front.
    """

    def __init__(self, flow_map, scheme, system, colloc, norm=None, seed=0, exact=False,
                 schedule=None, test_fraction=0.1):
        self.flow_map = flow_map
        self.scheme = scheme
        self.system = system
        self.colloc = colloc
        self.norm = norm or NormSpec()
        self.exact = exact
        self.schedule = schedule
        rng = np.random.default_rng(seed)
        pool = replace(colloc, batch_size=max(colloc.batch_size, 2)) if test_fraction else colloc
        frozen = self._draw(pool, rng)
        train_idx, test_idx = holdout_split(pool.batch_size, test_fraction, rng)
        self.train_batch = _select_points(frozen, train_idx)
        self.test_batch = _select_points(frozen, test_idx) if len(test_idx) else None

    def _draw(self, spec, rng):
        return sample_collocation(spec, rng, None if self.exact else self.scheme.h)

    def _loss(self, batch, colloc):
        if self.exact:
            return exact_residual_loss(self.flow_map, self.system, colloc, self.norm, batch=batch)
        return residual_loss(self.flow_map, self.scheme, self.system, colloc, self.norm, batch=batch)

    def _colloc(self, iteration):
        T = progressive_horizon(iteration, self.schedule, self.colloc.T)
        return self.colloc if T == self.colloc.T else replace(self.colloc, T=T)

    def __call__(self, iteration, rng):
        colloc = self._colloc(iteration)
        if self.colloc.resample or colloc is not self.colloc:
            return self._loss(self._draw(colloc, rng), colloc)
        return self._loss(self.train_batch, colloc)

    def test(self):
        if self.test_batch is None:
            return None
        return float(self._loss(self.test_batch, self.colloc).data)


def _select_points(batch, point_index):
    per_point = len(batch) // batch.n_points
    rows = (np.asarray(point_index)[:, None] * per_point + np.arange(per_point)).reshape(-1)
    eps = None if batch.eps is None else batch.eps[rows]
    return CollocationBatch(batch.u[rows], batch.t[rows], eps, len(point_index))


class DataObjective:
    def __init__(self, fixed_map, dataset, S=1, norm=None, batch_size=None, seed=0, test_fraction=0.1):
        self.fixed_map = fixed_map
        self.S = S
        self.norm = norm or NormSpec()
        self.batch_size = batch_size
        train_idx, test_idx = holdout_split(len(dataset), test_fraction, np.random.default_rng(seed))
        self.train_set = dataset.subset(train_idx)
        self.test_set = dataset.subset(test_idx) if len(test_idx) else None

    def _batch(self, rng):
        if not self.batch_size or self.batch_size >= len(self.train_set):
            return self.train_set
        return self.train_set.subset(rng.choice(len(self.train_set), self.batch_size, replace=False))

    def __call__(self, iteration, rng):
        return data_loss(self.fixed_map, self._batch(rng), self.S, self.norm)

    def test(self):
        if self.test_set is None:
            return None
        return float(data_loss(self.fixed_map, self.test_set, self.S, self.norm).data)


class JointObjective:
    def __init__(self, fixed_map, var_map, scheme, system, dataset, colloc, norm=None, S=1,
                 batch_size=None, seed=0, test_fraction=0.1):
        self.data = DataObjective(fixed_map, dataset, S, norm, batch_size, seed, test_fraction)
        self.residual = ResidualObjective(_CenteredMap(fixed_map, var_map), scheme, system, colloc, norm,
                                          seed + 1, test_fraction=test_fraction)

    def __call__(self, iteration, rng):
        return self.data(iteration, rng) + self.residual(iteration, rng)

    def test(self):
        parts = [self.data.test(), self.residual.test()]
        if all(p is None for p in parts):
            return None
        return float(sum(p for p in parts if p is not None))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = None


def train(objective, params, optimizer=None, iterations=1000, eval_every=1000, seed=0,
          checkpoint=None, record_timing=True):
    """
    Adam on ``objective(iteration, rng) -> loss Tensor``.

    ``objective.test()`` (when present) is evaluated every ``eval_every``
    iterations and at the end; ``checkpoint(iteration)`` is called at the same
    points.
    """
    optimizer = optimizer or OptimizerConfig()
    adam = Adam(params, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.lr_decay)
    rng = np.random.default_rng(seed)
    record = TrainRecord(seed=seed)
    test_fn = getattr(objective, 'test', None)
    started = time.perf_counter()

    for iteration in range(1, iterations + 1):
        loss = objective(iteration, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at iteration {iteration}", iteration=iteration)
        adam.step(grad(loss, params))
        if not params.all_finite():
            raise TrainingDiverged(f"parameters became non-finite at iteration {iteration}", iteration=iteration)
        record.train_loss.append(value)
        record.iterations = iteration

        if iteration % eval_every == 0 or iteration == iterations:
            test = test_fn() if test_fn else None
            elapsed = (time.perf_counter() - started) * 1000 if record_timing else 0.0
            record.test_loss.append((iteration, test, elapsed))
            test_text = f"{test:.3e}" if test is not None else '-'
            logger.info(f"[TRAIN] iter {iteration} | train_loss: {value:.3e} | test_loss: {test_text} | süre: {elapsed:.1f}ms")
            if checkpoint is not None:
                record.checkpoints.append(checkpoint(iteration))

    record.wall_ms = (time.perf_counter() - started) * 1000 if record_timing else 0.0
    return record
