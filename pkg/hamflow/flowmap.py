"""
Trainable flow maps.

Every map offers two entry points:

    forward(u, t, eps)   Tensor on the autodiff tape (used by the losses)
    evaluate(u, t, eps)  plain array, no tape

``u`` may itself be a Tensor when maps are composed (k-step data loss,
T0-centered map); gradients then flow through the inner map as well.
"""
import logging

import numpy as np

from .containers import load_arrays, save_arrays
from .diffnet import MLP, MLPConfig, ParameterSet, Tensor, as_tensor, concat, gate_ratio, linearized, take
from .exceptions import InvalidParameter, InvalidTime, HamflowError
from .hamiltonians import PhaseState, make_system

logger = logging.getLogger('hamflow.numerics')

DEFAULT_WIDTHS = (128, 128, 128, 128)


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def _as_batch(system, u):
    if isinstance(u, Tensor):
        if u.ndim == 1:
            return u.reshape(1, -1), True
        return u, False
    arr, _ = system.coords(u)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _column(value, n):
    value = np.asarray(value, dtype=np.float64)
    return np.broadcast_to(value.reshape(-1), (n,)).reshape(n, 1).copy()


def _data(u):
    return u.data if isinstance(u, Tensor) else u


def _vector_field_node(system, u, eps):
    """f(u) as a tape node (constant when u is a plain array)."""
    value = system.vector_field(_data(u), eps)
    if isinstance(u, Tensor) and u.requires_grad:
        return linearized(value, [(u, system.jacobian(u.data, eps))])
    return Tensor(value)


def _second_taylor_term(system, u, eps, step=1e-6):
    """Df(u) f(u); on the tape its u-Jacobian comes from central differences of Df·f."""
    def term(x):
        return np.einsum('...ij,...j->...i', system.jacobian(x, eps), system.vector_field(x, eps))

    data = _data(u)
    value = term(data)
    if not (isinstance(u, Tensor) and u.requires_grad):
        return Tensor(value)
    jac = np.empty(data.shape + (data.shape[-1],))
    for k in range(data.shape[-1]):
        delta = step * (1.0 + np.abs(data[..., k]))
        shift = np.zeros_like(data)
        shift[..., k] = delta
        jac[..., :, k] = (term(data + shift) - term(data - shift)) / (2.0 * delta[..., None])
    return linearized(value, [(u, jac)])


def _squeeze(out, single):
    return out[0] if single else out


# ---------------------------------------------------------------------------
# 1. Fixed-step map Φ_T0(u) = G(u, f(u))
# ---------------------------------------------------------------------------

class FixedStepFlowMap:
    """No identity term: the network output is the state at T0."""

    kind = 'fixed'

    def __init__(self, system, T0, hidden_widths=DEFAULT_WIDTHS, gated=True, seed=0,
                 params=None, prefix='fixed'):
        if T0 <= 0:
            raise InvalidParameter(f"T0 must be positive, got {T0}")
        self.system = system
        self.T0 = float(T0)
        self.seed = seed
        self.prefix = prefix
        self.params = params if params is not None else ParameterSet(seed)
        self.config = MLPConfig(2 * system.size, system.size, tuple(hidden_widths), gated=gated)
        self.net = MLP(self.config, self.params, prefix, np.random.default_rng(seed))

    def forward(self, u, t=None, eps=None):
        batch, _ = _as_batch(self.system, u)
        f = _vector_field_node(self.system, batch, eps)
        return self.net(concat([batch, f]))

    def evaluate(self, u, t=None, eps=None):
        batch, single = _as_batch(self.system, u)
        return _squeeze(self.forward(batch, eps=eps).data, single)

    def manifest(self):
        return {
            'kind': self.kind,
            'T0': self.T0,
            'hidden_widths': list(self.config.hidden_widths),
            'gated': self.config.gated,
            'seed': self.seed,
            'prefix': self.prefix,
        }


# ---------------------------------------------------------------------------
# 2. Variable-step Taylor-gated map Φ(u, t[, ε])
# ---------------------------------------------------------------------------

class TaylorFlowMap:
    """
    Φ(u, t) = u + Ψ(u, t) with gated Taylor prefix and remainder Δ(u, f(u), t[, ε]).

    With g_i = σ(w_i t)/w_i, s_i = σ(w_i t), σ = tanh:

        p = 0:  Ψ = s_1 Δ
        p = 1:  Ψ = g_1 f + g_1 s_2 Δ
        p = 2:  Ψ = g_1 f + ½ g_1 g_2 Df·f + g_1 g_2 s_3 Δ

    With ``orders=(p_s, p_f)`` the slow and fast coordinates of the system's
    partition each get their own order and gate rates. Rates are stored as
    log-rates so w_i = exp(·) > 0.
    """

    kind = 'variable'

    def __init__(self, system, order=2, orders=None, hidden_widths=DEFAULT_WIDTHS, gated=True, seed=0,
                 speed_preserving=False, window=1.0, slack=0.1, eps_range=None, params=None, prefix='taylor'):
        self.system = system
        self.seed = seed
        self.prefix = prefix
        self.window = float(window)
        self.slack = float(slack)
        self.eps_range = tuple(eps_range) if eps_range is not None else None
        self.conditioned = bool(system.conditioned)
        self.speed_preserving = bool(speed_preserving)
        self.params = params if params is not None else ParameterSet(seed)

        if orders is not None:
            if system.partition is None:
                raise InvalidParameter(f"per-partition orders need a slow/fast system, {system.name} has none")
            groups = [('slow', system.partition.slow, orders[0]), ('fast', system.partition.fast, orders[1])]
        else:
            groups = [('all', tuple(range(system.size)), order)]
        for _, _, p in groups:
            if p not in (0, 1, 2):
                raise InvalidParameter(f"Taylor order must be 0, 1 or 2, got {p}")
        self.order = order if orders is None else None
        self.orders = tuple(orders) if orders is not None else None
        self.groups = [(name, np.array(idx, dtype=np.intp), int(p)) for name, idx, p in groups]
        self._inverse = np.argsort(np.concatenate([idx for _, idx, _ in self.groups]))

        for name, _, p in self.groups:
            for i in range(1, p + 2):
                self.params.register(f"{prefix}.{name}.log_rate{i}", np.zeros(()))
        width_in = 2 * system.size + 1 + (1 if self.conditioned else 0)
        self.config = MLPConfig(width_in, system.size, tuple(hidden_widths), gated=gated)
        self.remainder = MLP(self.config, self.params, f"{prefix}.remainder", np.random.default_rng(seed))

    @property
    def max_order(self):
        return max(p for _, _, p in self.groups)

    def rate(self, group, i):
        return self.params[f"{self.prefix}.{group}.log_rate{i}"].exp()

    def forward(self, u, t, eps=None):
        batch, _ = _as_batch(self.system, u)
        n = batch.shape[0]
        t_col = _column(t, n)
        eps_row = None if eps is None else _column(eps, n)[:, 0]
        f = _vector_field_node(self.system, batch, eps_row)
        features = [batch, f, Tensor(t_col)]
        if self.conditioned:
            features.append(Tensor(eps_row[:, None]))
        delta = self.remainder(concat(features))
        dff = _second_taylor_term(self.system, batch, eps_row) if self.max_order >= 2 else None

        pieces = []
        for name, idx, p in self.groups:
            d = take(delta, idx)
            if p == 0:
                pieces.append((self.rate(name, 1) * t_col).tanh() * d)
                continue
            g1 = gate_ratio(self.rate(name, 1), t_col)
            f_part = take(f, idx)
            if p == 1:
                pieces.append(g1 * f_part + g1 * (self.rate(name, 2) * t_col).tanh() * d)
                continue
            g12 = g1 * gate_ratio(self.rate(name, 2), t_col)
            pieces.append(g1 * f_part + 0.5 * g12 * take(dff, idx)
                          + g12 * (self.rate(name, 3) * t_col).tanh() * d)
        psi = pieces[0] if len(pieces) == 1 else take(concat(pieces), self._inverse)
        out = as_tensor(batch) + psi
        if self.speed_preserving:
            out = self._preserve_speed(batch, out)
        return out

    def _preserve_speed(self, u, out):
        v_idx = self.system.velocity_index
        rest = np.setdiff1d(np.arange(self.system.size), v_idx)
        v_in = take(as_tensor(u), v_idx)
        v_out = take(out, v_idx)
        speed_in = ((v_in * v_in).sum(axis=-1, keepdims=True) + 1e-300).sqrt()
        speed_out = ((v_out * v_out).sum(axis=-1, keepdims=True) + 1e-300).sqrt()
        scaled = v_out * (speed_in / speed_out)
        order = np.argsort(np.concatenate([v_idx, rest]))
        return take(concat([scaled, take(out, rest)]), order)

    def evaluate(self, u, t, eps=None):
        batch, single = _as_batch(self.system, u)
        return _squeeze(self.forward(batch, t, eps).data, single)

    def manifest(self):
        return {
            'kind': self.kind,
            'order': self.order,
            'orders': list(self.orders) if self.orders else None,
            'hidden_widths': list(self.config.hidden_widths),
            'gated': self.config.gated,
            'seed': self.seed,
            'speed_preserving': self.speed_preserving,
            'window': self.window,
            'slack': self.slack,
            'eps_range': list(self.eps_range) if self.eps_range else None,
            'prefix': self.prefix,
        }


# ---------------------------------------------------------------------------
# 3. T0-centered composite Φ(Φ_T0(u), t − T0)
# ---------------------------------------------------------------------------

class T0CenteredFlowMap:
    """Fixed map to T0 followed by a variable map; both share one ParameterSet."""

    kind = 't0_centered'

    def __init__(self, system, T0, fixed_widths=DEFAULT_WIDTHS, variable_widths=DEFAULT_WIDTHS,
                 order=2, orders=None, gated=True, seed=0, window=1.0, slack=0.1):
        self.system = system
        self.seed = seed
        self.params = ParameterSet(seed)
        self.fixed = FixedStepFlowMap(system, T0, fixed_widths, gated, seed, self.params, 'fixed')
        self.variable = TaylorFlowMap(system, order, orders, variable_widths, gated, seed + 1,
                                      window=window, slack=slack, params=self.params, prefix='taylor')
        self.T0 = self.fixed.T0

    def forward(self, u, t, eps=None):
        """``t`` is measured from T0 (t − T0 in the composite's own clock)."""
        return self.variable.forward(self.fixed.forward(u, eps=eps), t, eps)

    def evaluate(self, u, t, eps=None):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.T0):
            raise InvalidTime(f"t0-centered maps need t >= T0={self.T0}, got {t.min()}")
        batch, single = _as_batch(self.system, u)
        return _squeeze(self.forward(batch, t - self.T0, eps).data, single)

    def manifest(self):
        return {
            'kind': self.kind,
            'T0': self.T0,
            'seed': self.seed,
            'fixed': self.fixed.manifest(),
            'variable': self.variable.manifest(),
        }


# ---------------------------------------------------------------------------
# 4. Analytic surrogates / test doubles
# ---------------------------------------------------------------------------

class AnalyticFlowMap:
    """
    Wraps a closed-form flow ``flow(u, t, eps) -> array``.

    Kullanım:
        exact = AnalyticFlowMap.rotation(make_system('harmonic'))
        exact.evaluate([0.0, 1.0], np.pi / 2)      # (-1, 0)
    """

    def __init__(self, system, flow, T0=None):
        self.system = system
        self.flow = flow
        self.T0 = T0
        self.kind = 'fixed' if T0 is not None else 'variable'
        self.params = ParameterSet()

    @classmethod
    def rotation(cls, system, T0=None):
        def flow(u, t, eps=None):
            t = np.asarray(t, dtype=np.float64)
            c, s = np.cos(t), np.sin(t)
            p, q = u[..., 0], u[..., 1]
            return np.stack([p * c - q * s, p * s + q * c], axis=-1)
        return cls(system, flow, T0)

    @classmethod
    def identity(cls, system, T0=None):
        return cls(system, lambda u, t, eps=None: np.array(u, dtype=np.float64, copy=True), T0)

    def _time(self, t):
        return self.T0 if self.kind == 'fixed' else t

    def forward(self, u, t=None, eps=None):
        batch, _ = _as_batch(self.system, u)
        n = batch.shape[0]
        times = _column(self._time(t), n)[:, 0]
        return Tensor(self.flow(_data(batch), times, eps))

    def evaluate(self, u, t=None, eps=None):
        batch, single = _as_batch(self.system, u)
        return _squeeze(self.forward(batch, t, eps).data, single)


class IterateFlowMap:
    """The scheme's own iterates, linearly interpolated between grid times."""

    kind = 'variable'

    def __init__(self, scheme):
        self.scheme = scheme
        self.system = scheme.system
        self.params = ParameterSet()

    def forward(self, u, t=None, eps=None):
        return Tensor(self.evaluate(u, t, eps))

    def evaluate(self, u, t, eps=None):
        batch, single = _as_batch(self.system, u)
        batch = _data(batch)
        n = batch.shape[0]
        steps = _column(t, n)[:, 0] / self.scheme.h
        k = np.floor(steps + 1e-9).astype(int)
        frac = np.clip(steps - k, 0.0, None)
        iterates = [batch]
        for _ in range(int(k.max()) + 1):
            iterates.append(self.scheme.step(iterates[-1], eps)[0])
        stack = np.stack(iterates)
        rows = np.arange(n)
        lower, upper = stack[k, rows], stack[k + 1, rows]
        out = np.where(frac[:, None] > 0, (1.0 - frac[:, None]) * lower + frac[:, None] * upper, lower)
        return _squeeze(out, single)


# ---------------------------------------------------------------------------
# 5. Operations
# ---------------------------------------------------------------------------

def eval_fixed(flow_map, system, u):
    batch, single = _as_batch(system, u)
    return _squeeze(flow_map.forward(batch).data, single)


def _check_eps(flow_map, eps):
    conditioned = getattr(flow_map, 'conditioned', False)
    if conditioned and eps is None:
        raise InvalidParameter('this flow map is eps-conditioned; supply eps')
    if not conditioned and eps is not None:
        raise InvalidParameter('this flow map is not eps-conditioned; eps must be omitted')


def _check_time(flow_map, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InvalidTime(f"flow maps are defined for t >= 0, got min t = {t.min()}")
    window = getattr(flow_map, 'window', None)
    if window is not None and np.any(t > window * (1.0 + flow_map.slack)):
        logger.warning(f"[FLOWMAP] t={t.max():.4g} outside trained window [0, {window:.4g}]")


def eval_variable(flow_map, system, u, t, eps=None):
    _check_eps(flow_map, eps)
    _check_time(flow_map, t)
    return flow_map.evaluate(u, t, eps)


def rollout_compose(flow_map, u0, dt, K, eps=None):
    """Φ^(k)(u0, dt) for k = 1..K, stacked on a leading axis."""
    if K < 0:
        raise InvalidParameter(f"K must be >= 0, got {K}")
    fixed = flow_map.kind == 'fixed'
    if fixed and dt is not None and not np.isclose(dt, flow_map.T0):
        raise InvalidParameter(f"a fixed-step map only advances by T0={flow_map.T0}, got dt={dt}")
    if not fixed:
        _check_time(flow_map, dt)
    u = np.asarray(u0.coords if isinstance(u0, PhaseState) else u0, dtype=np.float64)
    states = np.empty((K,) + u.shape)
    for k in range(K):
        try:
            u = flow_map.evaluate(u, dt, eps)
        except HamflowError as exc:
            exc.context['rollout_step'] = k + 1
            raise
        states[k] = u
    return states


def t0_centered_eval(fixed, var, system, u, t, eps=None):
    if t < fixed.T0:
        raise InvalidTime(f"t0-centered maps need t >= T0={fixed.T0}, got {t}")
    return var.evaluate(fixed.evaluate(u, eps=eps), t - fixed.T0, eps)


def taylor_consistency(flow_map, system, states, eps=None, step1=1e-5, step2=1e-3):
    """
    Max relative mismatch of one-sided finite-difference time derivatives at t=0
    against f(u) (coordinates with order >= 1) and Df(u)f(u) (order >= 2).
    """
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]

    def phi(t):
        return flow_map.evaluate(states, np.full(n, t), eps)

    mask1 = np.zeros(system.size, dtype=bool)
    mask2 = np.zeros(system.size, dtype=bool)
    for _, idx, p in flow_map.groups:
        mask1[idx] = p >= 1
        mask2[idx] = p >= 2
    report = {'first': None, 'second': None}
    if mask1.any():
        d1 = (-3.0 * phi(0.0) + 4.0 * phi(step1) - phi(2.0 * step1)) / (2.0 * step1)
        f = system.vector_field(states, eps)
        report['first'] = _relative(d1[:, mask1], f[:, mask1])
    if mask2.any():
        d2 = (2.0 * phi(0.0) - 5.0 * phi(step2) + 4.0 * phi(2.0 * step2) - phi(3.0 * step2)) / step2 ** 2
        dff = np.einsum('...ij,...j->...i', system.jacobian(states, eps), system.vector_field(states, eps))
        report['second'] = _relative(d2[:, mask2], dff[:, mask2])
    return report


def _relative(estimate, exact):
    scale = np.maximum(np.linalg.norm(exact, axis=-1), 1e-12)
    return float(np.max(np.linalg.norm(estimate - exact, axis=-1) / scale))


# ---------------------------------------------------------------------------
# 6. Checkpoints
# ---------------------------------------------------------------------------

def flowmap_manifest(flow_map):
    manifest = flow_map.manifest()
    manifest['system'] = {'name': flow_map.system.name, 'params': dict(flow_map.system.params)}
    manifest['param_count'] = flow_map.params.count
    return manifest


def _stored_order(manifest):
    # None when per-partition orders are in use
    return 2 if manifest['order'] is None else manifest['order']


def build_flowmap(manifest):
    system = make_system(manifest['system']['name'], manifest['system']['params'])
    kind = manifest['kind']
    if kind == 'fixed':
        return FixedStepFlowMap(system, manifest['T0'], manifest['hidden_widths'], manifest['gated'],
                                manifest['seed'], prefix=manifest['prefix'])
    if kind == 'variable':
        return TaylorFlowMap(system, _stored_order(manifest), manifest['orders'], manifest['hidden_widths'],
                             manifest['gated'], manifest['seed'], manifest['speed_preserving'],
                             manifest['window'], manifest['slack'], manifest['eps_range'],
                             prefix=manifest['prefix'])
    if kind == 't0_centered':
        fixed, variable = manifest['fixed'], manifest['variable']
        return T0CenteredFlowMap(system, manifest['T0'], fixed['hidden_widths'], variable['hidden_widths'],
                                 _stored_order(variable), variable['orders'], variable['gated'],
                                 manifest['seed'], variable['window'], variable['slack'])
    raise InvalidParameter(f"unknown flow map kind '{kind}'")


def save_flowmap(flow_map, path, extra=None):
    meta = flowmap_manifest(flow_map)
    meta.update(extra or {})
    return save_arrays(path, flow_map.params.arrays(), meta)


def load_flowmap(path):
    arrays, meta = load_arrays(path)
    flow_map = build_flowmap(meta)
    flow_map.params.load_arrays(arrays)
    return flow_map, meta
