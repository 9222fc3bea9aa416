"""
Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor keeps its value, the parents it was computed from and a closure
that pushes its gradient back to them. ``backward()`` on a scalar root walks
the tape in reverse topological order. Only the operations the flow maps and
losses need are implemented; anything with a known Jacobian (scheme maps,
vector fields) enters the tape through ``linearized``.
"""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonScalarRoot, ShapeMismatch, InvalidParameter

GATE_SERIES_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# 1. Tensor + tape
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), op=''):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(p for p in parents if p.requires_grad)
        self.requires_grad = requires_grad or bool(self.parents)
        self.op = op
        self._backward = None

    @property
    def data(self):
        return self._data

    @data.setter
    def data(self, value):
        # 0-d parameters stay ndarrays, never numpy scalars
        self._data = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    @staticmethod
    def _result(data, parents, op, backward):
        out = Tensor(data, parents=parents, op=op)
        if out.requires_grad:
            out._backward = lambda: backward(out.grad)
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)
        return self._result(self.data + other.data, (self, other), 'add', backward)

    __radd__ = __add__

    def __neg__(self):
        return self._result(-self.data, (self,), 'neg', lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        return self._result(self.data * other.data, (self, other), 'mul', backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))
        return self._result(self.data / other.data, (self, other), 'div', backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, power):
        if isinstance(power, Tensor):
            raise InvalidParameter('only constant exponents are supported')

        def backward(g):
            self._accumulate(g * power * self.data ** (power - 1))
        return self._result(self.data ** power, (self,), 'pow', backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeMismatch(f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeMismatch(f"matmul shape mismatch {self.shape} @ {other.shape}")

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)
        return self._result(self.data @ other.data, (self, other), 'matmul', backward)

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)
        return self._result(self.data[index], (self,), 'getitem', backward)

    # -- reductions / elementwise ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))
        return self._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), 'sum', backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def tanh(self):
        value = np.tanh(self.data)
        return self._result(value, (self,), 'tanh', lambda g: self._accumulate(g * (1.0 - value * value)))

    def exp(self):
        value = np.exp(self.data)
        return self._result(value, (self,), 'exp', lambda g: self._accumulate(g * value))

    def sqrt(self):
        value = np.sqrt(self.data)
        return self._result(value, (self,), 'sqrt', lambda g: self._accumulate(0.5 * g / value))

    def reshape(self, *shape):
        return self._result(self.data.reshape(*shape), (self,), 'reshape',
                            lambda g: self._accumulate(g.reshape(self.shape)))

    # -- backward -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise NonScalarRoot(f"backward() needs a scalar root, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((parent, False) for parent in node.parents)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for tensor, piece in zip(tensors, np.split(g, splits, axis=axis)):
            tensor._accumulate(piece)
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat', backward)


def take(x, indices):
    """Gather along the last axis."""
    indices = np.asarray(indices, dtype=np.intp)
    return x[..., indices]


def linearized(value, inputs):
    """
    Tape node for y = F(x1, x2, ...) whose value and Jacobians are already known.

    ``inputs`` is a list of (tensor, jacobian) with jacobian of shape
    (..., len(y), len(x)); the backward pass applies Jᵀ to the incoming gradient.
    """
    tensors = [as_tensor(t) for t, _ in inputs]

    def backward(g):
        for tensor, (_, jac) in zip(tensors, inputs):
            tensor._accumulate(np.einsum('...ij,...i->...j', jac, g))
    return Tensor._result(value, tensors, 'linearized', backward)


def gate_ratio(w, t):
    """
    σ(w t)/w with σ = tanh, differentiable in w.

    For |w t| < 1e-4 the odd series t − w²t³/3 + 2w⁴t⁵/15 replaces the
    quotient; both branches agree to ~1e-16 relative there.
    """
    w = as_tensor(w)
    t = np.asarray(t, dtype=np.float64)
    wv = w.data
    x = wv * t
    small = np.abs(x) < GATE_SERIES_THRESHOLD
    safe_w = np.where(small, 1.0, wv)
    th = np.tanh(np.where(small, 0.0, x))
    value = np.where(small, t - wv * wv * t ** 3 / 3.0 + 2.0 * wv ** 4 * t ** 5 / 15.0, th / safe_w)
    deriv = np.where(
        small,
        -2.0 * wv * t ** 3 / 3.0 + 8.0 * wv ** 3 * t ** 5 / 15.0,
        (t * (1.0 - th * th) * safe_w - th) / (safe_w * safe_w),
    )
    return Tensor._result(value, (w,), 'gate_ratio', lambda g: w._accumulate(g * deriv))


# ---------------------------------------------------------------------------
# 2. Parameters
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named trainable arrays (weights, biases, gates) sharing one seed."""

    def __init__(self, seed=None):
        self.seed = seed
        self._tensors = {}

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def register(self, name, array):
        if name in self._tensors:
            raise InvalidParameter(f"parameter '{name}' registered twice")
        self._tensors[name] = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    @property
    def count(self):
        return int(sum(t.data.size for t in self._tensors.values()))

    def arrays(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays):
        missing = set(self._tensors) - set(arrays)
        if missing:
            raise ShapeMismatch(f"checkpoint lacks parameters {sorted(missing)}")
        for name, tensor in self._tensors.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeMismatch(f"parameter '{name}' has shape {tensor.shape}, checkpoint has {value.shape}")
            tensor.data = value.copy()

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def grads(self):
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._tensors.items()
        }

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())


def jitter_parameters(params, rng, scale=0.1):
    """Add N(0, scale²) noise to every parameter (tests start away from the zero init)."""
    for _, tensor in params.items():
        tensor.data = tensor.data + scale * rng.standard_normal(tensor.shape)


# ---------------------------------------------------------------------------
# 3. MLP with gated skip blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPConfig:
    input_width: int
    output_width: int
    hidden_widths: tuple = (128, 128, 128, 128)
    activation: str = 'tanh'
    gated: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'hidden_widths', tuple(int(w) for w in self.hidden_widths))
        widths = (self.input_width, self.output_width) + self.hidden_widths
        if any(int(w) < 1 for w in widths):
            raise InvalidParameter(f"MLP widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidParameter(f"unknown activation '{self.activation}'")
        if self.gated and len(set(self.hidden_widths)) > 1:
            raise InvalidParameter('gated blocks need equal hidden widths')

    def as_dict(self):
        return {
            'input_width': self.input_width,
            'output_width': self.output_width,
            'hidden_widths': list(self.hidden_widths),
            'activation': self.activation,
            'gated': self.gated,
        }


ACTIVATIONS = {
    'tanh': Tensor.tanh,
    'identity': lambda x: x,
}


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """
    x → act(W_in x + b_in) → [gated blocks] → W_out h + b_out.

    A gated block computes z = act(W h + b) and returns g·z + (1−g)·h with a
    scalar gate g starting at 0, so every block is the identity at init. The
    output layer starts at zero. Without gating the hidden layers are plain
    act(W h + b) stacks.
    """

    def __init__(self, config, params, prefix='net', rng=None):
        self.config = config
        self.params = params
        self.prefix = prefix
        if rng is not None:
            self._initialize(rng)

    def _name(self, *parts):
        return '.'.join((self.prefix,) + parts)

    def _layers(self):
        widths = (self.config.input_width,) + self.config.hidden_widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            yield ('input' if i == 0 else f'block{i}'), fan_in, fan_out

    def _initialize(self, rng):
        for layer, fan_in, fan_out in self._layers():
            self.params.register(self._name(layer, 'weight'), glorot_uniform(rng, fan_in, fan_out))
            self.params.register(self._name(layer, 'bias'), np.zeros(fan_out))
            if self.config.gated and layer != 'input':
                self.params.register(self._name(layer, 'gate'), np.zeros(()))
        last = self.config.hidden_widths[-1] if self.config.hidden_widths else self.config.input_width
        self.params.register(self._name('output', 'weight'), np.zeros((last, self.config.output_width)))
        self.params.register(self._name('output', 'bias'), np.zeros(self.config.output_width))

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_width:
            raise ShapeMismatch(
                f"{self.prefix} expects input (batch, {self.config.input_width}), got {x.shape}"
            )
        act = ACTIVATIONS[self.config.activation]
        h = x
        for layer, _, _ in self._layers():
            z = act(h @ self.params[self._name(layer, 'weight')] + self.params[self._name(layer, 'bias')])
            if self.config.gated and layer != 'input':
                gate = self.params[self._name(layer, 'gate')]
                h = gate * z + (1.0 - gate) * h
            else:
                h = z
        return h @ self.params[self._name('output', 'weight')] + self.params[self._name('output', 'bias')]


def forward(net, x, record=False):
    """
    Evaluate ``net`` on a vector (width,) or batch (n, width).

    With ``record=True`` the Tensor (and its tape) is returned; otherwise a
    plain array with the input's leading shape.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = data.ndim == 1
    if data.shape[-1] != net.config.input_width:
        raise ShapeMismatch(f"expected input width {net.config.input_width}, got {data.shape[-1]}")
    out = net(x.reshape(1, -1) if single and isinstance(x, Tensor) else (data[None, :] if single else x))
    if record:
        return out
    return out.data[0] if single else out.data


def grad(loss, params):
    """Reverse-mode gradient of a scalar Tensor with respect to every parameter."""
    params.zero_grad()
    loss.backward()
    return params.grads()


# ---------------------------------------------------------------------------
# 4. Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step, applied in place. Returns (params, state)."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeMismatch(f"gradient for '{name}' has shape {g.shape}, parameter {tensor.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        tensor.data = tensor.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params, state


class Adam:
    """
    Stateful wrapper around adam_update.

    Kullanım:
        optimizer = Adam(params, lr=1e-3)
        optimizer.step(grad(loss, params))
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_decay=None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_decay = lr_decay
        self.state = AdamState()

    def current_lr(self):
        if self.lr_decay is None:
            return self.lr
        return self.lr * self.lr_decay ** self.state.step

    def step(self, grads):
        adam_update(self.params, grads, self.state, self.current_lr(), self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# 5. Gradient check
# ---------------------------------------------------------------------------

def _shifted(array, index, delta):
    values = array.copy().reshape(-1)
    values[index] += delta
    return values.reshape(array.shape)


def gradient_check(function, params, n_probes=50, rng=None, step=1e-5, floor=1e-4, names=None):
    """
    Max relative error between reverse-mode and central-difference gradients.

    ``function()`` must rebuild the loss Tensor from the current parameter
    values. The error on each sampled coordinate is |a − n| / max(|a|, |n|, floor);
    ``floor`` keeps coordinates with near-zero gradient from amplifying the
    O(step²) difference noise. ``names`` limits the check to those parameters.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = grad(function(), params)
    names = set(names) if names is not None else None
    coords = [(name, i) for name, tensor in params.items() if names is None or name in names
              for i in range(tensor.data.size)]
    if not coords:
        return 0.0
    picks = rng.choice(len(coords), size=min(n_probes, len(coords)), replace=False)
    worst = 0.0
    for pick in picks:
        name, index = coords[pick]
        tensor = params[name]
        original = tensor.data
        tensor.data = _shifted(original, index, step)
        upper = float(function().data)
        tensor.data = _shifted(original, index, -step)
        lower = float(function().data)
        tensor.data = original
        numeric = (upper - lower) / (2.0 * step)
        exact = analytic[name].reshape(-1)[index]
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    return worst
