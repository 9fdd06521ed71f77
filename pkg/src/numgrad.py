# src/numgrad.py
"""Tape-based reverse-mode differentiation, small MLPs and the Adam optimizer.

Everything is float64. The same model code runs on plain numpy arrays (fast,
no recording) and on :class:`Tensor` objects (recorded on the active
:class:`Tape`), so dynamics, rewards and networks are written once and used by
both the simulator and the gradient-based trainers.
"""
import logging
import threading
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ConfigurationError, NumericalError, ShapeError, UsageError

logger = logging.getLogger(__name__)

ACTIVATIONS = ('tanh', 'identity')

_local = threading.local()


def _active_tape() -> Optional['Tape']:
    stack = getattr(_local, 'tapes', None)
    return stack[-1] if stack else None


class Tape:
    """Records backward closures of ops evaluated while the tape is active."""

    def __init__(self):
        self.entries: List[Callable[[], None]] = []

    def __enter__(self) -> 'Tape':
        if not hasattr(_local, 'tapes'):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _local.tapes.pop()
        return False

    def record(self, backward: Callable[[], None]):
        self.entries.append(backward)

    def backward(self, output: 'Tensor'):
        """Propagate d(output)/d(.) into every recorded leaf."""
        output.grad = np.ones_like(output.data)
        for entry in reversed(self.entries):
            entry()


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: 'Tensor', grad: np.ndarray):
    if not t.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    t.grad = grad if t.grad is None else t.grad + grad


def _is_basic_index(index) -> bool:
    # basic indices never select an element twice
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def _as_tensor(x) -> 'Tensor':
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence['Tensor'], backward: Callable[[np.ndarray], None]) -> 'Tensor':
    tape = _active_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        def run():
            if out.grad is not None:
                backward(out.grad)
        tape.record(run)
    return out


class Tensor:
    """An n-dimensional float64 array that records its ops on the active tape."""

    __slots__ = ('data', 'grad', 'requires_grad')
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> 'Tensor':
        other = _as_tensor(other)

        def backward(g):
            _accumulate(self, g)
            _accumulate(other, g)
        return _result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> 'Tensor':
        other = _as_tensor(other)

        def backward(g):
            _accumulate(self, g)
            _accumulate(other, -g)
        return _result(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> 'Tensor':
        return _as_tensor(other).__sub__(self)

    def __neg__(self) -> 'Tensor':
        def backward(g):
            _accumulate(self, -g)
        return _result(-self.data, (self,), backward)

    def __mul__(self, other) -> 'Tensor':
        other = _as_tensor(other)

        def backward(g):
            _accumulate(self, g * other.data)
            _accumulate(other, g * self.data)
        return _result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        other = _as_tensor(other)

        def backward(g):
            _accumulate(self, g / other.data)
            _accumulate(other, -g * self.data / (other.data * other.data))
        return _result(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other) -> 'Tensor':
        return _as_tensor(other).__truediv__(self)

    def __pow__(self, power: float) -> 'Tensor':
        if power == 2:
            return self.square()

        def backward(g):
            _accumulate(self, g * power * self.data ** (power - 1))
        return _result(self.data ** power, (self,), backward)

    def __getitem__(self, index) -> 'Tensor':
        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            _accumulate(self, full)
        return _result(self.data[index], (self,), backward)

    def square(self) -> 'Tensor':
        def backward(g):
            _accumulate(self, 2.0 * g * self.data)
        return _result(self.data * self.data, (self,), backward)

    def tanh(self) -> 'Tensor':
        y = np.tanh(self.data)

        def backward(g):
            _accumulate(self, g * (1.0 - y * y))
        return _result(y, (self,), backward)

    def exp(self) -> 'Tensor':
        y = np.exp(self.data)

        def backward(g):
            _accumulate(self, g * y)
        return _result(y, (self,), backward)

    def maximum(self, floor: float) -> 'Tensor':
        """Elementwise max against a constant; zero gradient on the floor."""
        mask = self.data > floor

        def backward(g):
            _accumulate(self, g * mask)
        return _result(np.maximum(self.data, floor), (self,), backward)

    def clip(self, lower, upper) -> 'Tensor':
        # closed mask: variables resting on a bound still receive gradient
        mask = (self.data >= lower) & (self.data <= upper)

        def backward(g):
            _accumulate(self, g * mask)
        return _result(np.clip(self.data, lower, upper), (self,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, self.data.shape))
        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> 'Tensor':
        def backward(g):
            _accumulate(self, g.reshape(self.data.shape))
        return _result(self.data.reshape(*shape), (self,), backward)

    def broadcast_to(self, shape) -> 'Tensor':
        def backward(g):
            _accumulate(self, g)
        return _result(np.broadcast_to(self.data, shape).copy(), (self,), backward)


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def value_of(x) -> np.ndarray:
    """Plain numpy view of a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def square(x):
    return x.square() if isinstance(x, Tensor) else np.square(x)


def maximum(x, floor: float):
    return x.maximum(floor) if isinstance(x, Tensor) else np.maximum(x, floor)


def clip(x, lower, upper):
    return x.clip(lower, upper) if isinstance(x, Tensor) else np.clip(x, lower, upper)


def total(x, axis=None):
    return x.sum(axis=axis) if isinstance(x, Tensor) else np.sum(x, axis=axis)


def mean(x, axis=None):
    return x.mean(axis=axis) if isinstance(x, Tensor) else np.mean(x, axis=axis)


def broadcast_to(x, shape):
    if isinstance(x, Tensor):
        return x.broadcast_to(shape)
    return np.broadcast_to(x, shape)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` over the last axis of ``x``."""
    if not _is_tensor(x, weight, bias):
        out = np.asarray(x) @ np.asarray(weight).T
        return out if bias is None else out + bias
    x, weight = _as_tensor(x), _as_tensor(weight)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        parents.append(bias)
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data

    def backward(g):
        _accumulate(x, g @ weight.data)
        g2 = g.reshape(-1, weight.data.shape[0])
        x2 = x.data.reshape(-1, weight.data.shape[1])
        _accumulate(weight, g2.T @ x2)
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))
    return _result(data, parents, backward)


def concat(parts: Sequence, axis: int = -1):
    if not _is_tensor(*parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(part, piece)
    return _result(data, parts, backward)


def stack(parts: Sequence, axis: int = -1):
    """Stack along a new axis, broadcasting the parts to a common shape first."""
    if not _is_tensor(*parts):
        return np.stack(np.broadcast_arrays(*[np.asarray(p, dtype=np.float64) for p in parts]), axis=axis)
    shape = np.broadcast_shapes(*[np.shape(value_of(p)) for p in parts])
    parts = [p if np.shape(value_of(p)) == shape else broadcast_to(_as_tensor(p), shape) for p in parts]
    parts = [_as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, part in enumerate(parts):
            _accumulate(part, np.take(g, i, axis=axis))
    return _result(data, parts, backward)


Bundle = Union[np.ndarray, Sequence[np.ndarray]]


def value_and_grad(f: Callable, at: Bundle) -> Tuple[float, Bundle]:
    """Evaluate scalar ``f`` at ``at`` and its exact reverse-mode gradient.

    ``at`` is one array or a list/tuple of arrays; ``f`` receives Tensors in
    the same structure and the gradient is returned in that structure.
    """
    single = not isinstance(at, (list, tuple))
    arrays = [np.asarray(at, dtype=np.float64)] if single else [np.asarray(a, dtype=np.float64) for a in at]
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        if single:
            out = f(leaves[0])
        else:
            out = f(tuple(leaves) if isinstance(at, tuple) else leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        if out.data.size != 1:
            raise UsageError(f"value_and_grad needs a scalar function, got shape {out.data.shape}")
        if out.requires_grad:
            tape.backward(out)
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    value = float(out.data.reshape(()))
    if single:
        return value, grads[0]
    return value, (tuple(grads) if isinstance(at, tuple) else grads)


def check_finite(x, what: str = 'value'):
    data = value_of(x)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite {what}")


@dataclass
class MlpParams:
    """Weights (n_out x n_in) and biases of a fully connected network."""

    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: str = 'tanh'
    output_activation: str = 'identity'

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> List[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> 'MlpParams':
        arrays = list(arrays)
        return replace(self, weights=[np.array(a, dtype=np.float64) for a in arrays[0::2]],
                       biases=[np.array(a, dtype=np.float64) for a in arrays[1::2]])

    def copy(self) -> 'MlpParams':
        return self.with_arrays(self.arrays())


def mlp_init(layer_sizes: Sequence[int], seed: int, output_activation: str = 'identity',
             hidden_activation: str = 'tanh') -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic given ``seed``."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigurationError(f"MLP needs at least two layers of positive width, got {list(layer_sizes)}")
    for activation in (hidden_activation, output_activation):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{activation}'")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(sizes, weights, biases, hidden_activation, output_activation)


def _activate(h, activation: str):
    return tanh(h) if activation == 'tanh' else h


def mlp_apply(params: MlpParams, x, arrays: Optional[Sequence] = None):
    """Run the network on ``x`` using ``arrays`` (possibly Tensors) as parameters."""
    arrays = params.arrays() if arrays is None else arrays
    n_layers = len(params.layer_sizes) - 1
    h = x
    for i in range(n_layers):
        h = linear(h, arrays[2 * i], arrays[2 * i + 1])
        last = i == n_layers - 1
        h = _activate(h, params.output_activation if last else params.hidden_activation)
    return h


def mlp_forward(params: MlpParams, x):
    """Evaluate the network on one input vector or a batch (last axis = features)."""
    shape = value_of(x).shape
    if not shape or shape[-1] != params.layer_sizes[0]:
        raise ShapeError(f"MLP expects {params.layer_sizes[0]} inputs, got shape {shape}")
    return mlp_apply(params, x)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=[np.zeros_like(p, dtype=np.float64) for p in params],
                     v=[np.zeros_like(p, dtype=np.float64) for p in params],
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new parameters and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer bundles differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to adam_step")

    step = state.step + 1
    m = [state.beta1 * m_i + (1.0 - state.beta1) * g for m_i, g in zip(state.m, grads)]
    v = [state.beta2 * v_i + (1.0 - state.beta2) * g * g for v_i, g in zip(state.v, grads)]
    if all(not np.any(g) for g in grads):
        new_params = [np.array(p, dtype=np.float64) for p in params]
    else:
        bc1 = 1.0 - state.beta1 ** step
        bc2 = 1.0 - state.beta2 ** step
        new_params = [p - state.lr * (m_i / bc1) / (np.sqrt(v_i / bc2) + state.eps)
                      for p, m_i, v_i in zip(params, m, v)]
    return new_params, replace(state, m=m, v=v, step=step)
