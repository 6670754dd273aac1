"""Dense tensor engine with reverse-mode automatic differentiation.

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

This module provides the small numerical substrate every other module is
built on: a float32 ``Tensor`` backed by a NumPy array, a tape (``Graph``)
of differentiable operations, and a ``MemoryLedger`` that counts payload
bytes so that training-memory comparisons can be made exactly.

Tape Model:
-----------
Every differentiable op appends one ``Node`` to the active graph when the
graph is recording and at least one input requires a gradient. Node ids
are positions in an append-only list, so walking ids downwards from the
loss is a reverse topological order. A node keeps alive only the tensors
its backward rule needs (``saved``); everything else is released as soon
as the caller drops it. ``backward`` consumes the graph: each visited node
is released right after its gradients have been propagated.

Inside ``no_grad()`` nothing is recorded and results carry no node id.
This is how the frozen feature extractor runs.

Memory Accounting:
-----------------
The ledger counts:
  - the payload of every live Tensor (views count as their own payload)
  - gradient buffers attached to tensors
  - upstream-gradient buffers pending inside ``backward``
Allocator overhead and NumPy temporaries inside a single op are not
counted. CPython reference counting frees tensors deterministically, so
an identical op sequence always produces identical ledger peaks.

Randomness:
----------
Parameters are drawn from a Philox (counter-based) generator keyed by the
run seed and the CRC32 of the parameter name, so every named parameter has
its own reproducible stream independent of creation order.
"""

import logging
import math
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError


logger = logging.getLogger(__name__)

DTYPE = np.float32
BYTES_PER_ELEMENT = 4

Scalar = Union[int, float]


class MemoryLedger:
    """Byte counter for tensor payloads and gradient buffers."""

    def __init__(self, keep_events: bool = False):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.event_log: Optional[List[Tuple[str, int]]] = [] if keep_events else None

    def allocate(self, nbytes: int, tag: str = "tensor") -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        if self.event_log is not None:
            self.event_log.append((tag, nbytes))

    def free(self, nbytes: int, tag: str = "tensor") -> None:
        self.live_bytes -= nbytes
        if self.event_log is not None:
            self.event_log.append((tag, -nbytes))

    def reset_peak(self) -> None:
        """Start a new measurement scope at the current live size."""
        self.peak_bytes = self.live_bytes

    def snapshot(self) -> Tuple[int, int]:
        return self.live_bytes, self.peak_bytes


@dataclass
class Node:
    """One recorded op: how to route an upstream gradient to its inputs."""
    op: str
    parents: tuple          # per input: node id (int), leaf Tensor, or None
    backward: Callable
    saved: tuple = ()       # tensors the backward rule reads


@dataclass
class Graph:
    """Append-only tape of differentiable ops."""
    nodes: List[Optional[Node]] = field(default_factory=list)
    recording: bool = True
    generation: int = 0

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


class _EngineState:
    def __init__(self):
        self.graph = Graph()
        self.ledger = MemoryLedger()


_state = _EngineState()


def get_graph() -> Graph:
    """Return the active graph."""
    return _state.graph


def ledger_snapshot() -> Tuple[int, int]:
    """Return (live_bytes, peak_bytes) of the active ledger."""
    return _state.ledger.snapshot()


def reset_peak() -> None:
    _state.ledger.reset_peak()


@contextmanager
def no_grad() -> Iterator[None]:
    """Inference mode: ops inside the block record nothing."""
    graph = _state.graph
    previous = graph.recording
    graph.recording = False
    try:
        yield
    finally:
        graph.recording = previous


@contextmanager
def graph_scope() -> Iterator[Graph]:
    """Install a fresh graph for the duration of the block."""
    previous = _state.graph
    _state.graph = Graph()
    try:
        yield _state.graph
    finally:
        _state.graph = previous


@contextmanager
def ledger_scope(keep_events: bool = False) -> Iterator[MemoryLedger]:
    """Install a fresh ledger; tensors keep reporting to the ledger that saw them allocated."""
    previous = _state.ledger
    _state.ledger = MemoryLedger(keep_events=keep_events)
    try:
        yield _state.ledger
    finally:
        _state.ledger = previous


class Tensor:
    """Dense float32 tensor with an optional gradient and graph handle.

    Args:
        data: Array-like payload; always copied into a contiguous float32 array
        requires_grad: Whether backward should produce a gradient for this tensor
        name: Optional parameter name (used for reporting and serialization)
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name",
                 "_gen", "_ledger", "_nbytes", "_grad_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self._attach(np.array(data, dtype=DTYPE), requires_grad, name)

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an op result without copying when it is already contiguous float32."""
        array = np.asarray(array, dtype=DTYPE)
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        tensor = cls.__new__(cls)
        tensor._attach(array, False, None)
        return tensor

    def _attach(self, array: np.ndarray, requires_grad: bool, name: Optional[str]) -> None:
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._gen = -1
        self._ledger = _state.ledger
        self._nbytes = array.nbytes
        self._grad_nbytes = 0
        self._ledger.allocate(self._nbytes, "tensor")

    def __del__(self):
        ledger = getattr(self, "_ledger", None)
        if ledger is not None:
            ledger.free(self._nbytes + self._grad_nbytes, "tensor")
            self._ledger = None

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self._nbytes

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Return a copy of the payload."""
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- gradients ---------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE).reshape(self.shape)
            self._grad_nbytes = self.grad.nbytes
            if self._ledger is not None:
                self._ledger.allocate(self._grad_nbytes, "grad")
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        """Drop the gradient buffer."""
        if self.grad is not None:
            if self._ledger is not None:
                self._ledger.free(self._grad_nbytes, "grad")
            self.grad = None
            self._grad_nbytes = 0

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swap_last(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


# -- construction helpers ------------------------------------------------

def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def make_generator(seed: int, name: str = "") -> np.random.Generator:
    """Return the Philox stream for ``(seed, name)``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


def truncated_normal(shape, std: float, rng: np.random.Generator, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall inside ``±bound`` standard deviations."""
    values = rng.standard_normal(size=shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(size=int(outside.sum()))
        outside = np.abs(values) > bound
    return (values * std).astype(DTYPE)


def parameter(shape, name: str, seed: int, init: str = "trunc_normal",
              std: float = 0.02, requires_grad: bool = True) -> Tensor:
    """Create a named parameter with a seed-reproducible initial value.

    Args:
        shape: Parameter shape
        name: Parameter name; also keys the random stream
        seed: Run seed
        init: ``trunc_normal``, ``zeros`` or ``ones``
        std: Standard deviation for ``trunc_normal``
        requires_grad: Whether the parameter is learnable

    Returns:
        Leaf tensor
    """
    if init == "trunc_normal":
        values = truncated_normal(shape, std, make_generator(seed, name))
    elif init == "zeros":
        values = np.zeros(shape, dtype=DTYPE)
    elif init == "ones":
        values = np.ones(shape, dtype=DTYPE)
    else:
        raise ContractError(f"Unknown initializer: {init}")
    tensor = Tensor._wrap(values)
    tensor.requires_grad = requires_grad
    tensor.name = name
    return tensor


# -- tape plumbing ---------------------------------------------------------

def _parent_of(tensor: Tensor, graph: Graph):
    if not tensor.requires_grad:
        return None
    if tensor.node_id is not None and tensor._gen == graph.generation:
        return tensor.node_id
    return tensor


def _result(array: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable,
            saved: tuple = (), save_output: bool = False) -> Tensor:
    out = Tensor._wrap(array)
    graph = _state.graph
    if graph.recording and any(t.requires_grad for t in inputs):
        if save_output:
            saved = saved + (out,)
        parents = tuple(_parent_of(t, graph) for t in inputs)
        out.requires_grad = True
        out.node_id = graph.append(Node(op, parents, backward_fn, saved))
        out._gen = graph.generation
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every reachable leaf that requires one.

    Raises:
        ContractError: If ``loss`` is not a scalar or is not attached to the active graph
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = _state.graph
    if loss.node_id is None or loss._gen != graph.generation:
        raise ContractError("loss is detached from the recorded graph")

    ledger = _state.ledger
    seed = np.ones(loss.shape, dtype=DTYPE)
    pending = {loss.node_id: seed}
    ledger.allocate(seed.nbytes, "grad")

    for index in range(loss.node_id, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = graph.nodes[index]
        input_grads = node.backward(grad, *node.saved)
        for parent, parent_grad in zip(node.parents, input_grads):
            if parent is None or parent_grad is None:
                continue
            if isinstance(parent, int):
                held = pending.get(parent)
                if held is None:
                    parent_grad = np.ascontiguousarray(parent_grad, dtype=DTYPE)
                    pending[parent] = parent_grad
                    ledger.allocate(parent_grad.nbytes, "grad")
                else:
                    pending[parent] = held + parent_grad
            else:
                parent._accumulate(parent_grad)
        ledger.free(grad.nbytes, "grad")
        del grad, input_grads
        graph.nodes[index] = None

    for leftover in pending.values():
        ledger.free(leftover.nbytes, "grad")
    graph.clear()


# -- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    shape_a, shape_b = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, shape_a), _unbroadcast(g, shape_b)

    return _result(_broadcast_op(np.add, a, b), "add", (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    shape_a, shape_b = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, shape_a), _unbroadcast(-g, shape_b)

    return _result(_broadcast_op(np.subtract, a, b), "sub", (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g, a, b):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(_broadcast_op(np.multiply, a, b), "mul", (a, b), backward_fn, saved=(a, b))


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from e


def scale(a: Tensor, factor: Scalar) -> Tensor:
    factor = DTYPE(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result(a.data * factor, "scale", (a,), backward_fn)


def add_scalar(a: Tensor, value: Scalar) -> Tensor:
    def backward_fn(g):
        return (g,)

    return _result(a.data + DTYPE(value), "add_scalar", (a,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    def backward_fn(g, x):
        v = x.data
        inner = _GELU_C * (v + 0.044715 * v ** 3)
        t = np.tanh(inner)
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    v = x.data
    out = 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * v ** 3)))
    return _result(out, "gelu", (x,), backward_fn, saved=(x,))


# -- matrix ops ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Raises:
        DimensionError: If the inner extents (or batch extents) do not match
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from e

    def backward_fn(g, a, b):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), backward_fn, saved=(a, b))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction.

    Raises:
        NumericError: If the input contains NaN
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g, y):
        y = y.data
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(out, "softmax", (x,), backward_fn, save_output=True)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Log-softmax over the last axis (log-sum-exp form)."""
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward_fn(g, y):
        return (g - np.exp(y.data) * g.sum(axis=-1, keepdims=True),)

    return _result(out, "log_softmax", (x,), backward_fn, save_output=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gamma and beta."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")

    def normalize(v):
        mean = v.mean(axis=-1, keepdims=True)
        centered = v - mean
        rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + DTYPE(eps))
        return centered * rstd, rstd

    xhat, _ = normalize(x.data)

    def backward_fn(g, x, gamma):
        xhat, rstd = normalize(x.data)
        dgamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        dbeta = _unbroadcast(g, gamma.shape)
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta),
                   backward_fn, saved=(x, gamma))


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} into {tuple(shape)}") from e

    def backward_fn(g):
        return (g.reshape(original),)

    return _result(out, "reshape", (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), "transpose", (a,), backward_fn)


def swap_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    original = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {original} to {tuple(shape)}") from e

    def backward_fn(g):
        return (_unbroadcast(g, original),)

    return _result(out, "broadcast_to", (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tuple(tensors), backward_fn)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    original = a.shape
    try:
        out = a.data[index]
    except IndexError as e:
        raise DimensionError(f"index {index!r} out of range for shape {original}") from e
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(original, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, "getitem", (a,), backward_fn)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    original = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, original),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)
