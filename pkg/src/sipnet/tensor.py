"""Dense tensors with a tape-based reverse-mode autodiff.

Every differentiable op executed while any of its inputs requires a gradient
appends a node to the current thread's :class:`Tape`.  :func:`backward`
walks the tape in exact reverse order, accumulating gradients additively,
and clears it afterwards.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class ConfigError(ValueError):
    """Invalid op or model configuration."""


class UsageError(RuntimeError):
    """API misuse (e.g. backward on a non-scalar)."""


_state = threading.local()


def _st():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.dtype = np.float32
    return _state


def default_dtype():
    return _st().dtype


@contextlib.contextmanager
def precision(dtype):
    """Run a block with a different default float dtype (``float64`` = shadow mode)."""
    st = _st()
    prev = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _st().grad_enabled


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape:
    return _st().tape


class Tensor:
    """N-D float array, optionally participating in the autodiff tape.

    Activations use (N, C, D, H, W) layout, or (N, C, H, W) in 2-D.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops

        return ops.sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    name: str,
) -> Tensor:
    """Wrap an op's output and register it on the tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per
    input, in input order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().record(_Node(tuple(inputs), out, backward_fn, name))
    return out


def backward(loss: Tensor, retain_intermediate: bool = False) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Walks the tape in exact reverse execution order.  Gradients accumulate
    additively across consumers and across calls (call ``zero_grad`` to reset).
    The tape is cleared afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        raise UsageError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            if retain_intermediate:
                node.output.grad = g
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    raise ShapeError(
                        f"{node.name}: gradient shape {gi.shape} != input shape {inp.shape}"
                    )
                if inp.is_leaf:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                    else:
                        inp.grad += gi
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
    finally:
        tape.clear()
