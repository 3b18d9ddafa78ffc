"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray. Image tensors are laid out N x C x H x W
(channel-major within a sample, row-major within a channel); feature vectors
are N x F and the loss is a 0-d tensor. Each differentiable op is a
:class:`Function` subclass; applying it records an :class:`OpNode` on the
output so :meth:`Tensor.backward` can walk the graph in reverse topological
order.
"""

import contextlib
import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_node_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def make_rng(seed):
    """Deterministic generator: numpy PCG64 seeded from a 64-bit integer.

    PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy, so the same seed and call sequence give the same values on every
    platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def sum(self):
        return Sum.apply(self)

    def __mul__(self, other):
        return Scale.apply(self, scale=float(other))

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Populate ``.grad`` of every reachable tensor that requires grad.

        Gradients accumulate: calling backward twice without zeroing doubles
        them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topo_order(self)
        grads = {id(self): grad}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    _check_finite(g, f"gradient of {t.name or 'tensor'}")
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t.node.fn.backward(g)
            for parent, pg in zip(t.node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """Trainable tensor with a unique dotted name such as ``b3.conv1x1.weight``."""

    __slots__ = ()

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class OpNode:
    """Graph record: the function (holding saved context), its inputs and output id."""

    __slots__ = ("fn", "inputs", "id")

    def __init__(self, fn, inputs):
        self.fn = fn
        self.inputs = inputs
        self.id = next(_node_ids)


def _topo_order(root):
    """Tensors reachable from root, outputs before inputs; each exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


class Function:
    """Base class for differentiable ops.

    Subclasses implement ``forward(*arrays, **kwargs) -> ndarray`` and
    ``backward(grad) -> tuple`` with one entry (array or None) per tensor
    input. Anything needed by backward is stored on ``self``.
    """

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors, **kwargs):
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out_data, f"output of {cls.__name__}")
        requires_grad = _grad_enabled and any(fn.needs_grad)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            out.node = OpNode(fn, tensors)
        return out


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class Scale(Function):
    def forward(self, x, scale):
        self.scale = scale
        return x * x.dtype.type(scale)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.scale),)
