"""Tensor container, tape recording and reverse-mode traversal."""

import threading

import numpy as np

from ..errors import NonFiniteError, UsageError

_local = threading.local()

# Forward outputs and gradients are checked for NaN/Inf when enabled.
CHECK_FINITE = True


def _stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Context:
    """Scratch space a primitive uses to carry state from forward to backward."""

    def save(self, **kwargs):
        self.__dict__.update(kwargs)


class Node:
    __slots__ = ("fn", "ctx", "inputs", "output")

    def __init__(self, fn, ctx, inputs, output):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.output = output


class Tape:
    """Ordered record of primitive applications.

    Operations only record while a tape is active (``with Tape() as tape:``);
    outside of one, results are plain constants. A tape belongs to the thread
    that opened it.
    """

    def __init__(self):
        self.nodes = []
        self._on_tape = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tapes must be closed in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)
        self._on_tape.add(id(node.output))

    def backward(self, loss):
        """Populate ``.grad`` on every requires-grad leaf that feeds the tape.

        Gradients accumulate into existing ``.grad`` buffers so callers can
        sum over several tapes; leaves on the tape with no path to ``loss``
        receive zeros.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise UsageError("backward needs a scalar loss tensor")
        if id(loss) not in self._on_tape:
            raise UsageError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and t._node is None and id(t) not in leaves:
                    leaves[id(t)] = [t, None]
            g = grads.pop(id(node.output), None)
            if g is None or node.fn is None:
                continue
            in_grads = node.fn.backward(node.ctx, g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise UsageError(
                        f"{node.fn.__name__} returned grad {gi.shape} for input {t.data.shape}"
                    )
                if t._node is None:
                    slot = leaves[id(t)]
                    slot[1] = gi if slot[1] is None else slot[1] + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi

        for t, g in leaves.values():
            if g is None:
                g = np.zeros_like(t.data)
            elif CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for leaf {t.name or t.shape}")
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape, loss):
    tape.backward(loss)


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward(ctx, *arrays, **kw)`` returning an ndarray
    and ``backward(ctx, grad)`` returning one gradient (or None) per input.
    """

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        ref = next((i for i in inputs if isinstance(i, Tensor)), None)
        dtype = ref.dtype if ref is not None else None
        tensors = tuple(i if isinstance(i, Tensor) else Tensor(i, dtype=dtype) for i in inputs)
        ctx = Context()
        ctx.needs_grad = tuple(t.requires_grad for t in tensors)
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if CHECK_FINITE and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        tape = current_tape()
        result = Tensor(out)
        if tape is not None and any(ctx.needs_grad):
            result.requires_grad = True
            node = Node(cls, ctx, tensors, result)
            result._node = node
            tape.record(node)
        return result


class StopGradientReplay:
    """Record the value of every stop_gradient call, then replay them in call order.

    Finite differences taken under replay treat each stopped branch as the
    constant the tape sees, so they check the same gradient the tape computes.
    """

    def __init__(self):
        self.values = []
        self.replaying = False
        self.pos = 0

    def replay(self):
        self.replaying = True
        self.pos = 0
        return self

    def visit(self, data):
        if not self.replaying:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values):
            raise UsageError("stop_gradient replay ran past the recorded calls")
        out = self.values[self.pos]
        self.pos += 1
        return out

    def __enter__(self):
        _local.sg_replay = self
        return self

    def __exit__(self, *exc):
        _local.sg_replay = None
        return False


def stop_gradient(x):
    """Share ``x``'s buffer while blocking gradient flow through this use."""
    replay = getattr(_local, "sg_replay", None)
    out = Tensor(x.data if replay is None else replay.visit(x.data))
    tape = current_tape()
    if tape is not None and x.requires_grad:
        # marker only: a node without a backward function
        tape.nodes.append(Node(None, None, (x,), out))
    return out


sg = stop_gradient


def parameter(data, dtype=None, name=None):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


from . import ops  # noqa: E402  (circular: ops needs Tensor)
