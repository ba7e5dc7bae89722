"""Reverse-mode automatic differentiation over dense float64 arrays.

The model is deliberately small: a :class:`Tensor` wraps a numpy array, a
:class:`Tape` records every operation performed on watched tensors during one
forward pass, and :func:`backward` replays the record once in reverse to
produce gradients.  There is no graph reuse, no broadcasting beyond
scalar-with-tensor, and no in-place mutation of recorded values; shape
changes are explicit ops (:func:`reshape`, :func:`expand`, :func:`transpose`).

Typical use::

    tape = Tape()
    w = tape.watch(Tensor(w0))
    loss = reduce_mean(square(sub(matmul(x, w), y)))
    grads = backward(tape, loss)          # {node id: Tensor}
    dw = grads[w.nid].data

Mixing tensors from two different live tapes in one op is a contract error.
Tensors without a tape act as constants and receive no gradient.
"""

import numbers

import numpy as np

from .errors import ContractError, DimensionError, DomainError


class Tensor:
    """A dense float64 array, optionally tied to a tape node."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of the same values, off any tape."""
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.nid}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; every overload routes through a recorded op.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of one forward pass.

    Operations are appended in execution order, which is already a
    topological order of the computation graph, so the reverse sweep is a
    single backwards scan.  A tape is single-use per forward pass; reuse for
    a second unrelated forward is allowed but keeps the old records alive.
    """

    __slots__ = ("_ops", "_next_id", "_leaf_ids", "_leaf_shapes")

    def __init__(self):
        self._ops = []
        self._next_id = 0
        self._leaf_ids = []
        self._leaf_shapes = {}

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf.  Returns a tensor sharing storage with the input."""
        if isinstance(tensor, Tensor) and tensor.tape is not None:
            raise ContractError("cannot watch a tensor that already belongs to a tape")
        out = Tensor(tensor.data if isinstance(tensor, Tensor) else tensor,
                     tape=self, nid=self._fresh_id())
        self._leaf_ids.append(out.nid)
        self._leaf_shapes[out.nid] = out.data.shape
        return out

    @property
    def num_ops(self) -> int:
        return len(self._ops)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, numbers.Number):
        return Tensor(np.float64(value))
    return Tensor(np.asarray(value, dtype=np.float64))


def _tape_of(tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _emit(out_data, inputs, backward_fn) -> Tensor:
    """Create the output tensor, recording the op if any input is taped.

    ``backward_fn(g)`` must return one gradient array (or None) per input,
    in order.  Gradients for constant inputs are ignored.
    """
    tape = _tape_of(inputs)
    out = Tensor(out_data)
    if tape is None:
        return out
    out.tape = tape
    out.nid = tape._fresh_id()
    in_ids = tuple(t.nid if t.tape is tape else None for t in inputs)
    tape._ops.append((out.nid, in_ids, backward_fn))
    return out


def custom_op(inputs, out_data, backward_fn) -> Tensor:
    """Record an externally computed op (used for linear transforms with
    hand-written adjoints, e.g. spectral filtering)."""
    inputs = [_coerce(t) for t in inputs]
    return _emit(out_data, inputs, backward_fn)


def backward(tape: Tape, root: Tensor) -> dict:
    """Reverse sweep from a scalar root.

    Returns a map from leaf node id to gradient tensor.  Leaves the root
    does not depend on get explicit zeros.  Forward values are never
    mutated, so running backward twice from the same root yields identical
    results.
    """
    if not isinstance(root, Tensor) or root.tape is not tape or root.nid is None:
        raise ContractError("root was not produced on this tape")
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads = {root.nid: np.ones_like(root.data)}
    for out_id, in_ids, backward_fn in reversed(tape._ops):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, gi in zip(in_ids, backward_fn(g)):
            if nid is None or gi is None:
                continue
            acc = grads.get(nid)
            grads[nid] = gi if acc is None else acc + gi
    result = {}
    for nid in tape._leaf_ids:
        g = grads.get(nid)
        if g is None:
            g = np.zeros(tape._leaf_shapes[nid])
        result[nid] = Tensor(np.asarray(g, dtype=np.float64))
    return result


# ---------------------------------------------------------------------------
# elementwise binary ops (equal shapes, or one operand scalar)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g), dtype=np.float64).reshape(shape)


def _check_binary(a, b, name):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{name}: shapes {a.data.shape} and {b.data.shape} "
                         "must match (or one operand must be scalar)")


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "add")
    return _emit(a.data + b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "sub")
    return _emit(a.data - b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, [a, b],
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    return _emit(ad / bd, [a, b],
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def scale(a, s: float) -> Tensor:
    """Multiply by a python constant (not differentiable in s)."""
    a = _coerce(a)
    s = float(s)
    return _emit(a.data * s, [a], lambda g: (g * s,))


# ---------------------------------------------------------------------------
# elementwise unary ops


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, [a], lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)), computed without overflow for large |x|."""
    a = _coerce(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return _emit(out, [a], lambda g: (g * (1.0 - np.exp(out)),))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: values must be positive, min was {a.data.min()}")
    x = a.data
    return _emit(np.log(x), [a], lambda g: (g / x,))


def square(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    return _emit(x * x, [a], lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    """Square root; gradient at exactly zero uses the zero subgradient."""
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError(f"sqrt: values must be non-negative, min was {a.data.min()}")
    y = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(y > 0.0, 0.5 * g / y, 0.0)
        return (gx,)

    return _emit(y, [a], bw)


def relu(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    return _emit(np.maximum(x, 0.0), [a], lambda g: (g * (x > 0.0),))


# ---------------------------------------------------------------------------
# matmul, softmax


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: operands must be 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    a = _coerce(a)
    x = a.data
    if x.ndim == 0:
        raise DimensionError("softmax: input must have at least one axis")
    axis = _normalize_axis(axis, x.ndim, "softmax")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / np.sum(ex, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, [a], bw)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis, ndim, name):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{name}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _normalize_axes(axes, ndim, name):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(_normalize_axis(ax, ndim, name) for ax in axes)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"{name}: repeated axis in {axes}")
    return norm


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_sum(a, axes=None) -> Tensor:
    a = _coerce(a)
    x = a.data
    axes = _normalize_axes(axes, x.ndim, "reduce_sum")
    kshape = _keepdims_shape(x.shape, axes)
    out = np.sum(x, axis=axes)
    return _emit(out, [a],
                 lambda g: (np.broadcast_to(g.reshape(kshape), x.shape),))


def reduce_mean(a, axes=None) -> Tensor:
    a = _coerce(a)
    x = a.data
    axes = _normalize_axes(axes, x.ndim, "reduce_mean")
    kshape = _keepdims_shape(x.shape, axes)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise DimensionError("reduce_mean: cannot average over zero elements")
    out = np.mean(x, axis=axes)
    return _emit(out, [a],
                 lambda g: (np.broadcast_to(g.reshape(kshape), x.shape) / count,))


def reduce_max(a, axes=None) -> Tensor:
    """Max reduction; ties split the gradient equally among maximal entries."""
    a = _coerce(a)
    x = a.data
    axes = _normalize_axes(axes, x.ndim, "reduce_max")
    kshape = _keepdims_shape(x.shape, axes)
    out = np.max(x, axis=axes)

    def bw(g):
        mx = out.reshape(kshape)
        mask = (x == mx)
        counts = np.sum(mask, axis=axes).reshape(kshape)
        return (np.broadcast_to(g.reshape(kshape) / counts, x.shape) * mask,)

    return _emit(out, [a], bw)


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise DimensionError("concat: need at least one part")
    ndim = parts[0].data.ndim
    axis = _normalize_axis(axis, ndim, "concat")
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch {parts[0].data.shape} vs {p.data.shape}")
        for i in range(ndim):
            if i != axis and p.data.shape[i] != parts[0].data.shape[i]:
                raise DimensionError(
                    f"concat: shapes {parts[0].data.shape} and {p.data.shape} "
                    f"differ off the concat axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        slicer = [slice(None)] * ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _emit(out, parts, bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of one axis."""
    a = _coerce(a)
    x = a.data
    axis = _normalize_axis(axis, x.ndim, "narrow")
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start}, {start + length}) out of range "
                             f"for axis {axis} of shape {x.shape}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def bw(g):
        gx = np.zeros_like(x)
        gx[slicer] = g
        return (gx,)

    return _emit(x[slicer].copy(), [a], bw)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _emit(a.data.reshape(shape), [a], lambda g: (g.reshape(old),))


def expand(a, shape) -> Tensor:
    """Broadcast axes of extent 1 up to the requested shape (rank-preserving)."""
    a = _coerce(a)
    x = a.data
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise DimensionError(f"expand: rank must be preserved, {x.shape} -> {shape}")
    bcast = []
    for i, (m, n) in enumerate(zip(x.shape, shape)):
        if m == n:
            continue
        if m == 1:
            bcast.append(i)
        else:
            raise DimensionError(f"expand: axis {i} has extent {m}, cannot expand to {n}")
    bcast = tuple(bcast)
    return _emit(np.broadcast_to(x, shape), [a],
                 lambda g: (np.sum(g, axis=bcast, keepdims=True) if bcast else g,))


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    x = a.data
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_normalize_axis(ax, x.ndim, "transpose") for ax in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = np.argsort(axes)
    return _emit(np.transpose(x, axes), [a], lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# optimizer


class SgdMomentum:
    """Plain SGD with classical momentum.

    Velocity follows v <- momentum * v + g and parameters p <- p - lr * v,
    so the first step from a fresh state moves by exactly -lr * g.  Slots
    are keyed by parameter name, which keeps them serializable and
    independent of tape node ids.
    """

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr < 0.0 or momentum < 0.0:
            raise ContractError("learning rate and momentum must be non-negative")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {}

    def step(self, named_params, grads_by_name) -> None:
        """Update parameters in place.  ``named_params`` is an iterable of
        (name, Tensor); gradients are looked up by the same names."""
        for name, param in named_params:
            g = grads_by_name[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            if g.shape != param.data.shape:
                raise DimensionError(f"SgdMomentum: gradient shape {g.shape} does not match "
                                     f"parameter '{name}' of shape {param.data.shape}")
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            param.data -= self.lr * v
