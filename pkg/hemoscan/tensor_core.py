"""
Reverse-mode automatic differentiation over numpy arrays, plus Adam.

Operations are recorded define-by-run on the Tape that is active in the current
thread. With no active tape nothing is recorded and outputs never require
gradients, which is how inference runs.

    with Tape() as tape:
        loss = bce_with_logits(matmul(x, w), labels)
    backward(tape, loss, params=[w])
"""
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TapeError, ValidationError

DTYPE = np.float64

_active = threading.local()


# ============================================================================
# TENSOR AND TAPE
# ============================================================================

class Tensor:
    """Dense float64 array with an optional gradient buffer"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    out: Tensor
    inputs: tuple
    backward: object
    op: str


class Tape:
    """Ordered log of recorded operations; consumable by exactly one backward pass"""

    def __init__(self):
        self.records = []
        self.consumed = False
        self._previous = None

    def __enter__(self):
        self._previous = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _active.tape = self._previous
        self._previous = None
        return False

    def __len__(self):
        return len(self.records)

    def append(self, record):
        if self.consumed:
            raise TapeError("cannot record on a tape that was already consumed by backward")
        self.records.append(record)


def current_tape():
    return getattr(_active, "tape", None)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op, out_data, inputs, backward_fn):
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, tracked)
    if tracked:
        tape.append(Record(out, tuple(inputs), backward_fn, op))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ============================================================================
# ELEMENTWISE AND LINEAR ALGEBRA
# ============================================================================

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), backward)


def matmul(a, b):
    """2-D matrix product (n, k) @ (k, m)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", a.data @ b.data, (a, b), backward)


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose", x.shape, detail="expected a 2-D tensor")

    def backward(g):
        return (g.T,)

    return _record("transpose", x.data.T, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", np.where(mask, x.data, 0.0), (x,), backward)


def stable_sigmoid(z):
    """Logistic function on a numpy array; split by sign so exp never overflows"""
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = stable_sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (x,), backward)


def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(x.data.sum()), (x,), backward)


def mean_all(x):
    x = as_tensor(x)
    n = x.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _record("mean", np.asarray(x.data.mean()), (x,), backward)


# ============================================================================
# STRUCTURAL OPS
# ============================================================================

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat: needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != first.data.ndim:
            raise ShapeError("concat", first.shape, t.shape)
        for dim in range(first.data.ndim):
            if dim != axis % first.data.ndim and t.shape[dim] != first.shape[dim]:
                raise ShapeError("concat", first.shape, t.shape, detail=f"axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_axis(x, axis, start, stop):
    """x[..., start:stop, ...] along one axis"""
    x = as_tensor(x)
    ndim = x.data.ndim
    axis = axis % ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError("slice", x.shape, detail=f"range {start}:{stop} on axis {axis}")
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record("slice", x.data[index], (x,), backward)


def split(x, sizes, axis=0):
    """Inverse of concat: cut x into consecutive pieces of the given sizes"""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError("split", x.shape, (sum(sizes),), detail=f"axis {axis}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(slice_axis(x, axis, start, start + size))
        start += size
    return pieces


def dropout(x, p, rng=None, train=True):
    """Inverted dropout: kept units are scaled by 1/(1-p); identity outside training"""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout: training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * mask,)

    return _record("dropout", x.data * mask, (x,), backward)


# ============================================================================
# CONVOLUTION AND POOLING (NCHW)
# ============================================================================

def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """
    Grouped 2-D cross-correlation.
    x: (N, C, H, W); weight: (O, C/groups, kh, kw); bias: (O,) or None
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected 4-D input and kernel")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"groups={groups} must divide channels")
    if cg != c // groups:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"kernel expects {cg * groups} input channels")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d: invalid stride {stride} or padding {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")

    cols = _windows(x.data, kh, kw, stride, padding)
    oh, ow = cols.shape[2], cols.shape[3]
    og = o // groups
    out = np.empty((n, o, oh, ow), dtype=DTYPE)
    for gi in range(groups):
        xg = cols[:, gi * cg:(gi + 1) * cg]
        wg = weight.data[gi * og:(gi + 1) * og]
        out[:, gi * og:(gi + 1) * og] = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one value per output channel")
        out += bias.data.reshape(1, o, 1, 1)
        inputs = (x, weight, bias)

    def backward(g):
        dx_padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        dweight = np.empty_like(weight.data)
        for gi in range(groups):
            gg = g[:, gi * og:(gi + 1) * og]
            xg = cols[:, gi * cg:(gi + 1) * cg]
            wg = weight.data[gi * og:(gi + 1) * og]
            dweight[gi * og:(gi + 1) * og] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(gg, wg, axes=([1], [0]))  # N, oh, ow, cg, kh, kw
            target = dx_padded[:, gi * cg:(gi + 1) * cg]
            for i in range(kh):
                for j in range(kw):
                    target[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dx_padded[:, :, padding:padding + h, padding:padding + w] if padding else dx_padded
        grads = (dx, dweight)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _record("conv2d", out, inputs, backward)


def max_pool2d(x):
    """2x2 max pooling with stride 2; an odd trailing row or column is dropped"""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("max_pool2d", x.shape, detail="expected (N, C, H>=2, W>=2)")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    blocks = x.data[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, oh, ow, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros((n, c, oh, ow, 4), dtype=DTYPE)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dblocks = dflat.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
        dx = np.zeros(x.shape, dtype=DTYPE)
        dx[:, :, :oh * 2, :ow * 2] = dblocks
        return (dx,)

    return _record("max_pool2d", out, (x,), backward)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)"""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="expected a 4-D tensor")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


# ============================================================================
# LOSS PRIMITIVE
# ============================================================================

def bce_with_logits(logits, targets, weights=None):
    """
    Per-row sum over classes of binary cross-entropy on sigmoid(logits), averaged
    over rows. Optional per-class weights multiply each class term.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape or logits.data.ndim != 2:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    wts = np.ones(logits.shape[1], dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    if wts.shape != (logits.shape[1],):
        raise ShapeError("bce_with_logits", logits.shape, wts.shape, detail="one weight per class")
    z = logits.data
    rows = z.shape[0]
    terms = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = (terms * wts).sum() / rows
    probs = stable_sigmoid(z)

    def backward(g):
        return (float(g) * (probs - y) * wts / rows,)

    return _record("bce_with_logits", np.asarray(value), (logits,), backward)


# ============================================================================
# BACKWARD PASS AND GRADIENT ORACLE
# ============================================================================

def backward(tape, loss, params=()):
    """
    Propagate d(loss)/d(.) through the tape into the .grad of every leaf tensor
    that requires gradients. Gradients accumulate into existing buffers; any
    tensor in params that the loss does not reach gets a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be a scalar")
    if tape.consumed:
        raise TapeError("tape already consumed; record a new forward pass before calling backward again")
    produced = {id(record.out) for record in tape.records}
    if id(loss) not in produced:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for record in reversed(tape.records):
        g = grads.pop(id(record.out), None)
        if g is None:
            continue
        for tensor, grad in zip(record.inputs, record.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if key not in produced:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.shape, dtype=DTYPE)
    tape.records = []


def finite_difference_grad(f, x, h=1e-5):
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x"""
    if h <= 0:
        raise ValidationError(f"finite_difference_grad: step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)

    def evaluate(arr):
        value = f(Tensor(arr))
        return value.item() if isinstance(value, Tensor) else float(value)

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = evaluate(base.copy())
        flat[i] = original - h
        minus = evaluate(base.copy())
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return Tensor(grad)


# ============================================================================
# ADAM
# ============================================================================

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(
            m=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            v=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            **hyper,
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place to params' data"""
    if lr <= 0:
        raise ValidationError(f"adam_step: learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step", (len(params),), (len(grads),), detail="parameter and gradient counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError("adam_step", p.shape, np.shape(g))

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


class Adam:
    """Adam over a fixed parameter list"""

    def __init__(self, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        grads = [p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE) for p in self.params]
        adam_step(self.params, grads, self.state, lr)


@dataclass(frozen=True)
class TrainSchedule:
    """Per-epoch learning rates; the number of epochs is len(lrs)"""

    lrs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "lrs", tuple(float(lr) for lr in self.lrs))
        for lr in self.lrs:
            if not lr > 0:
                raise ValidationError(f"learning rates must be positive, got {lr}")

    @property
    def epochs(self):
        return len(self.lrs)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, val_loss, seconds
    step_losses: list = field(default_factory=list)
    best_epoch: int = None


# ============================================================================
# PARAMETER CONTAINER
# ============================================================================

class ParameterSet:
    """Named parameter tensors plus the config that shapes them"""

    kind = "model"

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.history = TrainingHistory()

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays, source="checkpoint", ignore_prefix="selector/"):
        """Copy arrays into the parameters, requiring the exact same names and shapes"""
        expected = set(self.params)
        found = {name for name in arrays if not name.startswith(ignore_prefix)}
        if expected != found:
            missing = sorted(expected - found)[:3]
            extra = sorted(found - expected)[:3]
            raise ValidationError(f"{source} does not match the {self.kind} config (missing {missing}, unexpected {extra})")
        for name, tensor in self.params.items():
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != tensor.shape:
                raise ShapeError(f"load {name}", tensor.shape, value.shape)
            tensor.data = value.copy()
        return self
