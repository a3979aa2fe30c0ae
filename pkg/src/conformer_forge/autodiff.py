"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is 64-bit floats.  Operations executed inside a ``with Tape():``
block are recorded in creation order (hence topologically ordered) and
``backward`` traverses the record once in reverse, accumulating gradients
with ``+=`` into leaf tensors.  Outside a tape, ops run in plain no-grad
mode, which keeps evaluation cheap.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BatchNorm",
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "div",
    "exp",
    "gather_rows",
    "grad_check",
    "huber",
    "leaky_relu",
    "matmul",
    "mul",
    "neg",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "segment_sum",
    "softmax_rows",
    "sqrt",
    "sub",
    "tanh",
]


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of op results; the implicit graph for one backward pass."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._prev
        return False


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


class Parameter(Tensor):
    """Named trainable leaf with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(value: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(value)
    tape = Tape._active
    if tape is not None:
        out.parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value + b.value

    def bw(g, out=None):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return _make(val, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value - b.value

    def bw(g, out=None):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return _make(val, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g, out=None):
        _accumulate(a, -g)

    return _make(-a.value, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value * b.value

    def bw(g, out=None):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(val, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value / b.value

    def bw(g, out=None):
        _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
        _accumulate(b, _unbroadcast(-g * a.value / b.value**2, b.value.shape))

    return _make(val, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def bw(g, out=None):
        _accumulate(a, g * c)

    return _make(a.value * c, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value

    def bw(g, out=None):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _make(val, (a, b), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0

    def bw(g, out=None):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0

    def bw(g, out=None):
        _accumulate(a, g * np.where(mask, 1.0, slope))

    return _make(np.where(mask, a.value, slope * a.value), (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    val = np.tanh(a.value)

    def bw(g, out=None):
        _accumulate(a, g * (1.0 - val**2))

    return _make(val, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    val = np.exp(a.value)

    def bw(g, out=None):
        _accumulate(a, g * val)

    return _make(val, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    val = np.sqrt(a.value)

    def bw(g, out=None):
        _accumulate(a, g / (2.0 * val))

    return _make(val, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    val = np.concatenate([t.value for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g, out=None):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(val, tuple(tensors), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bw(g, out=None):
        _accumulate(a, g.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), bw)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g, out=None):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())

    return _make(val, (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    val = a.value.mean(axis=axis, keepdims=keepdims)

    def bw(g, out=None):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.value.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g / count, a.value.shape).copy())

    return _make(val, (a,), bw)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=1, keepdims=True)

    def bw(g, out=None):
        inner = (g * val).sum(axis=1, keepdims=True)
        _accumulate(a, val * (g - inner))

    return _make(val, (a,), bw)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g, out=None):
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(a.value[idx], (a,), bw)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by segment_ids."""
    a = _as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    val = np.zeros((num_segments,) + a.value.shape[1:])
    np.add.at(val, ids, a.value)

    def bw(g, out=None):
        _accumulate(a, g[ids])

    return _make(val, (a,), bw)


def huber(a, delta: float = 2.0) -> Tensor:
    """Elementwise Huber value: quadratic within delta, linear outside."""
    a = _as_tensor(a)
    absx = np.abs(a.value)
    val = np.where(absx <= delta, 0.5 * a.value**2, delta * absx - 0.5 * delta**2)

    def bw(g, out=None):
        _accumulate(a, g * np.clip(a.value, -delta, delta))

    return _make(val, (a,), bw)


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through a recorded tape.

    Gradients accumulate (+=) into leaf tensors, so a second call on the
    same tape doubles them; interior node gradients are reset per call.
    """
    if loss.value.size != 1:
        raise ShapeError("loss must be scalar")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


class BatchNorm:
    """Batch normalization over rows of a (batch, features) tensor."""

    def __init__(self, features: int, name: str = "bn", eps: float = 1e-5,
                 momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(features))
        self.beta = Parameter(f"{name}.beta", np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            if x.value.shape[0] < 2:
                raise ShapeError("batchnorm needs batch >= 2 in train mode")
            mu = reduce_mean(x, axis=0, keepdims=True)
            xc = sub(x, mu)
            var = reduce_mean(mul(xc, xc), axis=0, keepdims=True)
            xhat = div(xc, sqrt(add(var, np.full_like(var.value, self.eps))))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.value.ravel()
            self.running_var = (1 - m) * self.running_var + m * var.value.ravel()
        else:
            xc = sub(x, self.running_mean[None, :])
            xhat = div(xc, np.sqrt(self.running_var + self.eps)[None, :])
        return add(mul(xhat, self.gamma), self.beta)


def grad_check(fn, inputs: list[Tensor], h: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None,
               skip_near_kink: float | None = None,
               skip_nonsmooth: bool = False,
               min_magnitude: float | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must return a scalar Tensor when called with no arguments (it
    closes over ``inputs``).  With ``sample`` set, only that many randomly
    chosen coordinates per input tensor are checked.  Coordinates with
    ``|x| < skip_near_kink`` are excluded (non-differentiable points).
    ``skip_nonsmooth`` drops coordinates whose forward and backward one-sided
    differences disagree, which flags an activation kink inside the stencil
    where central differences and any subgradient convention both break down.
    ``min_magnitude`` drops coordinates where both gradients are smaller than
    the given floor; central differences cannot resolve gradients below
    roughly ``|f|*eps/h`` so comparing them there only measures noise.
    """
    with Tape() as tape:
        loss = fn()
    for t in inputs:
        t.grad = None if not isinstance(t, Parameter) else np.zeros_like(t.value)
    backward(tape, loss)
    f0 = float(loss.value)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        flat = t.value.ravel()
        coords = np.arange(flat.size)
        if skip_near_kink is not None:
            coords = coords[np.abs(flat[coords]) >= skip_near_kink]
        if sample is not None and coords.size > sample:
            coords = rng.choice(coords, size=sample, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(fn().value)
            flat[c] = orig - h
            fm = float(fn().value)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.ravel()[c]
            if min_magnitude is not None and \
                    max(abs(a), abs(numeric)) < min_magnitude:
                continue
            if skip_nonsmooth:
                fwd = (fp - f0) / h
                bwd = (f0 - fm) / h
                if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-8):
                    continue
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
    return worst
