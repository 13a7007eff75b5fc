"""Dense numeric core shared by every layer in the package.

Real matrices are float64 numpy arrays and complex channel grids are
complex128. Training gradients come from a small reverse-mode tape over
the primitive set the two sequence layers need: matrix products,
elementwise arithmetic, a numerically stable row softmax, tanh/sigmoid,
slicing/concatenation and reductions. Analytic gradients are verified
against central finite differences, and every matrix product can be
metered as multiply-accumulate pairs for complexity accounting.

Values are immutable after construction or owned by a single run; the
tape is single-run and single-thread.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "ConfigurationError",
    "NumericError",
    "TapeError",
    "Tensor",
    "GradTape",
    "FlopMeter",
    "AdamState",
    "matmul",
    "softmax_rows",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "softplus",
    "tanh",
    "sigmoid",
    "concat_cols",
    "concat_rows",
    "col_slice",
    "row_slice",
    "reshape",
    "sum_all",
    "mean_all",
    "backward",
    "grad_check",
    "compare_gradients",
    "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigurationError(ValueError):
    """A requested configuration is internally inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced or required a non-finite value."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: nesting or double consumption."""


_TAPE = None   # active GradTape; at most one per thread of execution
_METER = None  # active FlopMeter


class FlopMeter:
    """Counts multiply-accumulate pairs of matrix products run while active.

    Only matrix products are metered; softmax, scaling and other
    elementwise work are excluded from the count.
    """

    def __init__(self):
        self.total = 0
        self._prev = None

    def __enter__(self):
        global _METER
        self._prev = _METER
        _METER = self
        return self

    def __exit__(self, *exc):
        global _METER
        _METER = self._prev
        return False


def _mm(a, b):
    # Every matrix product funnels through here so instrumented counts see
    # exactly one MAC per scalar multiply-add.
    if _METER is not None:
        _METER.total += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def _check_mm(a, b, name):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"{name}: operands must be 2-d, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"{name}: {a.shape} x {b.shape}: inner dimensions disagree")


class Tensor:
    """Float64 array plus its accumulated gradient; a node of the tape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __matmul__(self, other):
        return matmul(self, other)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class GradTape:
    """Ordered record of one forward pass, consumed by a single backward().

    Parameters must be registered with :meth:`watch` before the forward
    pass; the backward pass visits recorded operations in exact reverse
    order and leaves each watched tensor's gradient in ``.grad``.
    """

    def __init__(self):
        self._ops = []
        self._watched = []
        self._consumed = False

    def watch(self, *tensors):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("watch() takes Tensor arguments")
            t.grad = None
            self._watched.append(t)
        return self

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise TapeError("gradient tapes do not nest")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False


def _record(out, fn):
    if _TAPE is not None:
        _TAPE._ops.append((out, fn))


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape the operand was broadcast from."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t, g):
    g = _unbroadcast(np.asarray(g), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    """Matrix product of 2-d operands; differentiable when given Tensors."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        at, bt = _as_tensor(a), _as_tensor(b)
        _check_mm(at.data, bt.data, "matmul")
        out = Tensor(_mm(at.data, bt.data))

        def _bwd(g):
            _accum(at, g @ bt.data.T)
            _accum(bt, at.data.T @ g)

        _record(out, _bwd)
        return out
    a, b = np.asarray(a), np.asarray(b)
    _check_mm(a, b, "matmul")
    return _mm(a, b)


def _softmax_data(x):
    if x.ndim != 2 or x.size == 0:
        raise ShapeError(f"softmax_rows: need a nonempty 2-d matrix, got shape {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a):
    """Row-wise softmax with max-shift; every output row sums to 1."""
    if isinstance(a, Tensor):
        y = _softmax_data(a.data)
        out = Tensor(y)

        def _bwd(g):
            _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

        _record(out, _bwd)
        return out
    return _softmax_data(np.asarray(a, dtype=np.float64))


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T)

    def _bwd(g):
        _accum(a, g.T)

    _record(out, _bwd)
    return out


def add(a, b):
    if isinstance(a, (int, float)) or isinstance(b, (int, float)):
        t = a if isinstance(a, Tensor) else b
        c = float(b if t is a else a)
        out = Tensor(t.data + c)

        def _bwd(g):
            _accum(t, g)

        _record(out, _bwd)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def _bwd(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, _bwd)
    return out


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    if isinstance(a, (int, float)):
        bt = _as_tensor(b)
        out = Tensor(float(a) - bt.data)

        def _bwd(g):
            _accum(bt, -g)

        _record(out, _bwd)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def _bwd(g):
        _accum(a, g)
        _accum(b, -g)

    _record(out, _bwd)
    return out


def mul(a, b):
    if isinstance(a, (int, float)) or isinstance(b, (int, float)):
        t = a if isinstance(a, Tensor) else b
        c = float(b if t is a else a)
        out = Tensor(t.data * c)

        def _bwd(g):
            _accum(t, g * c)

        _record(out, _bwd)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def _bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, _bwd)
    return out


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    bt = _as_tensor(b)
    if isinstance(a, (int, float)):
        y = float(a) / bt.data
        out = Tensor(y)

        def _bwd(g):
            _accum(bt, -g * y / bt.data)

        _record(out, _bwd)
        return out
    at = _as_tensor(a)
    y = at.data / bt.data
    out = Tensor(y)

    def _bwd(g):
        _accum(at, g / bt.data)
        _accum(bt, -g * y / bt.data)

    _record(out, _bwd)
    return out


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def _bwd(g):
        _accum(a, g * y)

    _record(out, _bwd)
    return out


def softplus(a):
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def _bwd(g):
        _accum(a, g * _sigmoid_data(a.data))

    _record(out, _bwd)
    return out


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def _bwd(g):
        _accum(a, g * (1.0 - y * y))

    _record(out, _bwd)
    return out


def _sigmoid_data(x):
    pos = x >= 0
    y = np.empty_like(x)
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid(a):
    a = _as_tensor(a)
    y = _sigmoid_data(a.data)
    out = Tensor(y)

    def _bwd(g):
        _accum(a, g * y * (1.0 - y))

    _record(out, _bwd)
    return out


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.data.shape[1] for p in parts]

    def _bwd(g):
        j = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, j:j + w])
            j += w

    _record(out, _bwd)
    return out


def concat_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    heights = [p.data.shape[0] for p in parts]

    def _bwd(g):
        i = 0
        for p, hgt in zip(parts, heights):
            _accum(p, g[i:i + hgt])
            i += hgt

    _record(out, _bwd)
    return out


def col_slice(a, j0, j1):
    a = _as_tensor(a)
    out = Tensor(a.data[:, j0:j1])

    def _bwd(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        _accum(a, full)

    _record(out, _bwd)
    return out


def row_slice(a, i0, i1):
    a = _as_tensor(a)
    out = Tensor(a.data[i0:i1])

    def _bwd(g):
        full = np.zeros_like(a.data)
        full[i0:i1] = g
        _accum(a, full)

    _record(out, _bwd)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def _bwd(g):
        _accum(a, g.reshape(a.data.shape))

    _record(out, _bwd)
    return out


def sum_all(a):
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def _bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    _record(out, _bwd)
    return out


def mean_all(a):
    a = _as_tensor(a)
    out = Tensor(a.data.mean())
    inv = 1.0 / a.data.size

    def _bwd(g):
        _accum(a, np.full_like(a.data, float(g) * inv))

    _record(out, _bwd)
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(theta) for every watched tensor of the tape.

    Returns the gradients in watch order; watched tensors that do not
    influence the loss get exact zeros. A tape can be walked once.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward()")
    tape._consumed = True
    if np.size(loss.data) != 1:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss.data)}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._ops):
        if out.grad is not None:
            fn(out.grad)
    grads = []
    for t in tape._watched:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        grads.append(t.grad)
    return grads


def _eval_scalar(f):
    v = f()
    v = float(v.data) if isinstance(v, Tensor) else float(v)
    if not np.isfinite(v):
        raise NumericError("objective returned a non-finite value")
    return v


def grad_check(f, params, h=1e-6):
    """Max relative mismatch between tape gradients of f() and central differences.

    ``f`` evaluates the scalar objective from the current parameter
    values; it is run once under a fresh tape for the analytic gradients
    and twice per coordinate for the finite differences.
    """
    params = list(params)
    tape = GradTape()
    tape.watch(*params)
    with tape:
        loss = f()
    value = float(loss.data) if isinstance(loss, Tensor) else float(loss)
    if not np.isfinite(value):
        raise NumericError("objective returned a non-finite value")
    if not isinstance(loss, Tensor):
        raise TypeError("objective must return a Tensor for analytic gradients")
    analytic = backward(tape, loss)
    return compare_gradients(analytic, f, params, h)


def compare_gradients(analytic, f, params, h=1e-6):
    """Core comparator behind grad_check; takes the analytic gradients explicitly.

    Error metric per coordinate: |a - d| / max(1e-12, |a| + |d|) with d
    the central difference (f(x+h) - f(x-h)) / 2h.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)  # view; perturbations hit p.data
        gflat = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f)
            flat[i] = orig - h
            fm = _eval_scalar(f)
            flat[i] = orig
            diff = (fp - fm) / (2.0 * h)
            a = float(gflat[i])
            rel = abs(a - diff) / max(1e-12, abs(a) + abs(diff))
            worst = max(worst, rel)
    return worst


class AdamState:
    """First/second moments plus hyperparameters for an ordered parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state, params, grads):
    """One bias-corrected Adam update; mutates params in place.

    Deterministic: identical (state, params, grads) produce bitwise
    identical results.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("parameter/gradient/state lengths disagree")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
