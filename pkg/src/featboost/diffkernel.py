"""Differentiable matrix primitives with an explicit reverse-mode tape.

Everything is a 64-bit-float matrix (`Tensor2`). Ops execute eagerly on
numpy; while a `GradTape` is active they also record a backward closure.
Replaying the closures in reverse execution order accumulates
vector-Jacobian products into the `.grad` of every tensor touched by the
forward pass, so gradients of a sum of losses are the sum of the
individual backwards.

Only the primitives the booster and its losses need are provided; this is
not a general autodiff system.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, EvaluationError, ShapeError

NORM_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_active_tape = None
_fault_op = None
_kink_probe = None


class Tensor2:
    """A (rows, cols) float64 matrix with an optional accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires a 2-D array, got shape {arr.shape}")
        self.data = arr
        self.grad = None

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor2(shape={self.data.shape})"


def tensor(data):
    """Wrap array-like data as a Tensor2; 1-D input becomes a single row."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Tensor2(arr)


class GradTape:
    """Ordered record of executed ops for one forward/backward pass.

    Single-owner: one forward pass recorded, one `gradient` replay. Use as
    a context manager; ops executed inside record their backward step.
    """

    def __init__(self):
        self._records = []
        self._replayed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("another GradTape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, fn):
        self._records.append(fn)

    def gradient(self, loss):
        """Seed d(loss)/d(loss) = 1 and replay the tape in reverse order."""
        if loss.data.size != 1:
            raise ShapeError("gradient() expects a scalar (1x1) loss")
        if self._replayed:
            raise RuntimeError("tape was already replayed")
        self._replayed = True
        loss.grad = np.ones((1, 1))
        for fn in reversed(self._records):
            fn()


class pause_tape:
    """Context manager suspending recording (stop-gradient section)."""

    def __enter__(self):
        global _active_tape
        self._saved = _active_tape
        _active_tape = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._saved
        return False


def current_tape():
    return _active_tape


def accumulate_grad(t, g):
    """Add an upstream contribution to t.grad (extension point for custom ops)."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def set_backward_fault(op_name):
    """Debug hook: make the named op's backward deliberately wrong.

    Supported names: 'sigmoid', 'relu', 'affine'. Pass None to clear. Used
    by the verification CLI to prove the gradient checker catches faults.
    """
    global _fault_op
    _fault_op = op_name


class probe_kinks:
    """Collect how close piecewise ops came to their kinks during a forward.

    Finite-difference checks are only meaningful at generic points; a
    forward run inside this context appends each piecewise op's minimum
    distance-to-kink to the list, so harnesses can reject instances whose
    margin is too small for the difference step.
    """

    def __init__(self):
        self.margins = []

    def __enter__(self):
        global _kink_probe
        self._saved = _kink_probe
        _kink_probe = self.margins
        return self

    def __exit__(self, exc_type, exc, tb):
        global _kink_probe
        _kink_probe = self._saved
        return False

    def min_margin(self):
        return min(self.margins) if self.margins else np.inf


def kink_probe_active():
    return _kink_probe is not None


def report_kink_margin(margin):
    if _kink_probe is not None:
        _kink_probe.append(float(margin))


def _probe_values(values):
    if _kink_probe is not None and values.size:
        _kink_probe.append(float(values.min()))


def _fault_scale(name, g):
    if _fault_op == name:
        return g * 1.01
    return g


def _unbroadcast(g, shape):
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    if not _broadcastable(a, b):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor2(a.data + b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
            accumulate_grad(b, _unbroadcast(g, b.data.shape))
        t.record(bwd)
    return out


def sub(a, b):
    if not _broadcastable(a, b):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor2(a.data - b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
            accumulate_grad(b, _unbroadcast(-g, b.data.shape))
        t.record(bwd)
    return out


def mul(a, b):
    if not _broadcastable(a, b):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor2(a.data * b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
            accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))
        t.record(bwd)
    return out


def div(a, b):
    if not _broadcastable(a, b):
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor2(a.data / b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(a, _unbroadcast(g / b.data, a.data.shape))
            accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        t.record(bwd)
    return out


def scale(x, c):
    c = float(c)
    out = Tensor2(x.data * c)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g * c)
        t.record(bwd)
    return out


def add_const(x, c):
    out = Tensor2(x.data + float(c))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g)
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor2(a.data @ b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(a, g @ b.data.T)
            accumulate_grad(b, a.data.T @ g)
        t.record(bwd)
    return out


def transpose(x):
    out = Tensor2(x.data.T.copy())
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g.T)
        t.record(bwd)
    return out


def affine(x, w, b):
    """x @ w + b with b a (1, cols) row broadcast over all rows of x."""
    if x.cols != w.rows:
        raise ShapeError(f"affine: input {x.shape} does not match weight {w.shape}")
    if b.shape != (1, w.cols):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    out = Tensor2(x.data @ w.data + b.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            g = _fault_scale("affine", g)
            accumulate_grad(x, g @ w.data.T)
            accumulate_grad(w, x.data.T @ g)
            accumulate_grad(b, g.sum(axis=0, keepdims=True))
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    _probe_values(np.abs(x.data))
    out = Tensor2(np.maximum(x.data, 0.0))
    t = _active_tape
    if t is not None:
        mask = x.data > 0.0
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, _fault_scale("relu", g * mask))
        t.record(bwd)
    return out


def sigmoid(x):
    # exp(-logaddexp(0, -x)) is stable for both large positive and negative x
    out = Tensor2(np.exp(-np.logaddexp(0.0, -x.data)))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, _fault_scale("sigmoid", g * out.data * (1.0 - out.data)))
        t.record(bwd)
    return out


def tanh_act(x):
    out = Tensor2(np.tanh(x.data))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g * (1.0 - out.data * out.data))
        t.record(bwd)
    return out


def abs_val(x):
    _probe_values(np.abs(x.data))
    out = Tensor2(np.abs(x.data))
    t = _active_tape
    if t is not None:
        sign = np.sign(x.data)
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g * sign)
        t.record(bwd)
    return out


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes everywhere inside, inclusive.

    Inclusive bounds keep gradients alive for values that sit exactly on
    the interval edge (e.g. a zero distance between identical unit vectors).
    """
    _probe_values(np.minimum(np.abs(x.data - lo), np.abs(x.data - hi)))
    out = Tensor2(np.clip(x.data, lo, hi))
    t = _active_tape
    if t is not None:
        mask = (x.data >= lo) & (x.data <= hi)
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g * mask)
        t.record(bwd)
    return out


def maximum_const(x, c):
    """Elementwise max(x, c); gradient flows only where x > c."""
    c = float(c)
    out = Tensor2(np.maximum(x.data, c))
    t = _active_tape
    if t is not None:
        mask = x.data > c
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, g * mask)
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# normalizations and softmaxes


def softmax_over_context(k):
    """Column-wise softmax: each channel is normalized over the context rows.

    Stabilized by subtracting the per-column max, so every finite input
    yields columns that sum to one.
    """
    if k.rows < 1:
        raise ShapeError("softmax_over_context needs at least one row")
    shifted = k.data - k.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = Tensor2(e / e.sum(axis=0, keepdims=True))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            p = out.data
            accumulate_grad(k, p * (g - (g * p).sum(axis=0, keepdims=True)))
        t.record(bwd)
    return out


def softmax_rows(x):
    """Row-wise softmax (each row sums to one), max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor2(e / e.sum(axis=1, keepdims=True))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            p = out.data
            accumulate_grad(x, p * (g - (g * p).sum(axis=1, keepdims=True)))
        t.record(bwd)
    return out


def l2_normalize(x):
    """Normalize each row to unit Euclidean length.

    Raises DegenerateVectorError if any row norm is at or below 1e-12.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("cannot normalize a (near-)zero row")
    out = Tensor2(x.data / norms)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            y = out.data
            accumulate_grad(x, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)
        t.record(bwd)
    return out


def layer_norm(x, gain, bias):
    """Per-row standardization (1/D variance, eps=1e-5) followed by scale-shift."""
    if x.cols < 2:
        raise ShapeError("layer_norm needs at least two columns")
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError("layer_norm gain/bias must be (1, cols) rows")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out = Tensor2(xhat * gain.data + bias.data)
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(gain, (g * xhat).sum(axis=0, keepdims=True))
            accumulate_grad(bias, g.sum(axis=0, keepdims=True))
            gx = g * gain.data
            accumulate_grad(
                x,
                (gx - gx.mean(axis=1, keepdims=True)
                 - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * inv_std,
            )
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_over_rows(x):
    """Column totals: (N, D) -> (1, D)."""
    out = Tensor2(x.data.sum(axis=0, keepdims=True))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, np.broadcast_to(g, x.data.shape))
        t.record(bwd)
    return out


def sum_over_cols(x):
    """Row totals: (N, D) -> (N, 1)."""
    out = Tensor2(x.data.sum(axis=1, keepdims=True))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, np.broadcast_to(g, x.data.shape))
        t.record(bwd)
    return out


def sum_all(x):
    out = Tensor2(np.array([[x.data.sum()]]))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, np.broadcast_to(g, x.data.shape))
        t.record(bwd)
    return out


def cumsum_cols(x):
    """Cumulative sum along each row (axis 1)."""
    out = Tensor2(np.cumsum(x.data, axis=1))
    t = _active_tape
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, np.flip(np.cumsum(np.flip(g, axis=1), axis=1), axis=1))
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, params, h=1e-5, sample=None, rng=None, noise_floor=1e-9):
    """Compare tape gradients of f() against central finite differences.

    `f` must be a pure scalar function of the `params` tensors (closures).
    Returns the maximum over checked coordinates of
    |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).

    With `sample` set, at most that many coordinates per parameter are
    checked (chosen by `rng`); otherwise every coordinate is.

    Coordinates where both gradients fall below `noise_floor` count as
    agreeing: the symmetric difference of a truly flat direction cancels
    to machine epsilon times |f|, which reads as ~1e-12 after division by
    2h, and the relative-error floor would misreport that noise.
    """
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("function value is not finite")
    tape.gradient(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if sample is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gaf = ga.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            idxs = range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError("perturbed function value is not finite")
            gfd = (fp - fm) / (2.0 * h)
            if abs(gaf[i]) < noise_floor and abs(gfd) < noise_floor:
                continue
            rel = abs(gaf[i] - gfd) / max(1e-8, abs(gaf[i]) + abs(gfd))
            if rel > worst:
                worst = rel
    return worst
