"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every primitive as it executes; nodes are appended in
execution order, so the list is topologically sorted by construction.
backward() walks the list in reverse and accumulates adjoints into the
``grad`` field of any tensor with ``requires_grad`` set. Calling backward
twice on the same tape without zeroing grads accumulates twice.

Everything is float64: the finite-difference oracle used throughout the
test suite needs ~1e-4 relative agreement, which float32 cannot deliver.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erfc as _erfc, expit as _expit

_INV_SQRT2 = float(2.0 ** -0.5)
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive."""


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


class Node:
    """One recorded primitive: inputs, output, and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Tape:
    """Ordered record of primitives; one tape per forward/backward pass.

    Tapes share no state, so independent tapes can run on separate threads.
    """

    def __init__(self):
        self.nodes = []

    def _record(self, op, inputs, out_data, vjp):
        out = Tensor(out_data)
        self.nodes.append(Node(op, inputs, out, vjp))
        return out

    # -- elementwise ---------------------------------------------------

    def _same_shape(self, op, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def add(self, a, b):
        self._same_shape("add", a, b)
        return self._record("add", [a, b], a.data + b.data, lambda g: (g, g))

    def sub(self, a, b):
        self._same_shape("sub", a, b)
        return self._record("sub", [a, b], a.data - b.data, lambda g: (g, -g))

    def mul(self, a, b):
        self._same_shape("mul", a, b)
        ad, bd = a.data, b.data
        return self._record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))

    def div(self, a, b):
        self._same_shape("div", a, b)
        ad, bd = a.data, b.data
        return self._record("div", [a, b], ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))

    def scale_shift(self, x, scale=1.0, shift=0.0):
        """y = scale*x + shift with python-float constants."""
        s = float(scale)
        return self._record("scale_shift", [x], s * x.data + float(shift), lambda g: (g * s,))

    def badd(self, x, b):
        """Bias addition: b broadcasts against x (the one sanctioned broadcast)."""
        try:
            out = x.data + b.data
        except ValueError as e:
            raise ShapeError(f"badd: {x.shape} + {b.shape}: {e}") from None
        if out.shape != x.shape:
            raise ShapeError(f"badd: bias {b.shape} must broadcast into {x.shape}")
        return self._record("badd", [x, b], out, lambda g: (g, _unbroadcast(g, b.shape)))

    def square(self, x):
        xd = x.data
        return self._record("square", [x], xd * xd, lambda g: (2.0 * g * xd,))

    def relu(self, x):
        mask = x.data > 0
        return self._record("relu", [x], np.where(mask, x.data, 0.0), lambda g: (g * mask,))

    def sigmoid(self, x):
        s = _expit(x.data)
        return self._record("sigmoid", [x], s, lambda g: (g * s * (1.0 - s),))

    def tanh(self, x):
        t = np.tanh(x.data)
        return self._record("tanh", [x], t, lambda g: (g * (1.0 - t * t),))

    def softplus(self, x):
        xd = x.data
        out = np.logaddexp(0.0, xd)
        sig = _expit(xd)
        return self._record("softplus", [x], out, lambda g: (g * sig,))

    def log(self, x):
        xd = x.data
        return self._record("log", [x], np.log(xd), lambda g: (g / xd,))

    def exp(self, x):
        e = np.exp(x.data)
        return self._record("exp", [x], e, lambda g: (g * e,))

    def clip_min(self, x, lo):
        """max(x, lo); gradient passes only where x > lo."""
        mask = x.data > lo
        return self._record("clip_min", [x], np.maximum(x.data, lo), lambda g: (g * mask,))

    def clip(self, x, lo, hi):
        mask = (x.data > lo) & (x.data < hi)
        return self._record("clip", [x], np.clip(x.data, lo, hi), lambda g: (g * mask,))

    def norm_cdf(self, x):
        """Standard normal CDF via erfc (precise in the tails)."""
        xd = x.data
        out = 0.5 * _erfc(-xd * _INV_SQRT2)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return self._record("norm_cdf", [x], out, lambda g: (g * pdf,))

    # -- straight-through ----------------------------------------------

    def ste_round(self, x):
        """Round half away from zero; backward is identity."""
        xd = x.data
        out = np.sign(xd) * np.floor(np.abs(xd) + 0.5)
        return self._record("ste_round", [x], out, lambda g: (g,))

    def ste_sign(self, x):
        """sign with sign(0) := +1; backward is identity."""
        out = np.where(x.data >= 0, 1.0, -1.0)
        return self._record("ste_sign", [x], out, lambda g: (g,))

    # -- linear algebra ------------------------------------------------

    def matmul(self, a, b):
        ad, bd = a.data, b.data
        if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
            raise ShapeError(f"matmul: ranks {ad.ndim} and {bd.ndim} unsupported")
        if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def vjp(g):
            return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

        return self._record("matmul", [a, b], out, vjp)

    def conv2d(self, x, w, stride=1, pad=0):
        """NHWC conv with OIHW-free weights of shape (kh, kw, cin, cout)."""
        xd, wd = x.data, w.data
        if xd.ndim != 4 or wd.ndim != 4:
            raise ShapeError(f"conv2d: need 4-D input/weight, got {xd.shape}, {wd.shape}")
        kh, kw, cin, cout = wd.shape
        if xd.shape[3] != cin:
            raise ShapeError(f"conv2d: input channels {xd.shape[3]} != weight cin {cin}")
        n, h, wdt, _ = xd.shape
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
        ho = (xp.shape[1] - kh) // stride + 1
        wo = (xp.shape[2] - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {xp.shape}")
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
        wmat = wd.reshape(kh * kw * cin, cout)
        out = (cols @ wmat).reshape(n, ho, wo, cout)

        def vjp(g):
            gflat = g.reshape(n * ho * wo, cout)
            gw = (cols.T @ gflat).reshape(kh, kw, cin, cout)
            gcols = (gflat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wdt, :] if pad else gxp
            return gx, gw

        return self._record("conv2d", [x, w], out, vjp)

    def upsample2x(self, x):
        """Nearest-neighbour 2x upsampling over H and W of an NHWC tensor."""
        xd = x.data
        if xd.ndim != 4:
            raise ShapeError(f"upsample2x: need 4-D input, got {xd.shape}")
        out = xd.repeat(2, axis=1).repeat(2, axis=2)
        n, h, w, c = xd.shape

        def vjp(g):
            return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

        return self._record("upsample2x", [x], out, vjp)

    # -- reductions & shape --------------------------------------------

    def sum(self, x, axis=None, keepdims=False):
        axes = _axis_tuple(axis, x.data.ndim)
        out = x.data.sum(axis=axes, keepdims=keepdims)
        shape = x.shape

        def vjp(g):
            gk = g if keepdims else np.expand_dims(g, axes) if axes else g
            return (np.broadcast_to(gk, shape).copy(),)

        return self._record("sum", [x], out, vjp)

    def mean(self, x, axis=None, keepdims=False):
        axes = _axis_tuple(axis, x.data.ndim)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = x.data.mean(axis=axes, keepdims=keepdims)
        shape = x.shape

        def vjp(g):
            gk = g if keepdims else np.expand_dims(g, axes) if axes else g
            return (np.broadcast_to(gk, shape).copy() / count,)

        return self._record("mean", [x], out, vjp)

    def concat(self, xs, axis=0):
        xs = list(xs)
        if not xs:
            raise ShapeError("concat: empty input list")
        out = np.concatenate([t.data for t in xs], axis=axis)
        sizes = [t.shape[axis] for t in xs]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record("concat", xs, out, vjp)

    def slice_axis(self, x, axis, start, stop):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        out = x.data[idx].copy()

        def vjp(g):
            gx = np.zeros(x.shape)
            gx[idx] = g
            return (gx,)

        return self._record("slice_axis", [x], out, vjp)

    def reshape(self, x, shape):
        shape = tuple(shape)
        out = x.data.reshape(shape)
        orig = x.shape
        return self._record("reshape", [x], out, lambda g: (g.reshape(orig),))

    def transpose(self, x, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return self._record("transpose", [x], x.data.transpose(axes), lambda g: (g.transpose(inv),))

    def expand_to(self, x, shape):
        """Explicit broadcast to `shape`; backward sums over the expanded axes.

        Broadcasts are materialized as tape nodes so the graph stays auditable.
        """
        shape = tuple(shape)
        try:
            out = np.broadcast_to(x.data, shape).copy()
        except ValueError:
            raise ShapeError(f"expand_to: cannot broadcast {x.shape} to {shape}") from None
        orig = x.shape
        return self._record("expand_to", [x], out, lambda g: (_unbroadcast(g, orig),))


_PRIMITIVES = {
    "add": Tape.add,
    "sub": Tape.sub,
    "mul": Tape.mul,
    "div": Tape.div,
    "matmul": Tape.matmul,
    "conv2d": Tape.conv2d,
    "upsample2x": Tape.upsample2x,
    "relu": Tape.relu,
    "sigmoid": Tape.sigmoid,
    "tanh": Tape.tanh,
    "softplus": Tape.softplus,
    "log": Tape.log,
    "exp": Tape.exp,
    "square": Tape.square,
    "sum": Tape.sum,
    "mean": Tape.mean,
    "concat": Tape.concat,
    "badd": Tape.badd,
    "scale_shift": Tape.scale_shift,
    "clip_min": Tape.clip_min,
    "clip": Tape.clip,
    "norm_cdf": Tape.norm_cdf,
    "ste_round": Tape.ste_round,
    "ste_sign": Tape.ste_sign,
    "reshape": Tape.reshape,
    "transpose": Tape.transpose,
    "expand_to": Tape.expand_to,
    "slice_axis": Tape.slice_axis,
}


def forward_primitive(tape, op, inputs, **kwargs):
    """Run a primitive by name on the given tape (dispatch table)."""
    if op not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    if op == "concat":
        return _PRIMITIVES[op](tape, inputs, **kwargs)
    return _PRIMITIVES[op](tape, *inputs, **kwargs)


def _adjoints(tape, loss):
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    adjoint = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    # Reverse execution order is reverse topological order: by the time a
    # node is visited every consumer of its output has already contributed.
    for node in reversed(tape.nodes):
        g = adjoint.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(t)
            tensors[key] = t
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
    return adjoint, tensors


def backward(tape, loss):
    """Accumulate d(loss)/d(t) into t.grad for every tensor with requires_grad."""
    adjoint, tensors = _adjoints(tape, loss)
    for key, t in tensors.items():
        if t.requires_grad:
            t.accumulate_grad(adjoint[key])


def grad_of(tape, loss, wrt):
    """One-off gradient of `loss` w.r.t. the tensors in `wrt` (no accumulation)."""
    adjoint, _ = _adjoints(tape, loss)
    return [adjoint.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_difference_check(f, x, step=1e-5, coords=None):
    """Max relative error between analytic and central-difference gradients.

    `f` maps (tape, Tensor) -> scalar Tensor and must be deterministic across
    calls (fix any noise by seed inside f). Error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over the checked
    coordinates is returned. `coords` restricts the check to a subset of flat
    indices (central differences cost two evaluations per coordinate).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = Tensor(x0.copy(), requires_grad=True)
    loss = f(tape, xt)
    backward(tape, loss)
    analytic = xt.grad.ravel() if xt.grad is not None else np.zeros(x0.size)
    if not np.all(np.isfinite(analytic)) or not np.isfinite(loss.data):
        raise FloatingPointError("non-finite value in analytic gradient or loss")

    def evaluate(arr):
        val = f(Tape(), Tensor(arr)).data
        if not np.isfinite(val):
            raise FloatingPointError("non-finite value during finite differencing")
        return float(val)

    if coords is None:
        coords = range(x0.size)
    worst = 0.0
    flat = x0.ravel()
    for i in coords:
        orig = flat[i]
        pert = x0.copy().ravel()
        pert[i] = orig + step
        up = evaluate(pert.reshape(x0.shape))
        pert[i] = orig - step
        dn = evaluate(pert.reshape(x0.shape))
        numeric = (up - dn) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
