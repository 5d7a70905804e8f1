"""Tape-based reverse-mode automatic differentiation over dense numpy buffers.

Activations use NCHW layout. Ops executed while a Tape is active (as a
context manager on the current thread) are recorded in forward order;
``Tape.backward`` replays them in reverse exactly once, accumulating into
the ``.grad`` buffers of leaf tensors. With no active tape the same ops
run as plain numpy forwards.

Leaf gradients accumulate across backward calls; ``ParamSet.zero_grad``
resets them. A tape and its tensors belong to one logical execution
context and must not be shared between threads.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    pass


class DimensionError(AutodiffError):
    """Input shapes violate an op's contract."""


class DegenerateShapeError(DimensionError):
    """An op would produce or reduce over a zero-size extent."""


class ContractError(AutodiffError):
    """API misuse: non-scalar loss, missing grad, foreign tape, ..."""


class NumericError(AutodiffError):
    """Non-finite values surfaced during forward; carries the layer path."""

    def __init__(self, path: str):
        super().__init__(f"non-finite values at {path}")
        self.path = path


class Tensor:
    """Dense array with an optional grad buffer and a tape handle.

    Values are immutable after creation by an op; only ``grad`` mutates
    (and ``values`` of explicitly designated state buffers, e.g. batch
    norm running statistics, which are never recorded on a tape).
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values = values
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def constant(values, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def parameter(values, dtype=None) -> Tensor:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if arr.dtype not in FLOAT_DTYPES:
        raise ContractError(f"parameters must be f32/f64, got {arr.dtype}")
    return Tensor(arr.copy(), requires_grad=True)


_tls = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Each entry keeps the input tensors, the output tensor, and a closure
    holding the saved intermediates for the backward pass. Recording
    order is topological by construction; backward visits entries once,
    in reverse.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._live: set[int] = set()
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def _assign_id(self, t: Tensor) -> None:
        t.node_id = self._next_id
        self._next_id += 1

    def is_live(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._live

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id is None:
                self._assign_id(t)
        self._assign_id(out)
        self._live.add(id(out))
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

        Leaf grads add (+=) across calls so multiple losses sum their
        gradients; intermediate grads are local to this call.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if not (loss.requires_grad or id(loss) in self._live):
            raise ContractError("loss tensor was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}

        def _leaf_accumulate(t: Tensor, d: np.ndarray) -> None:
            if t.grad is None:
                t.grad = d.astype(t.dtype, copy=True)
            else:
                t.grad = t.grad + d

        if loss.requires_grad:
            _leaf_accumulate(loss, grads[id(loss)])
        for out, inputs, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            dins = vjp(g)
            for t, d in zip(inputs, dins):
                if d is None:
                    continue
                if t.requires_grad:
                    _leaf_accumulate(t, d)
                elif id(t) in self._live:
                    prev = grads.get(id(t))
                    grads[id(t)] = d if prev is None else prev + d


def _apply(inputs: Sequence[Tensor], out_values: np.ndarray, vjp_builder: Callable) -> Tensor:
    """Wrap a forward result, recording a vjp when the active tape needs one.

    ``vjp_builder(needs)`` receives per-input need flags and returns the
    backward closure; it is only called when at least one input is live.
    """
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None:
        needs = tuple(tape.is_live(t) for t in inputs)
        if any(needs):
            tape.record(out, tuple(inputs), vjp_builder(needs))
    return out


def _same_dtype(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise DimensionError(f"dtype mismatch: {d} vs {t.dtype}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "add")
    return _apply([a, b], a.values + b.values,
                  lambda needs: lambda g: (g if needs[0] else None, g if needs[1] else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "sub")
    return _apply([a, b], a.values - b.values,
                  lambda needs: lambda g: (g if needs[0] else None, -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _apply([a, b], av * bv,
                  lambda needs: lambda g: (g * bv if needs[0] else None, g * av if needs[1] else None))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply([x], x.values * np.asarray(c, dtype=x.dtype),
                  lambda needs: lambda g: (g * np.asarray(c, dtype=x.dtype),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _apply([x], x.values + np.asarray(float(c), dtype=x.dtype),
                  lambda needs: lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    xv = x.values
    return _apply([x], np.maximum(xv, 0),
                  lambda needs: lambda g: (g * (xv > 0),))


def abs_(x: Tensor) -> Tensor:
    xv = x.values
    return _apply([x], np.abs(xv),
                  lambda needs: lambda g: (g * np.sign(xv),))


def exp(x: Tensor) -> Tensor:
    ov = np.exp(x.values)
    return _apply([x], ov, lambda needs: lambda g: (g * ov,))


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    ov = np.empty_like(xv)
    pos = xv >= 0
    ov[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    ov[~pos] = e / (1.0 + e)
    return _apply([x], ov, lambda needs: lambda g: (g * ov * (1.0 - ov),))


def tanh(x: Tensor) -> Tensor:
    ov = np.tanh(x.values)
    return _apply([x], ov, lambda needs: lambda g: (g * (1.0 - ov * ov),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    xv = x.values
    ov = np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0)

    def vjp_builder(needs):
        def vjp(g):
            s = np.empty_like(xv)
            pos = xv >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
            e = np.exp(xv[~pos])
            s[~pos] = e / (1.0 + e)
            return (g * s,)
        return vjp

    return _apply([x], ov, vjp_builder)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; at ties the subgradient routes to the first input."""
    _same_dtype(a, b)
    _same_shape(a, b, "minimum")
    take_a = a.values <= b.values
    return _apply([a, b], np.where(take_a, a.values, b.values),
                  lambda needs: lambda g: (g * take_a if needs[0] else None,
                                           g * ~take_a if needs[1] else None))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero subgradient outside the open interval."""
    xv = x.values
    inside = (xv > lo) & (xv < hi)
    return _apply([x], np.clip(xv, lo, hi),
                  lambda needs: lambda g: (g * inside,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.values)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _apply([x], x.values.reshape(shape),
                  lambda needs: lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _apply([x], x.values.transpose(axes),
                  lambda needs: lambda g: (g.transpose(inv),))


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of an NCHW tensor by p."""
    if x.values.ndim != 4:
        raise DimensionError("pad2d expects NCHW input")
    ov = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)))
    return _apply([x], ov,
                  lambda needs: lambda g: (g[:, :, p:g.shape[2] - p, p:g.shape[3] - p] if p else g,))


def pad2d_replicate(x: Tensor, p: int) -> Tensor:
    """Edge-replicate padding of the trailing spatial axes; keeps constant
    inputs constant, unlike zero padding."""
    if x.values.ndim != 4:
        raise DimensionError("pad2d_replicate expects NCHW input")
    xv = x.values
    n, c, h, w = xv.shape
    ri = np.clip(np.arange(-p, h + p), 0, h - 1)
    ci = np.clip(np.arange(-p, w + p), 0, w - 1)
    ov = xv[:, :, ri][:, :, :, ci]

    def vjp_builder(needs):
        def vjp(g):
            tmp = np.zeros((n, c, h, w + 2 * p), dtype=xv.dtype)
            np.add.at(tmp, (slice(None), slice(None), ri), g)
            dx = np.zeros((n, c, h, w), dtype=xv.dtype)
            np.add.at(dx, (slice(None), slice(None), slice(None), ci), tmp)
            return (dx,)
        return vjp

    return _apply([x], ov, vjp_builder)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise DimensionError("concat of empty list")
    _same_dtype(*xs)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.values.ndim != 4 or t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise DimensionError(f"concat: incompatible shape {t.shape} vs {xs[0].shape}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    ov = np.concatenate([t.values for t in xs], axis=1)

    def vjp_builder(needs):
        def vjp(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None
                         for i in range(len(xs)))
        return vjp

    return _apply(list(xs), ov, vjp_builder)


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce(x: Tensor, op: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over the given axes."""
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduce op {op!r}")
    ax = _norm_axes(axes, x.values.ndim)
    count = 1
    for a in ax:
        if x.shape[a] == 0:
            raise DegenerateShapeError(f"reduce over empty axis {a}")
        count *= x.shape[a]
    ov = x.values.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        ov = ov / np.asarray(count, dtype=x.dtype)
    in_shape = x.shape
    kept = tuple(1 if a in ax else s for a, s in enumerate(in_shape))

    def vjp_builder(needs):
        def vjp(g):
            gg = g if keepdims else g.reshape(kept)
            d = np.broadcast_to(gg, in_shape)
            if op == "mean":
                d = d / np.asarray(count, dtype=x.dtype)
            else:
                d = d.copy()
            return (d,)
        return vjp

    return _apply([x], ov, vjp_builder)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(x, "sum", axes, keepdims)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(x, "mean", axes, keepdims)


def softmax_log(x: Tensor, axis: int) -> Tensor:
    """Numerically stable log-softmax along one axis."""
    xv = x.values
    m = xv.max(axis=axis, keepdims=True)
    s = xv - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    ov = s - lse

    def vjp_builder(needs):
        def vjp(g):
            return (g - np.exp(ov) * g.sum(axis=axis, keepdims=True),)
        return vjp

    return _apply([x], ov, vjp_builder)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    """x / ||x||_2 along one axis; eps keeps the zero vector finite."""
    xv = x.values
    n = np.sqrt((xv * xv).sum(axis=axis, keepdims=True) + np.asarray(eps, dtype=x.dtype))
    ov = xv / n

    def vjp_builder(needs):
        def vjp(g):
            dot = (g * xv).sum(axis=axis, keepdims=True)
            return (g / n - xv * (dot / (n * n * n)),)
        return vjp

    return _apply([x], ov, vjp_builder)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D or leading-batched 3-D operands."""
    _same_dtype(a, b)
    av, bv = a.values, b.values
    if av.ndim not in (2, 3) or bv.ndim not in (2, 3):
        raise DimensionError("matmul supports 2-D or 3-D operands")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: inner dims {av.shape} @ {bv.shape}")
    ov = np.matmul(av, bv)

    def vjp_builder(needs):
        def vjp(g):
            da = db = None
            if needs[0]:
                da = np.matmul(g, bv.swapaxes(-1, -2))
                while da.ndim > av.ndim:
                    da = da.sum(axis=0)
            if needs[1]:
                db = np.matmul(av.swapaxes(-1, -2), g)
                while db.ndim > bv.ndim:
                    db = db.sum(axis=0)
            return (da, db)
        return vjp

    return _apply([a, b], ov, vjp_builder)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b for 2-D x (rows are batch items); bias broadcasts over rows."""
    _same_dtype(x, w)
    xv, wv = x.values, w.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"linear: {xv.shape} @ {wv.shape}")
    ov = xv @ wv
    inputs = [x, w]
    if b is not None:
        if b.shape != (wv.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape}")
        ov = ov + b.values
        inputs.append(b)

    def vjp_builder(needs):
        def vjp(g):
            outs = [g @ wv.T if needs[0] else None,
                    xv.T @ g if needs[1] else None]
            if b is not None:
                outs.append(g.sum(axis=0) if needs[2] else None)
            return tuple(outs)
        return vjp

    return _apply(inputs, ov, vjp_builder)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the backward scatter-adds into the table's grad."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise DimensionError("embedding ids out of range")
    ov = table.values[ids]

    def vjp_builder(needs):
        def vjp(g):
            dt = np.zeros_like(table.values)
            np.add.at(dt, ids, g)
            return (dt,)
        return vjp

    return _apply([table], ov, vjp_builder)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_out_size(h: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@lru_cache(maxsize=256)
def _im2col_index(c: int, h: int, w: int, k: int, stride: int, dilation: int, pad: int):
    """Gather index (C*k*k, L) into a flattened padded (C, Hp, Wp) image."""
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = conv_out_size(h, k, stride, dilation, pad)
    wo = conv_out_size(w, k, stride, dilation, pad)
    ci = np.repeat(np.arange(c), k * k)
    ky = np.tile(np.repeat(np.arange(k), k), c)
    kx = np.tile(np.arange(k), c * k)
    oy = stride * np.repeat(np.arange(ho), wo)
    ox = stride * np.tile(np.arange(wo), ho)
    rows = ky[:, None] * dilation + oy[None, :]
    cols = kx[:, None] * dilation + ox[None, :]
    idx = (ci[:, None] * hp + rows) * wp + cols
    return idx.astype(np.intp), hp, wp, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1,
           dilation: int = 1, groups: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x:(N,C,H,W) w:(O,I,k,k) with I = C/groups.

    Forward gathers an im2col matrix and runs one grouped matmul; the
    backward scatters the column gradient back with a bincount-based
    col2im (deterministic accumulation order).
    """
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIkk weight")
    _same_dtype(x, w)
    n, c, h, ww = xv.shape
    o, i, k, k2 = wv.shape
    if k != k2:
        raise DimensionError("conv2d kernels must be square")
    if min(k, stride, dilation) < 1 or pad < 0:
        raise DimensionError("conv2d: k, stride, dilation must be >= 1 and pad >= 0")
    if c % groups or o % groups:
        raise DimensionError(f"conv2d: channels {c}/{o} not divisible by groups {groups}")
    if i != c // groups:
        raise DimensionError(f"conv2d: weight expects {i} input channels/group, x has {c // groups}")
    ho = conv_out_size(h, k, stride, dilation, pad)
    wo = conv_out_size(ww, k, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise DegenerateShapeError(f"conv2d output {ho}x{wo} for input {h}x{ww}")

    # pointwise fast path: the column matrix is just a reshape of x
    pointwise = k == 1 and stride == 1 and pad == 0
    if pointwise:
        idx = hp = wp = None
        col = xv.reshape(n, c, ho * wo)
    else:
        idx, hp, wp, _, _ = _im2col_index(c, h, ww, k, stride, dilation, pad)
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
        col = xp.reshape(n, c * hp * wp)[:, idx.ravel()].reshape(n, c * k * k, ho * wo)
    og, ckkg = o // groups, i * k * k
    colg = col.reshape(n, groups, ckkg, ho * wo)
    wg = wv.reshape(groups, og, ckkg)
    ov = np.matmul(wg[None], colg).reshape(n, o, ho, wo)
    inputs = [x, w]
    if b is not None:
        if b.shape != (o,):
            raise DimensionError(f"conv2d bias shape {b.shape}, expected ({o},)")
        ov = ov + b.values.reshape(1, o, 1, 1)
        inputs.append(b)

    def vjp_builder(needs):
        def vjp(g):
            gg = g.reshape(n, groups, og, ho * wo)
            dw = db = dx = None
            if needs[1]:
                dw = np.matmul(gg, colg.swapaxes(-1, -2)).sum(axis=0).reshape(o, i, k, k)
            if b is not None and needs[2]:
                db = g.sum(axis=(0, 2, 3))
            if needs[0]:
                dcol = np.matmul(wg.swapaxes(-1, -2)[None], gg)
                if pointwise:
                    dx = dcol.reshape(n, c, h, ww)
                else:
                    flat = idx.ravel()
                    span = c * hp * wp
                    all_idx = (np.arange(n, dtype=np.intp)[:, None] * span
                               + flat[None, :]).ravel()
                    dxp = np.bincount(all_idx,
                                      weights=dcol.reshape(n, -1).ravel().astype(np.float64),
                                      minlength=n * span)
                    dxp = dxp.reshape(n, c, hp, wp).astype(xv.dtype)
                    dx = dxp[:, :, pad:pad + h, pad:pad + ww] if pad else dxp
            outs = [dx, dw]
            if b is not None:
                outs.append(db)
            return tuple(outs)
        return vjp

    return _apply(inputs, ov, vjp_builder)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, *, mode: str, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel batch norm on NCHW input.

    Train mode normalizes by batch statistics and updates the running
    buffers in place (exponential moving average, never taped); eval
    mode normalizes by the running buffers.
    """
    xv = x.values
    if xv.ndim != 4:
        raise DimensionError("batch_norm expects NCHW input")
    n, c, h, w = xv.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batch_norm affine params must be shape (C,)")
    if eps <= 0:
        raise ContractError("batch_norm eps must be positive")
    if n * h * w == 0:
        raise DegenerateShapeError("batch_norm over an empty batch")
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode {mode!r}")

    gv = gamma.values.reshape(1, c, 1, 1)
    bv = beta.values.reshape(1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.values + np.asarray(eps, dtype=xv.dtype))
        xhat = (xv - running_mean.values.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        ov = gv * xhat + bv

        def vjp_builder(needs):
            def vjp(g):
                dx = g * (gv * inv.reshape(1, c, 1, 1)) if needs[0] else None
                dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
                dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
                return (dx, dgamma, dbeta)
            return vjp

        return _apply([x, gamma, beta], ov, vjp_builder)

    m = n * h * w
    mu = xv.mean(axis=(0, 2, 3))
    var = xv.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.dtype))
    xc = xv - mu.reshape(1, c, 1, 1)
    xhat = xc * inv.reshape(1, c, 1, 1)
    ov = gv * xhat + bv
    mom = np.asarray(momentum, dtype=running_mean.dtype)
    running_mean.values[...] = (1 - mom) * running_mean.values + mom * mu
    running_var.values[...] = (1 - mom) * running_var.values + mom * var

    def vjp_builder(needs):
        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
            dx = None
            if needs[0]:
                dxhat = g * gv
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = (dxhat - s1 / m - xhat * s2 / m) * inv.reshape(1, c, 1, 1)
            return (dx, dgamma, dbeta)
        return vjp

    return _apply([x, gamma, beta], ov, vjp_builder)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _resize_coeffs(in_size: int, out_size: int):
    """Half-pixel bilinear source indices and weights for one axis."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of the trailing two axes (half-pixel centers)."""
    h, w = arr.shape[-2], arr.shape[-1]
    y0, y1, wy = _resize_coeffs(h, out_h)
    x0, x1, wx = _resize_coeffs(w, out_w)
    wy = wy.astype(arr.dtype)
    wx = wx.astype(arr.dtype)
    rows0 = arr[..., y0, :] * (1 - wy)[:, None] + arr[..., y1, :] * wy[:, None]
    return rows0[..., :, x0] * (1 - wx) + rows0[..., :, x1] * wx


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor with half-pixel sample centers."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: output size must be >= 1")
    xv = x.values
    if xv.ndim != 4:
        raise DimensionError("bilinear_resize expects NCHW input")
    n, c, h, w = xv.shape
    ov = bilinear_resize_array(xv, out_h, out_w)

    def vjp_builder(needs):
        def vjp(g):
            y0, y1, wy = _resize_coeffs(h, out_h)
            x0, x1, wx = _resize_coeffs(w, out_w)
            wy = wy.astype(xv.dtype)
            wx = wx.astype(xv.dtype)
            # scatter the four corner contributions back onto the input grid
            gy0 = g * (1 - wy)[:, None]
            gy1 = g * wy[:, None]
            span = h * w
            base = np.arange(n * c, dtype=np.intp)[:, None] * span
            acc = np.zeros(n * c * span, dtype=np.float64)
            for yi, xi, term in ((y0, x0, gy0 * (1 - wx)), (y0, x1, gy0 * wx),
                                 (y1, x0, gy1 * (1 - wx)), (y1, x1, gy1 * wx)):
                lin = (yi[:, None] * w + xi[None, :]).ravel()
                idx = (base + lin[None, :]).ravel()
                acc += np.bincount(idx, weights=term.reshape(n * c, -1).ravel()
                                   .astype(np.float64), minlength=n * c * span)
            return (acc.reshape(n, c, h, w).astype(xv.dtype),)
        return vjp

    return _apply([x], ov, vjp_builder)


def grid_sample_bilinear(x: Tensor, points: Tensor) -> Tensor:
    """Bilinear reads of x:(N,C,H,W) at points:(N,M,2) in (row, col) pixel
    coordinates. Out-of-bounds points clamp to the border (saturating the
    coordinate gradient there). Output is (N,C,M)."""
    xv, pv = x.values, points.values
    if xv.ndim != 4 or pv.ndim != 3 or pv.shape[-1] != 2:
        raise DimensionError("grid_sample expects NCHW input and (N,M,2) points")
    if pv.shape[0] != xv.shape[0]:
        raise DimensionError("grid_sample batch mismatch")
    _same_dtype(x, points)
    n, c, h, w = xv.shape
    m = pv.shape[1]
    py = np.clip(pv[:, :, 0], 0.0, h - 1.0)
    px = np.clip(pv[:, :, 1], 0.0, w - 1.0)
    y0 = np.floor(py).astype(np.intp)
    x0 = np.floor(px).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (py - y0).astype(xv.dtype)
    wx = (px - x0).astype(xv.dtype)

    xf = xv.reshape(n, c, h * w)

    def gather(yi, xi):
        lin = (yi * w + xi)[:, None, :]
        return np.take_along_axis(xf, lin, axis=2)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    wyb = wy[:, None, :]
    wxb = wx[:, None, :]
    ov = (v00 * (1 - wyb) * (1 - wxb) + v01 * (1 - wyb) * wxb
          + v10 * wyb * (1 - wxb) + v11 * wyb * wxb)

    def vjp_builder(needs):
        def vjp(g):
            dx = dp = None
            if needs[0]:
                span = h * w
                base = (np.arange(n * c, dtype=np.intp) * span).reshape(n, c, 1)
                acc = np.zeros(n * c * span, dtype=np.float64)
                for yi, xi, wgt in ((y0, x0, (1 - wyb) * (1 - wxb)),
                                    (y0, x1, (1 - wyb) * wxb),
                                    (y1, x0, wyb * (1 - wxb)),
                                    (y1, x1, wyb * wxb)):
                    lin = (yi * w + xi)[:, None, :] + base
                    acc += np.bincount(lin.ravel(),
                                       weights=(g * wgt).ravel().astype(np.float64),
                                       minlength=n * c * span)
                dx = acc.reshape(n, c, h, w).astype(xv.dtype)
            if needs[1]:
                inner_y = ((pv[:, :, 0] > 0) & (pv[:, :, 0] < h - 1)).astype(xv.dtype)
                inner_x = ((pv[:, :, 1] > 0) & (pv[:, :, 1] < w - 1)).astype(xv.dtype)
                dpy = (g * ((v10 - v00) * (1 - wxb) + (v11 - v01) * wxb)).sum(axis=1)
                dpx = (g * ((v01 - v00) * (1 - wyb) + (v11 - v10) * wyb)).sum(axis=1)
                dp = np.stack([dpy * inner_y, dpx * inner_x], axis=-1)
            return (dx, dp)
        return vjp

    return _apply([x, points], ov, vjp_builder)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

TAG_SHARED = "shared"
TAG_CONTROLLER = "controller"


def tag_task(t: int) -> str:
    return f"task:{t}"


def tag_aux(t: int) -> str:
    return f"aux:{t}"


class ParamSet:
    """Named map from parameter path to Tensor, each path carrying exactly
    one ownership tag (shared / task:t / aux:t / controller). Non-trainable
    entries hold state buffers such as batch-norm running statistics."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, path: str, values: np.ndarray, tag: str, trainable: bool = True) -> Tensor:
        if path in self._items:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(values), requires_grad=trainable)
        self._items[path] = t
        self._tags[path] = tag
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __contains__(self, path: str) -> bool:
        return path in self._items

    def __len__(self) -> int:
        return len(self._items)

    def paths(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tag(self, path: str) -> str:
        return self._tags[path]

    def trainable(self, path: str) -> bool:
        return self._trainable[path]

    def tagged(self, *tags: str) -> list[str]:
        want = set(tags)
        return [p for p, t in self._tags.items() if t in want]

    def zero_grad(self) -> None:
        for p, t in self._items.items():
            if not self._trainable[p]:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            else:
                t.grad[...] = 0

    def n_values(self, *tags: str) -> int:
        return sum(self._items[p].size for p in self.tagged(*tags))

    def filtered(self, keep) -> "ParamSet":
        """New ParamSet sharing tensors for paths where keep(path, tag) holds."""
        out = ParamSet()
        for p, t in self._items.items():
            if keep(p, self._tags[p]):
                out._items[p] = t
                out._tags[p] = self._tags[p]
                out._trainable[p] = self._trainable[p]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p: t.values for p, t in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], paths: Iterable[str] | None = None) -> None:
        for p in (paths if paths is not None else self._items):
            if p not in state:
                raise ContractError(f"checkpoint is missing parameter {p!r}")
            src = state[p]
            dst = self._items[p]
            if src.shape != dst.shape:
                raise DimensionError(f"{p!r}: checkpoint shape {src.shape} vs model {dst.shape}")
            dst.values[...] = src.astype(dst.dtype, copy=False)


def check_finite(t: Tensor, path: str) -> Tensor:
    if not np.isfinite(t.values).all():
        raise NumericError(path)
    return t
