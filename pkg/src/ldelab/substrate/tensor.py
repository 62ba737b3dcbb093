"""Dense tensors recorded on a tape, with reverse-mode differentiation.

A :class:`Tape` owns every node created during one forward evaluation.  Nodes
are :class:`Tensor` objects wrapping an immutable numpy buffer.  Operations
append a record ``(output id, input ids, backward closure)`` in execution
order, so the record list is already topologically sorted and
:func:`forward_backward` only has to walk it once in reverse.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ldelab.errors import ContractError, ShapeError

_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "tape", "id", "requires_grad", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool, name: str | None = None):
        self.data = data
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.id}{label}(shape={self.shape}, dtype={self.dtype.name})"

    # arithmetic sugar; everything routes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Single-owner record of primitive operations.

    ``grad=False`` builds a tape that computes values but records nothing,
    used for inference.
    """

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.records: list[tuple[int, tuple[int, ...], Callable, str]] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, data, requires_grad: bool = True, name: str | None = None) -> Tensor:
        arr = np.asarray(data)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        t = Tensor(arr, self, self._new_id(), requires_grad and self.grad_enabled, name)
        if t.requires_grad:
            self._leaves[t.id] = t
        return t

    def const(self, data, dtype=None) -> Tensor:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        return self.leaf(arr, requires_grad=False)

    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def release(self) -> None:
        """Drop records and leaves.

        Backward closures and leaves point back at the tape, so a finished
        tape is a reference cycle that otherwise waits for the cyclic GC.
        """
        self.records.clear()
        self._leaves.clear()

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
        needs = self.grad_enabled and any(t.requires_grad for t in inputs)
        out = np.asarray(out)
        out.setflags(write=False)
        node = Tensor(out, self, self._new_id(), needs)
        if needs:
            self.records.append((node.id, tuple(t.id for t in inputs), backward, op))
        return node


def forward_backward(tape: Tape, loss: Tensor, retain_all: bool = False) -> dict[int, np.ndarray]:
    """Return d(loss)/d(node) for every leaf that requires grad.

    With ``retain_all`` the map also holds gradients of intermediate nodes.
    Leaves that do not influence the loss get a zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to a different tape")
    if loss.data.size != 1:
        raise ContractError(f"loss node must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for out_id, in_ids, backward, _op in reversed(tape.records):
        g = grads.get(out_id) if retain_all else grads.pop(out_id, None)
        if g is None:
            continue
        in_grads = backward(g)
        for nid, gi in zip(in_ids, in_grads):
            if gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    result = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        result[nid] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if retain_all:
        for nid, g in grads.items():
            result.setdefault(nid, g)
    return result


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("at least one operand must be a Tensor")


def _as_tensor(x, tape: Tape, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return x
    return tape.const(np.asarray(x, dtype=like if like is not None else np.float64))


def _common(op: str, *xs) -> tuple[Tape, list[Tensor]]:
    tape = _tape_of(*xs)
    dtype = next(x.dtype for x in xs if isinstance(x, Tensor))
    ts = [_as_tensor(x, tape, dtype) for x in xs]
    return tape, ts


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    tape, (a, b) = _common("add", a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape, (a, b) = _common("sub", a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    tape, (a, b) = _common("mul", a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return tape.record("mul", (a, b), ad * bd, backward)


def div(a, b) -> Tensor:
    tape, (a, b) = _common("div", a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return tape.record("div", (a, b), out, backward)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    p = float(exponent)
    return x.tape.record("pow", (x,), xd ** p, lambda g: (g * p * xd ** (p - 1.0),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape.record("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return x.tape.record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return x.tape.record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x.tape.record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape.record("log", (x,), np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return x.tape.record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    tape, (a, b) = _common("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return tape.record("matmul", (a, b), ad @ bd, backward)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    tape, ts = _common("affine", x, w, *(() if b is None else (b,)))
    x, w = ts[0], ts[1]
    bias = ts[2] if b is not None else None
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[-1]} does not match weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match output width {w.shape[1]}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return tape.record("affine", tuple(ts), out, backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    return x.tape.record("sum", (x,), x.data.sum(axis=axes, keepdims=keepdims),
                         lambda g: (_expand(g, axes, keepdims, shape),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes]))
    return x.tape.record("mean", (x,), x.data.mean(axis=axes, keepdims=keepdims),
                         lambda g: (_expand(g, axes, keepdims, shape) / n,))


def std(x: Tensor, axis=None, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Population standard deviation ``sqrt(mean((x - mean)^2) + eps)``."""
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    out_keep = np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    out = out_keep if keepdims else out_keep.reshape([s for i, s in enumerate(shape) if i not in axes])

    def backward(g):
        gk = _expand(g, axes, keepdims, shape)
        return (gk * centered / (n * out_keep),)

    return x.tape.record("std", (x,), out, backward)


def l2norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    xd = x.data
    nk = np.sqrt((xd * xd).sum(axis=axes, keepdims=True))
    out = nk if keepdims else nk.reshape([s for i, s in enumerate(shape) if i not in axes])

    def backward(g):
        return (_expand(g, axes, keepdims, shape) * xd / nk,)

    return x.tape.record("l2norm", (x,), out, backward)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return x.tape.record("softmax", (x,), out, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return x.tape.record("log_softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# structural


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape, ts = _common("concat", *xs)
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return tape.record("concat", ts, np.concatenate([t.data for t in ts], axis=ax), backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing and integer-array indexing; gradients scatter-add back."""
    shape = x.shape
    dtype = x.dtype
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return x.tape.record("slice", (x,), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return x.tape.record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return x.tape.record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution with same-length zero padding.

    ``x`` is (batch, time, in), ``w`` is (context, in, out) with odd context.
    """
    tape, (x, w) = _common("conv1d", x, w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected (B,T,C) input and (K,C,O) kernel, got {x.shape}, {w.shape}")
    k, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv1d: input width {x.shape[2]} does not match kernel input {cin}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d: context {k} must be odd for same padding")
    bsz, t, _ = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    cols = np.stack([xp[:, j * dilation:j * dilation + t, :] for j in range(k)], axis=2)
    cols = cols.reshape(bsz * t, k * cin)
    wmat = w.data.reshape(k * cin, cout)
    out = (cols @ wmat).reshape(bsz, t, cout)

    def backward(g):
        g2 = g.reshape(bsz * t, cout)
        gw = (cols.T @ g2).reshape(k, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, t, k, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[:, j * dilation:j * dilation + t, :] += gcols[:, :, j, :]
            gx = gxp[:, pad:pad + t, :] if pad else gxp
        return gx, gw

    return tape.record("conv1d", (x, w), out, backward)


def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D convolution over channel-last input (batch, H, W, in); kernel (kh, kw, in, out)."""
    tape, (x, w) = _common("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,H,W,C) input and (kh,kw,C,O) kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} do not match kernel input {cin}")
    bsz, h, wd_, _ = x.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd_ + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    patches = []
    for i in range(kh):
        for j in range(kw):
            patches.append(xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :])
    cols = np.stack(patches, axis=3).reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(bsz * ho * wo, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh * kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            n = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gcols[:, :, :, n, :]
                    n += 1
            gx = gxp[:, ph:ph + h, pw:pw + wd_, :]
        return gx, gw

    return tape.record("conv2d", (x, w), out, backward)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float = 1e-5,
               stats: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize ``x`` over ``axes`` and apply a per-feature scale and shift.

    Without ``stats`` the batch mean/variance are used (training mode) and
    returned so the caller can update running averages.  With ``stats`` the
    given running mean/variance are treated as constants.
    """
    tape, (x, gamma, beta) = _common("batch_norm", x, gamma, beta)
    feat = [s for i, s in enumerate(x.shape) if i not in axes]
    if list(gamma.shape) != feat or list(beta.shape) != feat:
        raise ShapeError(f"batch_norm: scale {gamma.shape} does not match features {tuple(feat)}")
    xd = x.data
    if stats is None:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    else:
        mu = np.expand_dims(np.asarray(stats[0], dtype=xd.dtype), axes)
        var = np.expand_dims(np.asarray(stats[1], dtype=xd.dtype), axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = np.expand_dims(gamma.data, axes)
    out = xhat * gd + np.expand_dims(beta.data, axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    training = stats is None

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                gx = inv / n * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    node = tape.record("batch_norm", (x, gamma, beta), out, backward)
    return node, np.squeeze(mu, axis=axes), np.squeeze(var, axis=axes)
