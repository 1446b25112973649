"""Minimal reverse-mode automatic differentiation over dense float32 arrays.

Provides exactly the operations the volumetric encoder/decoder, the GP prior
and the training loss need: 3-d convolution (3x3x3 kernels, padding 1,
stride 1 or 2), nearest-neighbor upsampling, ELU, dense layers, and the
elementwise/reduction plumbing that connects them.

Layout convention: volumetric activations are channels-last,
``[D, H, W, C]`` or batched ``[N, D, H, W, C]``; convolution weights are
``[3, 3, 3, C_in, C_out]``.  The channel-last layout keeps every hot GEMM
contiguous, which matters on CPU.

The graph is implicit: each produced tensor records its parents and a
backward rule; ``Tensor.backward()`` walks the nodes in reverse topological
order exactly once.  Tensors that take part in a graph are never mutated in
place by any op here.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    # f64 accumulation cannot overflow on finite f32 inputs, so a single
    # reduction detects any NaN/Inf without allocating a bool mask.
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float32 array with an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValidationError("backward() requires a scalar root")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            contributions = node._backward(node.grad)
            for parent, contrib in zip(node._parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.asarray(contrib, dtype=DTYPE)
                else:
                    parent.grad += np.asarray(contrib, dtype=DTYPE)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def apply_op(name: str, out_data: np.ndarray, parents, backward) -> Tensor:
    """Wrap a computed array as a graph node.

    ``backward(out_grad) -> tuple`` must return one gradient array (or None)
    per parent.  Custom primitives elsewhere in the package (the GP prior
    log-density) register themselves through this hook.  Float64 data is
    passed through untouched: production graphs are float32 end to end, but
    the finite-difference oracle re-runs forwards with upcast leaves.
    """
    out_data = np.asarray(out_data)
    if out_data.dtype != np.float64:
        out_data = out_data.astype(DTYPE, copy=False)
    _finite_or_raise(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.op = name
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # same shape, or one side is a scalar (0-d); no general broadcasting
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(op, f"matching shapes or a scalar operand", f"{a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad, dtype=np.float64).astype(DTYPE).reshape(shape)


# -- elementwise and reduction ops -----------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return apply_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return apply_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return apply_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 0 and a.shape != b.shape:
        raise ShapeError("div", "a scalar or same-shape divisor", f"{b.shape}")
    if np.any(b.data == 0.0):
        raise NumericalError("division by zero in op 'div'")
    inv = 1.0 / b.data
    out = a.data * inv

    def backward(g):
        ga = _unbroadcast(g * inv, a.shape)
        gb = _unbroadcast(-g * out * inv, b.shape)
        return ga, gb

    return apply_op("div", out, (a, b), backward)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericalError("log of non-positive value")
    return apply_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return apply_op("softplus", out, (a,), lambda g: (g * sig,))


def elu(a) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise (alpha = 1)."""
    a = _as_tensor(a)
    x = a.data
    # expm1(min(x,0)) + max(x,0) is branch-free and exact in both regimes
    out = np.expm1(np.minimum(x, 0.0))
    np.add(out, np.maximum(x, 0.0), out=out)

    def backward(g):
        # derivative: 1 for x > 0, exp(x) = elu(x)+1 for x <= 0
        return (g * np.where(x > 0.0, np.asarray(1.0, dtype=x.dtype), out + 1.0),)

    return apply_op("elu", out, (a,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    # accumulate in f64 so large reductions keep scalar accuracy
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)
    return apply_op("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", "[m,k] @ [k,n]", f"{a.shape} @ {b.shape}")
    return apply_op(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", "a 2-d tensor", f"{a.shape}")
    return apply_op("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def narrow(a, start: int, length: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads the complement."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", f"slice within extent {a.shape[axis]}", f"[{start}:{start + length}]")
    index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(a.ndim))

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return apply_op("narrow", a.data[index].copy(), (a,), backward)


def dense(x, weight, bias) -> Tensor:
    """Affine map: ``x @ weight.T + bias`` for ``x`` of shape [F] or [N, F]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise ShapeError("dense weights", "[F_out,F_in] with bias [F_out]", f"{weight.shape}, {bias.shape}")
    single = x.ndim == 1
    if x.shape[-1] != weight.shape[1] or x.ndim > 2:
        raise ShapeError("dense input", f"[..., {weight.shape[1]}]", f"{x.shape}")
    x2 = x.data[None, :] if single else x.data
    out = x2 @ weight.data.T + bias.data

    def backward(g):
        g2 = g[None, :] if single else g
        gx = g2 @ weight.data
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        return (gx[0] if single else gx, gw, gb)

    return apply_op("dense", out[0] if single else out, (x, weight, bias), backward)


# -- volumetric ops ----------------------------------------------------------

_OFFSETS = tuple(itertools.product(range(3), repeat=3))


def _conv_out_side(n: int, stride: int) -> int:
    return (n - 1) // stride + 1  # kernel 3, padding 1


def _shifted_view(xp: np.ndarray, off, out_spatial, stride: int) -> np.ndarray:
    a, b, c = off
    do, ho, wo = out_spatial
    return xp[
        :,
        a : a + stride * (do - 1) + 1 : stride,
        b : b + stride * (ho - 1) + 1 : stride,
        c : c + stride * (wo - 1) + 1 : stride,
        :,
    ]


def conv3d(x, weight, bias, stride: int = 1) -> Tensor:
    """3x3x3 convolution, padding 1, stride 1 or 2, channels-last.

    Input ``[D,H,W,C_in]`` or ``[N,D,H,W,C_in]``, weight ``[3,3,3,C_in,C_out]``,
    bias ``[C_out]``.  Stride 1 preserves spatial extents; stride 2 yields
    ``ceil(extent/2)``.  Implemented as 27 offset GEMMs over a padded copy,
    which keeps all inner products contiguous.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if stride not in (1, 2):
        raise ValidationError(f"conv3d stride must be 1 or 2, got {stride}")
    if weight.ndim != 5 or weight.shape[:3] != (3, 3, 3):
        raise ShapeError("conv3d weight", "[3,3,3,C_in,C_out]", f"{weight.shape}")
    single = x.ndim == 4
    if x.ndim not in (4, 5):
        raise ShapeError("conv3d input", "[D,H,W,C] or [N,D,H,W,C]", f"{x.shape}")
    xb = x.data[None] if single else x.data
    n, d, h, w, cin = xb.shape
    if cin != weight.shape[3]:
        raise ShapeError("conv3d input channels", weight.shape[3], cin)
    if bias.shape != (weight.shape[4],):
        raise ShapeError("conv3d bias", f"({weight.shape[4]},)", f"{bias.shape}")
    cout = weight.shape[4]
    do, ho, wo = (_conv_out_side(s, stride) for s in (d, h, w))
    rows = n * do * ho * wo

    work_dtype = np.result_type(xb.dtype, weight.data.dtype)
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    if xp.dtype != work_dtype:
        xp = xp.astype(work_dtype)
    wk = weight.data.reshape(27, cin, cout)
    if wk.dtype != work_dtype:
        wk = wk.astype(work_dtype)
    out2 = np.empty((rows, cout), dtype=work_dtype)
    buf = np.empty((n, do, ho, wo, cin), dtype=work_dtype)
    tmp = np.empty((rows, cout), dtype=work_dtype)
    for k, off in enumerate(_OFFSETS):
        np.copyto(buf, _shifted_view(xp, off, (do, ho, wo), stride))
        np.dot(buf.reshape(rows, cin), wk[k], out=out2 if k == 0 else tmp)
        if k:
            out2 += tmp
    out2 += bias.data
    out = out2.reshape(n, do, ho, wo, cout)

    def backward(g):
        gb2 = g[None] if single else g
        g2 = gb2.reshape(rows, cout)
        gbias = g2.sum(axis=0, dtype=np.float64).astype(work_dtype) if bias.requires_grad else None
        gweight = None
        if weight.requires_grad:
            gweight = np.empty((27, cin, cout), dtype=work_dtype)
            sbuf = np.empty((n, do, ho, wo, cin), dtype=work_dtype)
            for k, off in enumerate(_OFFSETS):
                np.copyto(sbuf, _shifted_view(xp, off, (do, ho, wo), stride))
                np.dot(sbuf.reshape(rows, cin).T, g2, out=gweight[k])
            gweight = gweight.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            contrib = np.empty((rows, cin), dtype=work_dtype)
            contrib5 = contrib.reshape(n, do, ho, wo, cin)
            for k, off in enumerate(_OFFSETS):
                np.dot(g2, wk[k].T, out=contrib)
                _shifted_view(gxp, off, (do, ho, wo), stride)[...] += contrib5
            gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
            if single:
                gx = gx[0]
        return (gx, gweight, gbias)

    return apply_op("conv3d", out[0] if single else out, (x, weight, bias), backward)


# Axis map for fusing nearest-neighbor upsampling into a following stride-1
# conv: output parity p reads upsampled positions 2q+p-1+a (a = kernel tap),
# whose source voxel offset is (p+a-1)//2.  Row (p, t) lists which original
# kernel taps a collapse onto combined tap t (source offset p-1+t).
_PARITY_TAP = np.array(
    [
        [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]],  # parity 0: {a=0} -> offset -1, {a=1,2} -> 0
        [[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]],  # parity 1: {a=0,1} -> offset 0, {a=2} -> +1
    ],
    dtype=np.float64,
)


def upsample_conv3d(x, weight, bias) -> Tensor:
    """Nearest-neighbor 2x upsample followed by a stride-1 conv3d, fused.

    Mathematically identical to ``conv3d(upsample_nn3d(x), weight, bias, 1)``
    but evaluated on the source grid: every 3x3x3 window of the upsampled
    volume covers at most 2x2x2 distinct source voxels, so the work per
    output voxel drops from 27 to 8 kernel taps.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 5 or weight.shape[:3] != (3, 3, 3):
        raise ShapeError("upsample_conv3d weight", "[3,3,3,C_in,C_out]", f"{weight.shape}")
    single = x.ndim == 4
    if x.ndim not in (4, 5):
        raise ShapeError("upsample_conv3d input", "[D,H,W,C] or [N,D,H,W,C]", f"{x.shape}")
    xb = x.data[None] if single else x.data
    n, d, h, w, cin = xb.shape
    if cin != weight.shape[3]:
        raise ShapeError("upsample_conv3d input channels", weight.shape[3], cin)
    cout = weight.shape[4]
    if bias.shape != (cout,):
        raise ShapeError("upsample_conv3d bias", f"({cout},)", f"{bias.shape}")

    work_dtype = np.result_type(xb.dtype, weight.data.dtype)
    # combined[pd,td,ph,th,pw,tw] = sum of weight taps collapsing onto the
    # (td,th,tw) source offset for output parity (pd,ph,pw)
    combined = np.einsum(
        "pta,qub,rvc,abcio->ptqurvio", _PARITY_TAP, _PARITY_TAP, _PARITY_TAP,
        weight.data.astype(np.float64),
    ).astype(work_dtype)
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    if xp.dtype != work_dtype:
        xp = xp.astype(work_dtype)
    rows = n * d * h * w
    out = np.empty((n, 2 * d, 2 * h, 2 * w, cout), dtype=work_dtype)
    acc = np.empty((rows, cout), dtype=work_dtype)
    tmp = np.empty((rows, cout), dtype=work_dtype)
    buf = np.empty((n, d, h, w, cin), dtype=work_dtype)
    parities = tuple(itertools.product(range(2), repeat=3))
    taps = parities

    def source_slice(source, parity, tap):
        pd, ph, pw = parity
        td, th, tw = tap
        return source[:, pd + td : pd + td + d, ph + th : ph + th + h, pw + tw : pw + tw + w, :]

    for parity in parities:
        first = True
        for tap in taps:
            np.copyto(buf, source_slice(xp, parity, tap))
            wmat = combined[parity[0], tap[0], parity[1], tap[1], parity[2], tap[2]]
            np.dot(buf.reshape(rows, cin), wmat, out=acc if first else tmp)
            if not first:
                acc += tmp
            first = False
        acc += bias.data
        pd, ph, pw = parity
        out[:, pd::2, ph::2, pw::2, :] = acc.reshape(n, d, h, w, cout)

    def backward(g):
        gb2 = g[None] if single else g
        gbias = None
        if bias.requires_grad:
            gbias = gb2.sum(axis=(0, 1, 2, 3), dtype=np.float64).astype(work_dtype)
        gcombined = np.zeros((2, 2, 2, 2, 2, 2, cin, cout), dtype=np.float64) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gpar = np.empty((rows, cout), dtype=work_dtype)
        sbuf = np.empty((n, d, h, w, cin), dtype=work_dtype)
        gsrc = np.empty((rows, cin), dtype=work_dtype)
        gsrc5 = gsrc.reshape(n, d, h, w, cin)
        for parity in parities:
            pd, ph, pw = parity
            np.copyto(gpar.reshape(n, d, h, w, cout), gb2[:, pd::2, ph::2, pw::2, :])
            for tap in taps:
                wmat = combined[parity[0], tap[0], parity[1], tap[1], parity[2], tap[2]]
                if gcombined is not None:
                    np.copyto(sbuf, source_slice(xp, parity, tap))
                    gcombined[parity[0], tap[0], parity[1], tap[1], parity[2], tap[2]] = (
                        sbuf.reshape(rows, cin).T @ gpar
                    )
                if gxp is not None:
                    np.dot(gpar, wmat.T, out=gsrc)
                    source_slice(gxp, parity, tap)[...] += gsrc5
        gweight = None
        if gcombined is not None:
            gweight = np.einsum(
                "pta,qub,rvc,ptqurvio->abcio", _PARITY_TAP, _PARITY_TAP, _PARITY_TAP, gcombined
            ).astype(work_dtype)
        gx = None
        if gxp is not None:
            gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
            if single:
                gx = gx[0]
        return (gx, gweight, gbias)

    return apply_op("upsample_conv3d", out[0] if single else out, (x, weight, bias), backward)


def upsample_nn3d(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of each spatial axis (channels-last).

    Every output voxel copies its floor-indexed source; backward sums each
    source voxel's gradient over its eight children.
    """
    x = _as_tensor(x)
    single = x.ndim == 4
    if x.ndim not in (4, 5):
        raise ShapeError("upsample_nn3d input", "[D,H,W,C] or [N,D,H,W,C]", f"{x.shape}")
    xb = x.data[None] if single else x.data
    n, d, h, w, c = xb.shape
    expanded = np.broadcast_to(
        xb[:, :, None, :, None, :, None, :], (n, d, 2, h, 2, w, 2, c)
    )
    out = np.ascontiguousarray(expanded).reshape(n, 2 * d, 2 * h, 2 * w, c)

    def backward(g):
        gb = g[None] if single else g
        gx = gb.reshape(n, d, 2, h, 2, w, 2, c).sum(axis=(2, 4, 6))
        return (gx[0] if single else gx,)

    return apply_op("upsample_nn3d", out[0] if single else out, (x,), backward)


# -- gradient verification ---------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    group: str
    n_checked: int
    max_abs_diff: float
    own_scale: float
    scale: float = 0.0
    rel_err: float = 0.0
    worst_coord: tuple = ()
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None


@dataclass
class GroupCheck:
    name: str
    scale: float
    max_abs_diff: float
    rel_err: float
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None


@dataclass
class GradCheckReport:
    tol: float
    step: float
    params: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params) and all(g.passed for g in self.groups.values())

    def lines(self):
        out = []
        for p in self.params:
            status = "ok" if p.passed else f"FAIL ({p.failure})"
            out.append(
                f"{p.name:26s} rel_err={p.rel_err:.3e} (|diff|={p.max_abs_diff:.3e},"
                f" scale={p.scale:.3e}, coords={p.n_checked}) {status}"
            )
        return out


def grad_check(f, params, step: float = 1e-2, tol: float = 1e-3, max_coords: int | None = None, seed: int = 0, group_of=None, oracle_dtype=np.float64) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild and return the scalar loss from the current data of
    ``params`` (a dict name -> leaf Tensor) and be deterministic, i.e. any
    noise draws are fixed outside of it.  The analytic gradient under test is
    whatever precision the graph runs at; the finite-difference probes
    evaluate forwards with the leaves upcast to ``oracle_dtype`` (float64 by
    default) so the oracle itself is not limited by float32 rounding of a
    large loss value.  The reported relative error is the largest
    |analytic - numeric| over the probed coordinates divided by the
    gradient's magnitude scale; with ``group_of`` (a name -> group-name
    function) parameters share their group's scale, so a tensor whose whole
    gradient is incidentally tiny is judged against the group it is trained
    with.  ``max_coords`` bounds the probes per parameter (seeded subsample)
    so the quadratic cost of finite differences stays useful on real losses.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValidationError("grad_check target must return a scalar Tensor")
    out.backward()
    # a parameter the loss never touches has an exactly-zero gradient
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    original = {name: p.data for name, p in params.items()}
    for p in params.values():
        p.data = p.data.astype(oracle_dtype)
    report = GradCheckReport(tol=tol, step=step)
    try:
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            ga = analytic[name].reshape(-1)
            max_diff, worst, failure = 0.0, (0,), None
            numeric_scale = 0.0
            for idx in coords:
                orig = flat[idx]
                try:
                    flat[idx] = orig + step
                    with no_grad():
                        f_plus = f().item()
                    flat[idx] = orig - step
                    with no_grad():
                        f_minus = f().item()
                except NumericalError:
                    # ops enforce finiteness themselves; report it as a probe failure
                    f_plus = f_minus = np.nan
                finally:
                    flat[idx] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    failure = f"non-finite value at coordinate {np.unravel_index(idx, p.shape)}"
                    break
                fd = (f_plus - f_minus) / (2.0 * step)
                numeric_scale = max(numeric_scale, abs(fd))
                diff = abs(float(ga[idx]) - fd)
                if diff > max_diff:
                    max_diff, worst = diff, np.unravel_index(idx, p.shape)
            own_scale = max(float(np.max(np.abs(ga))) if ga.size else 0.0, numeric_scale, 1e-12)
            report.params.append(
                ParamCheck(
                    name=name,
                    group=group_of(name) if group_of else name,
                    n_checked=len(coords),
                    max_abs_diff=max_diff,
                    own_scale=own_scale,
                    worst_coord=tuple(int(i) for i in worst),
                    failure=failure,
                )
            )
    finally:
        for name, p in params.items():
            p.data = original[name]

    group_scale: dict = {}
    for entry in report.params:
        group_scale[entry.group] = max(group_scale.get(entry.group, 0.0), entry.own_scale)
    for entry in report.params:
        entry.scale = group_scale[entry.group]
        entry.rel_err = entry.max_abs_diff / entry.scale
        if entry.failure is None and entry.rel_err >= tol:
            entry.failure = f"relative error {entry.rel_err:.3e} >= tol {tol:.1e}"
    for group, scale in group_scale.items():
        members = [e for e in report.params if e.group == group]
        max_diff = max(e.max_abs_diff for e in members)
        rel = max_diff / scale
        failure = None
        probe_failures = [e.failure for e in members if e.failure and "non-finite" in e.failure]
        if probe_failures:
            failure = probe_failures[0]
        elif rel >= tol:
            failure = f"relative error {rel:.3e} >= tol {tol:.1e}"
        report.groups[group] = GroupCheck(
            name=group, scale=scale, max_abs_diff=max_diff, rel_err=rel, failure=failure
        )
    return report
