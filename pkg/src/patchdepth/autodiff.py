"""Minimal reverse-mode differentiation on numpy arrays.

Only the operations needed by the stereo losses and the two networks are
provided.  Operations are recorded on the active :class:`Tape`; outside a
``with Tape():`` block they evaluate eagerly without recording, which is how
inference and finite-difference probes run.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = reduce_mean(x * x)
    >>> tape.backward(y)
    >>> x.grad
    array([1., 2.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "upsample_nearest2x",
    "upsample2x_conv",
    "pointwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "exp",
    "sqrt",
    "sigmoid",
    "elu",
    "scale",
    "reduce_mean",
    "reduce_sum",
    "concat",
    "horizontal_bilinear_sample",
    "neighborhood",
    "detach",
    "finite_difference_check",
    "fd_report",
    "FDReport",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    which is a topological order by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id is None:
                self.leaves[id(t)] = t
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _make(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Reverse sweep from a scalar ``root``; gradients land in ``.grad`` of the
    leaf tensors and accumulate with any existing value."""
    if root.size != 1:
        raise ConfigError(f"backward root must be a scalar, got shape {root.shape}")
    on_tape = (
        root.node_id is not None
        and root.node_id < len(tape.nodes)
        and tape.nodes[root.node_id].output is root
    )
    if not on_tape:
        for leaf in tape.leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        if root.requires_grad and root.node_id is None:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
        return

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for leaf in tape.leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# kink bookkeeping for finite-difference checks

_kink_logs: list[list[np.ndarray]] = []


def _log_branch(arr: np.ndarray) -> None:
    if _kink_logs:
        _kink_logs[-1].append(np.array(arr, copy=True))


@contextlib.contextmanager
def _recording_branches() -> Iterator[list[np.ndarray]]:
    log: list[np.ndarray] = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.pop()


# ---------------------------------------------------------------------------
# elementwise algebra


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: operand shapes {a.shape} and {b.shape} do not match") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", (a, b), ad * bd, bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make("div", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not itself differentiated."""
    c = a.dtype.type(c)
    return _make("scale", (a,), a.data * c, lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    # sign(0) = 0, the subgradient midpoint
    s = np.sign(a.data)
    _log_branch(s)
    return _make("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    fi = np.finfo(x.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg).astype(x.dtype, copy=False)
    return _make("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def elu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.where(pos, x, np.expm1(np.minimum(x, 0)))
    return _make("elu", (a,), out, lambda g: (np.where(pos, g, g * (out + 1.0)),))


_POINTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "abs": absolute,
    "exp": exp,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "elu": elu,
    "scale_by_constant": scale,
}


def pointwise(op_kind: str, *operands) -> Tensor:
    try:
        fn = _POINTWISE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown pointwise op {op_kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and structural ops


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if a.size == 0:
        raise ConfigError("reduce_sum of an empty tensor")
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", (a,), np.asarray(out), bw)


def reduce_mean(a: Tensor, over="all", keepdims: bool = False) -> Tensor:
    """Arithmetic mean over every element (``"all"``), the last two axes
    (``"spatial"``), or an explicit axis / tuple of axes."""
    if a.size == 0:
        raise ConfigError("reduce_mean of an empty tensor")
    if over == "all":
        axis = None
    elif over == "spatial":
        axis = (-2, -1)
    else:
        axis = over
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1) if axis is not None else a.size
    inv = a.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape),)

    return _make("mean", (a,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        ref = list(tensors[0].shape)
        other = list(t.shape)
        ref[axis] = other[axis] = 0
        if ref != other:
            raise ConfigError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("slice", (a,), np.array(out), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# convolution


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int):
    if x.ndim != 4:
        raise ConfigError(f"conv2d: input must be 4-D [N,C,H,W], got {x.shape}")
    if w.ndim != 4:
        raise ConfigError(f"conv2d: kernel must be 4-D [Cout,Cin,k,k], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ConfigError(f"conv2d: input channels {x.shape[1]} != kernel Cin {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ConfigError(f"conv2d: bias shape {b.shape} != (Cout={w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride {stride} / padding {padding} invalid")
    kh, kw = w.shape[2:]
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    if ho < 1:
        raise ConfigError(f"conv2d: height {x.shape[2]} too small for kernel {kh} / padding {padding}")
    if wo < 1:
        raise ConfigError(f"conv2d: width {x.shape[3]} too small for kernel {kw} / padding {padding}")
    return ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, im2col + one matmul."""
    xd, wd = x.data, kernel.data
    bd = bias.data if bias is not None else None
    ho, wo = _check_conv_shapes(xd, wd, bd, stride, padding)
    n, cin, h, w = xd.shape
    cout, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if bd is not None:
        out += bd
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(wd.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d", inputs, np.ascontiguousarray(out), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 4 or xd.shape[2] < 1 or xd.shape[3] < 1:
        raise ConfigError(f"upsample: need [N,C,H,W] with H,W >= 1, got {xd.shape}")
    out = xd.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = xd.shape
    return _make("upsample2x", (x,), out,
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def upsample2x_conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Decoder "deconv": nearest 2x upsampling then a stride-1 same conv."""
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"upsample2x_conv: kernel size must be odd, got {k}")
    return conv2d(upsample_nearest2x(x), kernel, bias, stride=1, padding=k // 2)


# ---------------------------------------------------------------------------
# sampling


def horizontal_bilinear_sample(source: Tensor, x_coords: Tensor) -> Tensor:
    """Sample every row of ``source`` at horizontal positions ``x_coords``.

    ``x_coords`` is ``[N,1,H,W]`` (shared across channels) or ``[N,C,H,W]``.
    Positions outside ``[0, W-1]`` clamp to the border column, where the
    gradient with respect to the coordinate is zero.
    """
    src, xc = source.data, x_coords.data
    if src.ndim != 4 or xc.ndim != 4:
        raise ConfigError(f"sampler expects 4-D tensors, got {src.shape} and {xc.shape}")
    n, c, h, w = src.shape
    if xc.shape[0] != n or xc.shape[2:] != (h, w) or xc.shape[1] not in (1, c):
        raise ConfigError(f"sampler: coordinate shape {xc.shape} incompatible with source {src.shape}")
    bad = ~np.isfinite(xc)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite sample coordinate at pixel {idx}")

    if w == 1:
        return _make("hsample", (source, x_coords), src.copy(),
                     lambda g: (g, np.zeros_like(xc)))

    inside = (xc >= 0) & (xc <= w - 1)
    xcl = np.clip(xc, 0, w - 1)
    x0 = np.minimum(np.floor(xcl).astype(np.intp), w - 2)
    _log_branch(x0)
    _log_branch(inside)
    alpha = (xcl - x0).astype(src.dtype, copy=False)
    x0b = np.broadcast_to(x0, src.shape)
    v0 = np.take_along_axis(src, x0b, axis=3)
    v1 = np.take_along_axis(src, x0b + 1, axis=3)
    diff = v1 - v0
    out = v0 + alpha * diff

    def bw(g):
        gs = gx = None
        if source.requires_grad:
            base = (np.arange(n * c * h, dtype=np.intp) * w).reshape(n, c, h, 1)
            i0 = (base + x0b).ravel()
            ga = g * alpha
            acc = np.bincount(i0, weights=(g - ga).ravel(), minlength=src.size)
            acc += np.bincount(i0 + 1, weights=ga.ravel(), minlength=src.size)
            gs = acc.reshape(src.shape).astype(src.dtype, copy=False)
        if x_coords.requires_grad:
            gx = g * diff
            if xc.shape[1] == 1 and c != 1:
                gx = gx.sum(axis=1, keepdims=True)
            gx = gx * inside
        return gs, gx

    return _make("hsample", (source, x_coords), out, bw)


def neighborhood(x: Tensor, n: int) -> Tensor:
    """Stack every ``n x n`` edge-clamped neighbourhood as channels.

    Output is ``[N, C*n*n, H, W]``; channel ``(c*n + dy)*n + dx`` of pixel
    ``(y, x)`` holds ``x[c, clamp(y+dy-r), clamp(x+dx-r)]`` with ``r = n//2``.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigError(f"window size must be odd and positive, got {n}")
    xd = x.data
    N, C, H, W = xd.shape
    r = n // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (n, n), axis=(2, 3))
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * n * n, H, W)

    def bw(g):
        g6 = g.reshape(N, C, n, n, H, W)
        gp = np.zeros(xp.shape, dtype=xd.dtype)
        for dy in range(n):
            for dx in range(n):
                gp[:, :, dy : dy + H, dx : dx + W] += g6[:, :, dy, dx]
        if r:
            gp[:, :, r, :] += gp[:, :, :r, :].sum(axis=2)
            gp[:, :, H + r - 1, :] += gp[:, :, H + r :, :].sum(axis=2)
            gp[:, :, :, r] += gp[:, :, :, :r].sum(axis=3)
            gp[:, :, :, W + r - 1] += gp[:, :, :, W + r :].sum(axis=3)
            gp = gp[:, :, r : r + H, r : r + W]
        return (gp,)

    return _make("neighborhood", (x,), out, bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FDReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst_index: tuple[int, ...] | None = None


def _scalar(f, x) -> float:
    y = f(x)
    return float(y.data if isinstance(y, Tensor) else y)


def fd_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    exclude_kinks: bool = True,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> FDReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` to central differences.

    An element is excluded when a perturbation of ``+-step`` flips a branch of a
    non-smooth op (abs sign, sampler floor or clamp), i.e. the probe straddles
    a kink and the central difference is not a derivative estimate there.
    """
    if x.dtype != np.float64:
        raise ConfigError("finite-difference checks require float64 tensors")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        with _recording_branches() as base_branches:
            y = f(x)
    if isinstance(y, Tensor) and y.node_id is not None:
        tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    if indices is None:
        idx_iter = range(flat.size)
    else:
        idx_iter = [int(np.ravel_multi_index(i, x.shape)) for i in indices]
    worst, worst_i, checked, excluded = 0.0, None, 0, 0
    aflat = analytic.reshape(-1)
    for i in idx_iter:
        orig = flat[i]
        flat[i] = orig + step
        with _recording_branches() as bp:
            fp = _scalar(f, x)
        flat[i] = orig - step
        with _recording_branches() as bm:
            fm = _scalar(f, x)
        flat[i] = orig
        if exclude_kinks and not (_same_branches(bp, base_branches) and _same_branches(bm, base_branches)):
            excluded += 1
            continue
        num = (fp - fm) / (2 * step)
        a = aflat[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        checked += 1
        if err > worst:
            worst, worst_i = err, np.unravel_index(i, x.shape)
    return FDReport(worst, checked, excluded,
                    tuple(int(v) for v in worst_i) if worst_i is not None else None)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, **kwargs) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return fd_report(f, x, step, **kwargs).max_rel_error
