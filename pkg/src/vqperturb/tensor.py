"""Minimal dense tensor with reverse-mode differentiation.

Every tensor wraps a float64 numpy array. Operations that touch a tensor with
``requires_grad`` record a node (parents + backward closure); ``backward``
replays the recorded nodes in reverse topological order.

Broadcasting is limited to scalar-with-tensor. Anything else must be reshaped
explicitly so that shape bugs raise immediately.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher / evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        tape = build_tape(self)
        if not tape:
            raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of grad-requiring nodes reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand broadcast against a tensor
    if t.shape == g.shape:
        return g
    return np.array(g.sum()).reshape(t.shape)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# -- shape ops ---------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from e
    src = x.shape
    return _make(y, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def select(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return _make(x.data[i].copy(), (x,), bw, "select")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the leading axis."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _make(x.data[start:stop].copy(), (x,), bw, "slice_rows")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from e
    return _make(y, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` for integer ``idx``; gradient scatter-adds into the rows."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "gather_rows")


def straight_through(z: Tensor, value: np.ndarray) -> Tensor:
    """Forward returns ``value``; backward passes the gradient to ``z`` unchanged."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != z.shape:
        raise ShapeError(f"straight_through: shape mismatch {z.shape} vs {value.shape}")
    return _make(value.copy(), (z,), lambda g: (g,), "straight_through")


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=ax)
    src = x.shape

    def bw(g):
        if ax is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return mul(tsum(x, ax), 1.0 / n)


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared euclidean distances between rows: (N, D), (K, D) -> (N, K)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[:, None, :] - bd[None, :, :]
    d = np.einsum("nkd,nkd->nk", diff, diff)

    def bw(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _make(d, (a, b), bw, "pairwise_sq_dist")


# -- normalisation / softmax -------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale to unit euclidean length along ``axis``."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps == 0.0 and np.any(n == 0):
        raise ValueError("normalize: zero-norm vector")
    n = np.maximum(n, eps) if eps else n
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make(y, (x,), bw, "normalize")


# -- losses ------------------------------------------------------------------
def l1_distance(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shape mismatch {a.shape} vs {b.shape}")
    return mean(absolute(sub(a, b)))


def sq_l2_distance(a: Tensor, b) -> Tensor:
    """Mean squared difference."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2_distance: shape mismatch {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


# -- convolution ---------------------------------------------------------------
def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (n, c, ho, wo, kh, kw)
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * pad, wd + 2 * pad
    cols = np.tensordot(w, g, axes=([0], [1]))  # (c, kh, kw, n, ho, wo)
    # rows of (ho*stride) may exceed the padded input when stride does not divide evenly
    buf = np.zeros((c, n, max(hp, (ho - 1) * stride + kh), max(wp, (wo - 1) * stride + kw)))
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + (ho - 1) * stride + 1 : stride,
                j : j + (wo - 1) * stride + 1 : stride] += cols[:, i, j]
    return buf[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3)


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, kshape: tuple[int, int],
                      stride: int, pad: int) -> np.ndarray:
    kh, kw = kshape
    _, _, ho, wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (o, c, kh, kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """NCHW convolution with weight (out, in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    y = _conv_forward(xd, wd, stride, padding)
    if b is not None:
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _conv_grad_input(g, wd, stride, padding, xd.shape[2:]) if x.requires_grad else None
        gw = _conv_grad_weight(g, xd, wd.shape[2:], stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(y, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed NCHW convolution with weight (in, out, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    kh, kw = wd.shape[2:]
    h = (xd.shape[2] - 1) * stride - 2 * padding + kh + output_padding
    wdt = (xd.shape[3] - 1) * stride - 2 * padding + kw + output_padding
    y = _conv_grad_input(xd, wd, stride, padding, (h, wdt))
    if b is not None:
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _conv_forward(g, wd, stride, padding) if x.requires_grad else None
        # forward of the adjoint conv maps g -> x, so its weight gradient uses (x, g)
        gw = _conv_grad_weight(xd, g, (kh, kw), stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(y, parents, bw, "conv_transpose2d")


def resize_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of an NCHW map; source index = floor(dst * in / out)."""
    if x.ndim != 4:
        raise ShapeError(f"resize_nearest: expected NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    oh, ow = size
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resize_nearest: target size must be positive, got {size}")
    ri = (np.arange(oh) * h) // oh
    ci = (np.arange(ow) * w) // ow
    y = x.data[:, :, ri][:, :, :, ci]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        return (out,)

    return _make(y, (x,), bw, "resize_nearest")


# -- numerical checking ---------------------------------------------------------
def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-8).

    ``coords`` restricts the comparison to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        out.backward()
    analytic = np.zeros(xt.size) if xt.grad is None else xt.grad.reshape(-1)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        base = flat[k]
        probe = flat.copy()
        probe[k] = base + step
        with no_grad():
            fp = f(Tensor(probe.reshape(x.shape))).item()
            probe[k] = base - step
            fm = f(Tensor(probe.reshape(x.shape))).item()
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic[k] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst


# -- text format -------------------------------------------------------------
def format_number(v: float) -> str:
    return format(float(v), ".17g")


def dumps_tensor(arr) -> str:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in arr.shape)]
    flat = arr.reshape(-1)
    row = arr.shape[-1] if arr.ndim else 1
    for start in range(0, flat.size, max(row, 1)):
        lines.append(" ".join(format_number(v) for v in flat[start : start + row]))
    return "\n".join(lines) + "\n"


def loads_tensor(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("tensor text: first line must start with 'shape:'")
    try:
        shape = tuple(int(t) for t in lines[0][len("shape:"):].split())
        values = [float(t) for line in lines[1:] for t in line.split()]
    except ValueError as e:
        raise ValueError(f"tensor text: malformed value ({e})") from e
    if any(d <= 0 for d in shape):
        raise ValueError(f"tensor text: shape entries must be positive, got {shape}")
    if int(np.prod(shape)) != len(values):
        raise ValueError(f"tensor text: shape {shape} needs {int(np.prod(shape))} values, "
                         f"found {len(values)}")
    arr = np.array(values, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor text: non-finite value")
    return arr


def save_tensor(path, arr) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path) as fh:
        return loads_tensor(fh.read())
