"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to one gradient per parent.  ``Tensor.backward`` walks
the recorded graph in reverse topological order, so each node is visited
exactly once and gradients add up at fan-out points.  Only leaf tensors
(created directly, ``requires_grad=True``) keep ``.grad`` after a pass, and
repeated passes accumulate into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'!r})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; the strict functional forms below carry the contracts
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=DTYPE), like.shape))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward`` receives d(loss)/d(output) and returns one array (or None)
    per parent, in order.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def xavier_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(*tensors: Tensor) -> Tensor:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"add needs equal shapes, got {shape} and {t.shape}")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    return make_op(data, tensors, lambda g: (g,) * len(tensors), "add_n")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape Tensor or a constant array."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=DTYPE)
        return make_op(a.data * const, (a,), lambda g: (_unbroadcast(g * const, a.shape),), "mul_const")
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def smooth_l1(a: Tensor) -> Tensor:
    """0.5 x^2 where |x| < 1, |x| - 0.5 elsewhere; elementwise."""
    x = a.data
    ax = np.abs(x)
    small = ax < 1.0
    out = np.where(small, 0.5 * x * x, ax - 0.5)
    return make_op(out, (a,), lambda g: (g * np.where(small, x, np.sign(x)),), "smooth_l1")


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    if axis is None:
        return make_op(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    out = a.data.sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return make_op(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Rows of ``x`` (R x in) mapped to R x out with ``weight`` shaped out x in."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_op(out, (x, weight, bias), backward, "linear")


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {m.shape}")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op(s, (m,), backward, "softmax_rows")


def log_softmax_rows(m: Tensor) -> Tensor:
    z = m.data - m.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return make_op(out, (m,), backward, "log_softmax_rows")


def l2_normalize_columns(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each column of a C x N matrix to unit norm; columns with norm < eps become 0."""
    if x.ndim != 2:
        raise DimensionError(f"expected a C x N matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=0))
    live = norms >= eps
    inv = np.where(live, 1.0 / np.where(live, norms, 1.0), 0.0)
    out = x.data * inv

    def backward(g):
        # d(x/|x|) = (g - u (u.g)) / |x|
        dot = (g * out).sum(axis=0)
        return ((g - out * dot) * inv,)

    return make_op(out, (x,), backward, "l2_normalize_columns")


# ---------------------------------------------------------------------------
# spatial ops on C x H x W maps
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return view.reshape(c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with C_out x C_in x k x k filters."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects C x H x W input and 4-D weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("conv2d supports square kernels only")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if stride < 1 or pad < 0:
        raise ContractError("stride must be positive and pad non-negative")
    _, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ContractError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, k, k, ho, wo)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return make_op(out, parents, backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd extents are padded with -inf (output is ceil-halved)."""
    if x.ndim != 3:
        raise DimensionError(f"maxpool2 expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.full((c, 2 * ho, 2 * wo), -np.inf)
    xp[:, :h, :w] = x.data
    blocks = xp.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros((c, ho, wo, 4), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        full = gb.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        return (full[:, :h, :w],)

    return make_op(out, (x,), backward, "maxpool2")


def upsample2_nearest(x: Tensor, size: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour 2x upsampling, cropped to ``size`` (H, W) when given."""
    if x.ndim != 3:
        raise DimensionError(f"upsample2_nearest expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    th, tw = size if size is not None else (2 * h, 2 * w)
    if th > 2 * h or tw > 2 * w:
        raise DimensionError(f"cannot upsample {h}x{w} by 2 to {th}x{tw}")
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)[:, :th, :tw]

    def backward(g):
        full = np.zeros((c, 2 * h, 2 * w), dtype=DTYPE)
        full[:, :th, :tw] = g
        return (full.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return make_op(out, (x,), backward, "upsample2_nearest")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    input_index: int
    coord: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    max_error: float
    worst: GradCheckEntry | None
    entries: list[GradCheckEntry] = field(default_factory=list)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error <= tol


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    abs_floor: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    The error per coordinate is relative, |a - n| / max(|a|, |n|), falling back
    to the absolute difference when both magnitudes are below ``abs_floor``.
    ``max_coords`` limits how many coordinates per input are probed (chosen at
    random with ``rng``); entries come back sorted worst first.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    fn(*inputs).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    entries: list[GradCheckEntry] = []
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = fn(*inputs).item()
            flat[c] = orig - eps
            fm = fn(*inputs).item()
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[idx].reshape(-1)[c])
            denom = max(abs(ana), abs(num))
            err = abs(ana - num) if denom < abs_floor else abs(ana - num) / denom
            entries.append(GradCheckEntry(idx, tuple(int(v) for v in np.unravel_index(c, t.shape)), ana, num, err))
    for t in inputs:
        t.grad = None
    entries.sort(key=lambda e: e.error, reverse=True)
    worst = entries[0] if entries else None
    return GradCheckReport(worst.error if worst else 0.0, worst, entries)
