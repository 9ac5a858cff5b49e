"""Dense float64 arrays with tape-based reverse-mode differentiation.

Each operation returns a new :class:`Tensor` holding a fresh copy of its
result, the tensors it was computed from, and a closure that maps the output
adjoint to input adjoints. ``backward`` walks the recorded graph in reverse
topological order and frees it afterwards.
"""
from __future__ import annotations

import contextlib
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "relu",
    "exp",
    "log",
    "log_softmax",
    "bce_with_logits",
    "grad",
    "grad_check",
    "seeded_rng",
    "dump_tensor",
    "load_tensor",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, *shapes: tuple) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {' and '.join(str(s) for s in shapes)} do not broadcast"
        ) from None


class Tensor:
    """A float64 array node in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _make(cls, data, parents: tuple, backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (g.transpose(inv),))


# ------------------------------------------------------------------ linear maps


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), bw)


def _windows(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """[B, C, H, W] -> [B, H, W, C*k*k] patches (zero padded)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    b, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 2-D convolution with zero padding that preserves H and W.

    ``x`` is [B, C_in, H, W], ``w`` is [C_out, C_in, k, k] with odd ``k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    pad = k // 2
    cout = w.shape[0]
    cols = _windows(x.data, k, pad)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    xshape = x.shape

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # [B, H, W, Cout]
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        # input adjoint is a correlation with the flipped, channel-swapped kernel
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(xshape[1], -1)
        gx = (_windows(g, k, pad) @ wflip.T).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping mean pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {size}")
    blocks = x.data.reshape(*lead, h // size, size, w // size, size)
    out = blocks.mean(axis=(-3, -1))
    scale = 1.0 / (size * size)

    def bw(g):
        gx = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1)
        return (gx * scale,)

    return Tensor._make(out, (x,), bw)


# ------------------------------------------------------------------- losses


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def bw(g):
        return (g * (sig - y) / n,)

    return Tensor._make(per.mean(), (logits,), bw)


# ------------------------------------------------------------------ backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adj = {id(loss): np.ones_like(loss.data)}
    order = _topo(loss)
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = pg if key not in adj else adj[key] + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs``; zeros where no path exists."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max coordinate-wise relative error between backprop and central differences.

    The error for coordinate i is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    Non-differentiable functions (e.g. through a rounding STE) are reported,
    not rejected.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    x0 = _as_array(x.data if isinstance(x, Tensor) else x)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("grad_check: f(x) is not finite")
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    (analytic,) = grad(out, [leaf])

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = xp.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ------------------------------------------------------------------- utilities


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; its stream is fixed across numpy versions and platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) % 2**64))


def dump_tensor(path, t) -> None:
    """Write ``shape: d0 d1 ...`` then the little-endian f64 payload."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = "shape:" + "".join(f" {d}" for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = raw[:nl].decode("ascii")
    if not header.startswith("shape:"):
        raise ValueError(f"{path}: missing 'shape:' header")
    shape = tuple(int(d) for d in header[len("shape:"):].split())
    arr = np.frombuffer(raw[nl + 1:], dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{path}: payload has {arr.size} values, header says {shape}")
    return arr.reshape(shape).astype(np.float64)
