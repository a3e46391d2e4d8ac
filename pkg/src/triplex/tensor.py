"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable primitive records a node holding its inputs and a
closure mapping the output gradient to one gradient per input.  ``backward``
walks the graph in reverse topological order, accumulating gradients, and
then frees the closures so a graph can only be differentiated once.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "tensor",
    "concat",
    "stack",
    "scatter_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "conv2d",
    "depthwise_conv2d",
    "dropout",
    "mse",
    "grad_check",
]

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's rule."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        parts = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


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


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x, dtype=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DTYPE))


class Tensor:
    """An n-dimensional array that can record the operations applied to it.

    ``data`` is a numpy array of float32 or float64.  Leaves created with
    ``requires_grad=True`` receive ``.grad`` after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        # float arrays keep their precision; anything else takes the default dtype
        arr = np.asarray(data)
        if not isinstance(data, (np.ndarray, np.generic)) or arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False
        self.name = name

    # ------------------------------------------------------------------
    # construction helpers
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        # ops already produce float arrays, so skip the checks in __init__
        out = cls.__new__(cls)
        data = data if isinstance(data, np.ndarray) else np.asarray(data)
        out.data = data if data.dtype.kind == "f" else data.astype(_DTYPE)
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        out._freed = False
        out.name = ""
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            for p in parents:
                if p._freed:
                    raise GraphError(f"{op}: input graph was already consumed by backward()")
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        dt = np.dtype(dtype)
        src = self.dtype
        return Tensor._make(self.data.astype(dt), (self,), lambda g: (g.astype(src),), "astype")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # elementwise arithmetic
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        try:
            out = self.data + other.data
        except ValueError:
            raise ShapeError("add", self.shape, other.shape) from None
        a, b = self.shape, other.shape
        return Tensor._make(out, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        try:
            out = self.data - other.data
        except ValueError:
            raise ShapeError("sub", self.shape, other.shape) from None
        a, b = self.shape, other.shape
        return Tensor._make(out, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        try:
            out = self.data * other.data
        except ValueError:
            raise ShapeError("mul", self.shape, other.shape) from None
        x, y = self.data, other.data

        def backward(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._make(out, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        try:
            out = self.data / other.data
        except ValueError:
            raise ShapeError("div", self.shape, other.shape) from None
        x, y = self.data, other.data

        def backward(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._make(out, (self, other), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def sin(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.sin(x), (self,), lambda g: (g * np.cos(x),), "sin")

    def cos(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.cos(x), (self,), lambda g: (-g * np.sin(x),), "cos")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1 - out * out),), "tanh")

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def relu(self) -> "Tensor":
        return relu(self)

    def gelu(self) -> "Tensor":
        return gelu(self)

    # ------------------------------------------------------------------
    # reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------------
    # linear algebra and shape manipulation
    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        if self.ndim < 1 or other.ndim < 2 or self.shape[-1] != other.shape[-2]:
            raise ShapeError("matmul", self.shape, other.shape)
        a, b = self.data, other.data
        # batched input against a shared 2-D matrix: one flat GEMM each way
        flat = a.ndim > 2 and b.ndim == 2
        try:
            if flat:
                out = (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
            else:
                out = np.matmul(a, b)
        except ValueError:
            raise ShapeError("matmul", self.shape, other.shape) from None

        def backward(g):
            if flat:
                g2 = g.reshape(-1, g.shape[-1])
                return (g2 @ b.T).reshape(a.shape), a.reshape(-1, a.shape[-1]).T @ g2
            if a.ndim == 1:
                ga = (g[..., None, :] @ np.swapaxes(b, -1, -2))[..., 0, :]
                gb = a[:, None] * g[..., None, :]
            else:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(out, (self, other), backward, "matmul")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", src, shape) from None
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError("permute", self.shape, axes, detail="axes must be a permutation")
        inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "permute")

    def transpose(self, a: int = -2, b: int = -1) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.permute(axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with numpy arrays or ints, not Tensors")
        shape, dtype = self.shape, self.dtype
        out = self.data[idx]

        basic = all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(out), (self,), backward, "getitem")

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather slices along ``axis``; repeated indices accumulate in backward."""
        indices = np.asarray(indices, dtype=np.int64)
        shape, dtype = self.shape, self.dtype
        if indices.size and (indices.min() < -shape[axis] or indices.max() >= shape[axis]):
            raise ShapeError("take", shape, indices.shape, detail=f"index out of range on axis {axis}")
        out = np.take(self.data, indices, axis=axis)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            return (full,)

        return Tensor._make(out, (self,), backward, "take")

    # ------------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> dict:
        return backward(self, grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DTYPE), requires_grad=requires_grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> dict:
    """Backpropagate from a scalar ``loss``.

    Returns a map from every leaf that requires grad to its gradient; the same
    arrays are accumulated into ``leaf.grad``.  The recorded graph is released
    afterwards, so a second call on the same graph raises ``GraphError``.
    """
    if loss.size != 1 and grad is None:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward: graph already consumed; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                if g.shape != node.shape:
                    raise GraphError(f"backward: gradient shape {g.shape} != leaf shape {node.shape}")
                leaves[node] = g
            continue
        if node._freed:
            raise GraphError("backward: graph already consumed; re-run the forward pass")
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = _freed_backward
        node._freed = True
        node._parents = ()
    loss._freed = True
    for leaf, g in leaves.items():
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return {leaf: leaf.grad for leaf in leaves}


def _freed_backward(g):
    raise GraphError("backward: graph already consumed")


# ----------------------------------------------------------------------
# composite primitives


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(out, tensors, backward, "stack")


def scatter_rows(x: Tensor, index, size: int) -> Tensor:
    """Place row ``r`` of ``x`` at row ``index[r]`` of a zero matrix with ``size`` rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise ShapeError("scatter_rows", x.shape, index.shape, detail="one index per row")
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_rows: duplicate target indices")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter_rows", x.shape, (size,), detail="index out of range")
    out = np.zeros((size,) + x.shape[1:], dtype=x.dtype)
    out[index] = x.data
    return Tensor._make(out, (x,), lambda g: (g[index],), "scatter_rows")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    d = x.shape[-1]
    inv_d = 1.0 / d
    mu = np.add.reduce(x.data, axis=-1, keepdims=True) * inv_d
    xc = x.data - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [x]
    if weight is not None:
        if weight.shape != (d,):
            raise ShapeError("layer_norm", x.shape, weight.shape)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        if bias.shape != (d,):
            raise ShapeError("layer_norm", x.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)
    lead = tuple(range(x.ndim - 1))

    def backward(gout):
        g = gout if weight is None else gout * weight.data
        gx = (rstd * inv_d) * (d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((gout * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(gout.sum(axis=lead))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` as one op; ``weight`` is (d_in, d_out)."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear", weight.shape, bias.shape, detail="bias must have one entry per output")
    a, w = x.data, weight.data
    a2 = a.reshape(-1, a.shape[-1])
    out = a2 @ w
    if bias is not None:
        out += bias.data
    out = out.reshape(*a.shape[:-1], w.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = ((g2 @ w.T).reshape(a.shape), a2.T @ g2)
        return grads if bias is None else grads + (g2.sum(axis=0),)

    return Tensor._make(out, parents, backward, "linear")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _SQRT1_2))
    out = (z * cdf).astype(z.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return ((g * (cdf + z * pdf)).astype(z.dtype, copy=False),)

    return Tensor._make(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(x.shape, dtype=dt) >= p) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred - target
    return (diff * diff).mean()


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (N, out_h, out_w, C, k, k) as a strided view
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, out_h, out_w, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "zeros") -> Tensor:
    """Dense 2-D convolution (cross-correlation) with "same" padding.

    ``x`` is (N, C, H, W); ``weight`` is (O, C, k, k) with odd ``k``.
    ``padding`` is "zeros" or "edge" (replicate the border pixels).
    """
    if padding not in ("zeros", "edge"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    o, c, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel must be square and odd")
    n, _, h, w = x.shape
    pad = k // 2
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge" if padding == "edge" else "constant")
    cols = _im2col(xp, k, stride, out_h, out_w).reshape(n * out_h * out_w, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one entry per output channel")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    xshape, dtype = xp.shape, x.dtype

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(n, out_h, out_w, c, k, k)
        gxp = np.zeros(xshape, dtype=dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding == "edge":
            # fold the replicated border back onto the edge pixels
            gxp[:, :, pad, :] += gxp[:, :, :pad, :].sum(axis=2)
            gxp[:, :, pad + h - 1, :] += gxp[:, :, pad + h :, :].sum(axis=2)
            gxp[:, :, :, pad] += gxp[:, :, :, :pad].sum(axis=3)
            gxp[:, :, :, pad + w - 1] += gxp[:, :, :, pad + w :].sum(axis=3)
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 2-D convolution, stride 1, "same" zero padding.

    ``x`` is (H, W, C) channels-last; ``weight`` is (k, k, C) with odd ``k``.
    """
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[2] != x.shape[2]:
        raise ShapeError("depthwise_conv2d", x.shape, weight.shape)
    k = weight.shape[0]
    if weight.shape[1] != k or k % 2 == 0:
        raise ShapeError("depthwise_conv2d", x.shape, weight.shape, detail="kernel must be square and odd")
    h, w, _ = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    wd = weight.data
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[i : i + h, j : j + w] * wd[i, j]
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (x.shape[2],):
            raise ShapeError("depthwise_conv2d", weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gp = np.pad(g, ((pad, pad), (pad, pad), (0, 0)))
        gx = np.zeros_like(g)
        gw = np.empty_like(wd)
        for i in range(k):
            for j in range(k):
                # out[r, c] += xp[r+i, c+j] * w[i, j]
                gw[i, j] = (xp[i : i + h, j : j + w] * g).sum(axis=(0, 1))
                gx += gp[k - 1 - i : k - 1 - i + h, k - 1 - j : k - 1 - j + w] * wd[i, j]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "depthwise_conv2d")


# ----------------------------------------------------------------------
# finite-difference gradient check


def grad_check(f: Callable, x, eps: float | None = None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f(x)`` must return a scalar
    Tensor.  Entries of ``x`` are perturbed in place and restored.  Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over all elements.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if not xs:
        raise ValueError("grad_check: nothing to check")
    dtype = xs[0].dtype
    if eps is None:
        # float32: about the cube root of machine epsilon, which balances
        # truncation against rounding in the central difference
        eps = 1e-4 if dtype == np.float64 else 5e-3
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")

    saved_flags = [t.requires_grad for t in xs]
    saved_grads = [t.grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        loss = f(x)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("grad_check: f returned a non-finite value")
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                aflat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(flat[i])
                    fp = f(x).data
                    flat[i] = orig - eps
                    lo = float(flat[i])
                    fm = f(x).data
                    flat[i] = orig
                    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                        raise FloatingPointError("grad_check: f returned a non-finite value")
                    # the representable step differs from 2*eps in float32
                    num = (float(fp.reshape(-1)[0]) - float(fm.reshape(-1)[0])) / (hi - lo)
                    err = abs(float(aflat[i]) - num) / max(1.0, abs(num))
                    worst = max(worst, err)
    finally:
        for t, flag, g in zip(xs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
    return worst
