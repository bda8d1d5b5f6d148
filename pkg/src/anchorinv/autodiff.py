"""Dense tensors with reverse-mode automatic differentiation.

Minimal define-by-run engine on top of numpy.  Every primitive builds an
output tensor that remembers its parent tensors and a closure that pushes the
output gradient back to them; ``backward`` topologically sorts the graph from
a scalar output and runs the closures in reverse.

Conventions, chosen to keep failure modes loud rather than silent:

* float32 storage by default; build graphs in float64 when checking gradients
  against central differences.
* no implicit broadcasting between tensors.  Elementwise ops require equal
  shapes; mixing shapes goes through explicit primitives (``subtract_rowwise``,
  ``stack_rows``, ...).  Scalars (python numbers) are the only exception.
* any primitive that produces NaN or Inf raises ``NonFiniteError`` at the op
  that produced it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "conv2d",
    "avg_pool2d",
    "softmax_with_temperature",
    "cosine_similarity_matrix",
    "take_per_row",
    "subtract_rowwise",
    "stack_rows",
    "finite_difference_check",
]

DEFAULT_DTYPE = np.float32
_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operands have shapes the primitive does not accept."""


class NonFiniteError(FloatingPointError):
    """A tensor primitive produced NaN or Inf."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction inside its body."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        else:
            arr = np.ascontiguousarray(arr)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a primitive; "
                             "multiply by a reciprocal explicitly")
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method-style primitives --------------------------------------------

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tensor_mean(self, axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    def norm(self) -> "Tensor":
        return l2_norm(self)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None], op: str) -> Tensor:
    """Wrap a freshly computed array as a graph node."""
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"'{op}' needs equal shapes, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"'{op}' needs equal dtypes, got {a.dtype} and {b.dtype}")


# -- elementwise primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward_fn, "mul")


def add_scalar(a: Tensor, s: float) -> Tensor:
    def backward_fn(g):
        _accumulate(a, g)

    return _node(a.data + a.dtype.type(s), (a,), backward_fn, "add_scalar")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def backward_fn(g):
        _accumulate(a, g * a.dtype.type(s))

    return _node(a.data * a.dtype.type(s), (a,), backward_fn, "mul_scalar")


def neg(a: Tensor) -> Tensor:
    return mul_scalar(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, a.dtype.type(0)), (a,), backward_fn, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward_fn, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _node(out_data, (a,), backward_fn, "log")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward_fn(g):
        _accumulate(a, g * sign)

    return _node(np.abs(a.data), (a,), backward_fn, "abs")


# -- shape / reduction primitives ---------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward_fn, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def backward_fn(g):
        _accumulate(a, np.ascontiguousarray(g.T))

    return _node(np.ascontiguousarray(a.data.T), (a,), backward_fn, "transpose")


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def backward_fn(g):
            _accumulate(a, np.full_like(a.data, g.reshape(())))

        return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward_fn, "sum")

    axis = int(axis)

    def backward_axis_fn(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(a.data.sum(axis=axis), (a,), backward_axis_fn, "sum")


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[int(axis)]
    return mul_scalar(tensor_sum(a, axis), 1.0 / count)


def l2_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt(np.sum(np.square(a.data, dtype=np.float64))))
    out_data = np.asarray(norm, dtype=a.dtype)

    def backward_fn(g):
        scale = g.reshape(()) / max(norm, _NORM_EPS)
        _accumulate(a, (scale * a.data).astype(a.dtype, copy=False))

    return _node(out_data, (a,), backward_fn, "l2_norm")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul needs equal dtypes, got {a.dtype} and {b.dtype}")
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

        def backward_fn(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

        return _node(a.data @ b.data, (a, b), backward_fn, "matmul")

    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

        def backward_vec_fn(g):
            _accumulate(a, np.outer(g, b.data).astype(a.dtype, copy=False))
            _accumulate(b, a.data.T @ g)

        return _node(a.data @ b.data, (a, b), backward_vec_fn, "matmul")

    raise ShapeError(f"matmul supports (m,k)@(k,n) or (m,k)@(k,), got {a.shape} @ {b.shape}")


# -- convolution / pooling ----------------------------------------------------


def _conv_windows(xd: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    return view[:, :, ::sh, ::sw, :, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Cross-correlation of a batch ``x`` (N, C, H, W) with ``weight``
    (K, C, kh, kw), optional ``bias`` (K,), and positive strides."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, c_w, kh, kw = weight.shape
    sh, sw = int(stride[0]), int(stride[1])
    if c != c_w:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {c_w}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel ({kh},{kw}) larger than input ({h},{w})")
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d strides must be >= 1")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({k},)")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ShapeError("conv2d needs matching dtypes")

    windows = _conv_windows(x.data, kh, kw, sh, sw)  # (N, C, Ho, Wo, kh, kw)
    out_data = np.einsum("ncijpq,kcpq->nkij", windows, weight.data, optimize=True)
    out_data = np.ascontiguousarray(out_data, dtype=x.data.dtype)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    ho, wo = out_data.shape[2], out_data.shape[3]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        if weight.requires_grad:
            dw = np.einsum("nkij,ncijpq->kcpq", g, windows, optimize=True)
            _accumulate(weight, np.ascontiguousarray(dw, dtype=weight.dtype))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for p in range(kh):
                row_stop = p + sh * (ho - 1) + 1
                for q in range(kw):
                    col_stop = q + sw * (wo - 1) + 1
                    dx[:, :, p:row_stop:sh, q:col_stop:sw] += np.einsum(
                        "nkij,kc->ncij", g, weight.data[:, :, p, q], optimize=True)
            _accumulate(x, dx)

    return _node(out_data, parents, backward_fn, "conv2d")


def avg_pool2d(x: Tensor, kernel: tuple[int, int], stride: tuple[int, int]) -> Tensor:
    """Average pooling over (N, C, H, W) with the given kernel and stride."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    kh, kw = int(kernel[0]), int(kernel[1])
    sh, sw = int(stride[0]), int(stride[1])
    if kh > h or kw > w:
        raise ShapeError(f"avg_pool2d kernel ({kh},{kw}) larger than input ({h},{w})")
    if sh < 1 or sw < 1:
        raise ShapeError("avg_pool2d strides must be >= 1")

    windows = _conv_windows(x.data, kh, kw, sh, sw)
    out_data = np.ascontiguousarray(windows.mean(axis=(4, 5)), dtype=x.data.dtype)
    ho, wo = out_data.shape[2], out_data.shape[3]
    inv_area = 1.0 / (kh * kw)

    def backward_fn(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        spread = (g * x.dtype.type(inv_area))
        for p in range(kh):
            row_stop = p + sh * (ho - 1) + 1
            for q in range(kw):
                col_stop = q + sw * (wo - 1) + 1
                dx[:, :, p:row_stop:sh, q:col_stop:sw] += spread
        _accumulate(x, dx)

    return _node(out_data, (x,), backward_fn, "avg_pool2d")


# -- classifier-facing fused primitives ----------------------------------------


def softmax_with_temperature(x: Tensor, temperature: float, axis: int = -1) -> Tensor:
    """Numerically stable softmax of ``x / temperature`` along ``axis``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, ((g - inner) * out_data / x.dtype.type(temperature)))

    return _node(np.ascontiguousarray(out_data), (x,), backward_fn, "softmax")


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = _NORM_EPS) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (N, D) and ``b`` (K, D).

    Fused primitive with a hand-derived adjoint so callers never need
    broadcasting.  Rows with norm below ``eps`` are clamped to ``eps``; the
    norm-direction term of the gradient is dropped for clamped rows (the
    clamped norm is constant there).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix needs (N,D),(K,D); got {a.shape}, {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError("cosine_similarity_matrix needs matching dtypes")

    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    na_c = np.maximum(na, eps).astype(a.dtype, copy=False)
    nb_c = np.maximum(nb, eps).astype(b.dtype, copy=False)
    u = a.data / na_c[:, None]
    v = b.data / nb_c[:, None]
    cos = u @ v.T  # (N, K)
    live_a = (na > eps)[:, None]
    live_b = (nb > eps)[:, None]

    def backward_fn(g):
        if a.requires_grad:
            da = (g @ v - np.where(live_a, (g * cos).sum(axis=1)[:, None] * u, 0.0)) / na_c[:, None]
            _accumulate(a, da.astype(a.dtype, copy=False))
        if b.requires_grad:
            db = (g.T @ u - np.where(live_b, (g * cos).sum(axis=0)[:, None] * v, 0.0)) / nb_c[:, None]
            _accumulate(b, db.astype(b.dtype, copy=False))

    return _node(np.ascontiguousarray(cos), (a, b), backward_fn, "cosine_similarity_matrix")


def take_per_row(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather one element per row: out[n] = x[n, indices[n]]."""
    if x.ndim != 2:
        raise ShapeError(f"take_per_row expects a matrix, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row needs one index per row, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("take_per_row index out of range")
    rows = np.arange(x.shape[0])

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[rows, idx] = g
        _accumulate(x, dx)

    return _node(np.ascontiguousarray(x.data[rows, idx]), (x,), backward_fn, "take_per_row")


def subtract_rowwise(x: Tensor, v: Tensor) -> Tensor:
    """out[n, :] = x[n, :] - v, the explicit row-broadcast subtraction."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"subtract_rowwise needs (N,D) and (D,); got {x.shape}, {v.shape}")
    if x.dtype != v.dtype:
        raise ShapeError("subtract_rowwise needs matching dtypes")

    def backward_fn(g):
        _accumulate(x, g)
        _accumulate(v, -g.sum(axis=0))

    return _node(x.data - v.data[None, :], (x, v), backward_fn, "subtract_rowwise")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix; gradient splits back per row."""
    rows = list(rows)
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    dim = rows[0].shape
    if len(dim) != 1 or any(r.shape != dim for r in rows):
        raise ShapeError("stack_rows needs equal-length 1-d tensors")
    if any(r.dtype != rows[0].dtype for r in rows):
        raise ShapeError("stack_rows needs matching dtypes")

    def backward_fn(g):
        for i, r in enumerate(rows):
            _accumulate(r, g[i])

    return _node(np.stack([r.data for r in rows]), tuple(rows), backward_fn, "stack_rows")


# -- backward pass --------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar ``output`` depends on.

    Gradients from a previous backward pass through the same graph are
    discarded first, so each call yields fresh derivatives.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any tensor with requires_grad=True")
    order = _toposort(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# -- gradient checking -----------------------------------------------------------


def finite_difference_check(fn: Callable[[Sequence[Tensor]], Tensor],
                            inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` must map ``inputs`` to a scalar tensor and be re-evaluable (the
    graph is rebuilt on every call).  Relative error for one coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-12)``.  Run with float64 inputs;
    float32 rounding swamps the ``eps**2`` truncation term otherwise.
    """
    inputs = list(inputs)
    out = fn(inputs)
    if out.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued fn")
    backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        g = np.zeros_like(t.data) if grad is None else grad
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(inputs).item()
            flat[i] = orig - eps
            f_minus = fn(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(gflat[i]) - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
