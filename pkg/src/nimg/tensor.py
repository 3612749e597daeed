"""Dense tensors with taped reverse-mode differentiation.

Storage defaults to float32 with float64 accumulation inside every op;
setting NIMG_VERIFY=1 (or calling set_default_dtype(np.float64)) switches
storage to float64 end to end. Gradients are always float64. Elementwise
ops require equal shapes or a scalar operand; any other broadcast must go
through an explicit broadcast_to, which keeps reference comparisons
unambiguous.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class UnsupportedOp(ValueError):
    """Unknown op kind."""


class NonScalarLoss(ValueError):
    """backward() requires a scalar loss tensor."""


class DomainError(ValueError):
    """Scalar argument outside its documented domain."""


class EvalError(RuntimeError):
    """A checked function produced a non-finite value."""


_DEFAULT_DTYPE = np.float64 if os.environ.get("NIMG_VERIFY") == "1" else np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UnsupportedOp(f"unsupported storage dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Immutable-after-forward dense array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data), dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded op: inputs, outputs, and the pullback closure."""

    __slots__ = ("op", "inputs", "outputs", "bwd")

    def __init__(self, op: str, inputs: tuple, outputs: tuple, bwd: Callable):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.bwd = bwd


_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: bool = True


class Tape:
    """Ordered op record; backward walks nodes in exact reverse insertion order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class no_grad:
    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def record(op: str, inputs: Sequence[Tensor], out_arrays: Sequence[np.ndarray],
           bwd: Callable) -> tuple[Tensor, ...]:
    """Create output tensors for an op and append a node when tracking is on.

    bwd receives one float64 grad array per output (zeros where unused) and
    returns one grad array (or None) per input. Shared entry point for every
    differentiable op, including fused kernels defined in sibling modules.
    """
    tape = active_tape()
    track = _GRAD_ENABLED and tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(a, requires_grad=track, dtype=a.dtype) for a in out_arrays)
    if track:
        tape.nodes.append(Node(op, tuple(inputs), outs, bwd))
    return outs


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors)).type


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to an operand shape after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _ew_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal "
                     "and neither operand is scalar")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _ew_shapes(a, b, "add")
    out = (_f64(a) + _f64(b)).astype(_result_dtype(a, b))
    return record("add", (a, b), (out,),
                  lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))[0]


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _ew_shapes(a, b, "sub")
    out = (_f64(a) - _f64(b)).astype(_result_dtype(a, b))
    return record("sub", (a, b), (out,),
                  lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))[0]


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _ew_shapes(a, b, "mul")
    da, db = _f64(a), _f64(b)
    out = (da * db).astype(_result_dtype(a, b))
    return record("mul", (a, b), (out,),
                  lambda g: (_sum_to(g * db, a.shape), _sum_to(g * da, b.shape)))[0]


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _ew_shapes(a, b, "div")
    da, db = _f64(a), _f64(b)
    out = (da / db).astype(_result_dtype(a, b))
    return record("div", (a, b), (out,),
                  lambda g: (_sum_to(g / db, a.shape),
                             _sum_to(-g * da / (db * db), b.shape)))[0]


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = (-a.data).astype(a.data.dtype)
    return record("neg", (a,), (out,), lambda g: (-g,))[0]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul requires rank >= 1 operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    da, db = _f64(a), _f64(b)
    out = np.matmul(da, db).astype(_result_dtype(a, b))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(db, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, db) if a.ndim > 1 else g * db
        gb = np.matmul(np.swapaxes(da, -1, -2), g) if a.ndim > 1 and b.ndim > 1 else None
        if gb is None:
            gb = np.matmul(da.T, g) if b.ndim > 1 else da * g
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return record("matmul", (a, b), (out,), bwd)[0]


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = a.data.reshape(shape)
    return record("reshape", (a,), (out,), lambda g: (g.reshape(a.shape),))[0]


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", (a,), (out,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))[0]


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return record("broadcast_to", (a,), (out,), lambda g: (_sum_to(g, a.shape),))[0]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base):
            raise ShapeError(f"concat rank mismatch: {base} vs {t.shape}")
    dtype = _result_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis).astype(dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), (out,), bwd)[0]


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        z = np.zeros(a.shape, dtype=np.float64)
        np.add.at(z, idx, g)
        return (z,)

    return record("gather_rows", (a,), (out,), bwd)[0]


def scatter_add_rows(values: Tensor, indices, n_rows: int) -> Tensor:
    """Accumulate value rows into a zero buffer of n_rows rows (stable order)."""
    values = as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (values.shape[0],):
        raise ShapeError("scatter_add_rows: one index per value row required")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows index out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, _f64(values))
    out = out.astype(values.data.dtype)
    return record("scatter_add_rows", (values,), (out,),
                  lambda g: (np.ascontiguousarray(g[idx]),))[0]


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    e = np.exp(_f64(a))
    out = e.astype(a.data.dtype)
    return record("exp", (a,), (out,), lambda g: (g * e,))[0]


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    out = np.log(da).astype(a.data.dtype)
    return record("log", (a,), (out,), lambda g: (g / da,))[0]


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(_f64(a))
    out = r.astype(a.data.dtype)
    return record("sqrt", (a,), (out,), lambda g: (g * 0.5 / r,))[0]


def sin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    out = np.sin(da).astype(a.data.dtype)
    return record("sin", (a,), (out,), lambda g: (g * np.cos(da),))[0]


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    out = np.cos(da).astype(a.data.dtype)
    return record("cos", (a,), (out,), lambda g: (-g * np.sin(da),))[0]


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    th = np.tanh(_f64(a))
    out = th.astype(a.data.dtype)
    return record("tanh", (a,), (out,), lambda g: (g * (1.0 - th * th),))[0]


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-_f64(a)))
    out = s.astype(a.data.dtype)
    return record("sigmoid", (a,), (out,), lambda g: (g * s * (1.0 - s),))[0]


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    s = 1.0 / (1.0 + np.exp(-da))
    out = (da * s).astype(a.data.dtype)
    return record("silu", (a,), (out,),
                  lambda g: (g * s * (1.0 + da * (1.0 - s)),))[0]


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = _f64(a).sum(axis=axis, keepdims=keepdims).astype(a.data.dtype)
    out = np.asarray(out)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("sum", (a,), (out,), bwd)[0]


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    m = da.max(axis=axis, keepdims=True)
    e = np.exp(da - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = s.astype(a.data.dtype)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return record("softmax", (a,), (out,), bwd)[0]


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    da = _f64(a)
    m = da.max(axis=axis, keepdims=True)
    e = np.exp(da - m)
    se = e.sum(axis=axis, keepdims=True)
    lse = m + np.log(se)
    soft = e / se
    out = (lse if keepdims else np.squeeze(lse, axis=axis)).astype(a.data.dtype)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return record("logsumexp", (a,), (np.asarray(out),), bwd)[0]


def layernorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the last axis, no affine parameters."""
    a = as_tensor(a)
    da = _f64(a)
    mu = da.mean(axis=-1, keepdims=True)
    xc = da - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat.astype(a.data.dtype)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("layernorm", (a,), (out,), bwd)[0]


def rmsnorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis, no affine parameters."""
    a = as_tensor(a)
    da = _f64(a)
    ms = (da * da).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    out = (da * inv).astype(a.data.dtype)
    n = a.shape[-1]

    def bwd(g):
        dot = (g * da).sum(axis=-1, keepdims=True)
        return (g * inv - da * (dot * inv ** 3 / n),)

    return record("rmsnorm", (a,), (out,), bwd)[0]


def add_auxiliary(main: Tensor, aux: Tensor) -> Tensor:
    """Pass main through unchanged while routing gradient into aux.

    Backward sends the upstream gradient to main and injects the summed
    upstream gradient into aux, exactly as if aux had been added to the
    objective — without aux appearing in the forward value.
    """
    main, aux = as_tensor(main), as_tensor(aux)
    out = main.data.copy()

    def bwd(g):
        inj = np.full(aux.shape, np.sum(g), dtype=np.float64)
        return g, inj

    return record("add_auxiliary", (main, aux), (out,), bwd)[0]


# ---------------------------------------------------------------------------
# dispatch-style forward + backward engine


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "reshape": reshape, "transpose": transpose,
    "broadcast_to": broadcast_to, "concat": concat,
    "gather_rows": gather_rows, "scatter_add_rows": scatter_add_rows,
    "exp": exp, "log": log, "sqrt": sqrt, "sin": sin, "cos": cos,
    "tanh": tanh, "sigmoid": sigmoid,
    "silu": silu, "sum": sum, "mean": mean, "softmax": softmax,
    "logsumexp": logsumexp, "layernorm": layernorm, "rmsnorm": rmsnorm,
    "add_auxiliary": add_auxiliary,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op; unknown kinds raise UnsupportedOp."""
    fn = _OPS.get(op_kind)
    if fn is None:
        raise UnsupportedOp(f"unknown op kind {op_kind!r}")
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into .grad of every requires_grad tensor.

    Nodes are visited in exact reverse insertion order. Calling twice
    without zero_grad accumulates.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        out_grads = []
        have_any = False
        for o in node.outputs:
            g = grads.get(id(o))
            if g is None:
                g = np.zeros(o.shape, dtype=np.float64)
            else:
                have_any = True
            out_grads.append(g)
        if not have_any:
            continue
        in_grads = node.bwd(*out_grads)
        if not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64)
                owners[key] = t
    for key, t in owners.items():
        if not t.requires_grad:
            continue
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    def __init__(self, max_rel_err: float, tol: float,
                 analytic: np.ndarray, numeric: np.ndarray):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.analytic = analytic
        self.numeric = numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self) -> str:
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"tol={self.tol:.1e}, passed={self.passed})")


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor,
               h: float = 1e-4, tol: float = 1e-5) -> GradCheckReport:
    """Compare the taped gradient of a scalar fn against central differences.

    rel err per element is |a - n| / max(1e-8, |a| + |n|).
    """
    if h <= 0:
        raise DomainError("h must be positive")
    base = point.data.astype(np.float64).copy()

    def eval_at(arr: np.ndarray) -> float:
        with no_grad():
            v = fn(Tensor(arr, dtype=np.float64))
        if v.size != 1:
            raise NonScalarLoss("grad_check fn must be scalar-valued")
        val = float(v.data.reshape(()))
        if not np.isfinite(val):
            raise EvalError("fn evaluated to a non-finite value")
        return val

    p = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = fn(p)
    if out.size != 1:
        raise NonScalarLoss("grad_check fn must be scalar-valued")
    if not np.all(np.isfinite(out.data)):
        raise EvalError("fn evaluated to a non-finite value")
    backward(tape, out)
    analytic = (p.grad if p.grad is not None else np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = eval_at(base)
        flat[i] = keep - h
        fm = eval_at(base)
        flat[i] = keep
        numeric[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, tol,
                           analytic.reshape(point.shape), numeric.reshape(point.shape))
