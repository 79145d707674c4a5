"""Dense tensors with reverse-mode automatic differentiation.

Every value is a numpy array wrapped in a :class:`Tensor`. Operations record
backward closures on the result node whenever an input participates in
differentiation; :func:`backward` replays them in reverse topological order
and clears the tape. 64-bit floats are the default precision, 32-bit can be
selected globally for faster runs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Select the element type for newly created tensors ('float32'/'float64')."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is treated as immutable once the tensor has been used in an
    operation; the optimizer is the only writer and only touches leaves.
    """

    __slots__ = ("data", "grad", "grad_required", "name", "_parents", "_backward")

    def __init__(self, data, grad_required: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.grad_required = grad_required
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def _tracked(self) -> bool:
        return self.grad_required or self._backward is not None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad_required={self.grad_required})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, grad_required: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, grad_required=grad_required, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    """Make a result tensor, recording the tape entry only if needed."""
    out = Tensor(data)
    if any(p._tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ValueError(f"div: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), backward_fn)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return _node(a.data * s, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d tensor, got shape {a.shape}")

    def backward_fn(g):
        return (g.T,)

    return _node(a.data.T, (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {old} as {shape}") from None

    def backward_fn(g):
        return (g.reshape(old),)

    return _node(data, (a,), backward_fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ValueError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(data, parts, backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(a.data[idx].copy(), (a,), backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-d tensor; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows: expected 2-d tensor, got shape {a.shape}")
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _node(a.data[indices], (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def backward_fn(g):
        return (np.full_like(a.data, g / n),)

    return _node(a.data.mean(), (a,), backward_fn)


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), backward_fn)


def mean_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims=keepdims), 1.0 / n)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _node(data, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward_fn(g):
        return (g * 0.5 / data,)

    return _node(data, (a,), backward_fn)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(data, (a,), backward_fn)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part).

    eps sits inside the square root, so a constant row maps to zeros.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    n = x.shape[-1]

    def backward_fn(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    del n  # dimension folded into the means above
    return _node(y, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (a,), backward_fn)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def backward_fn(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward_fn(g):
        gd = (2.0 * g / n) * diff
        return gd, -gd

    return _node(np.mean(diff * diff), (pred, target), backward_fn)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits; stable for large |z|."""
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {logits.shape} vs {targets.shape}")
    z, y = logits.data, targets.data
    # max(z,0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 1.0 / (1.0 + np.exp(-z))

    def backward_fn(g):
        return ((g / n) * (sig - y), (g / n) * (-z))

    return _node(per.mean(), (logits, targets), backward_fn)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class indices."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    soft = e / e.sum(axis=1, keepdims=True)
    b = z.shape[0]
    lse = np.squeeze(m, 1) + np.log(e.sum(axis=1))
    per = lse - z[np.arange(b), labels]

    def backward_fn(g):
        gz = soft.copy()
        gz[np.arange(b), labels] -= 1.0
        return (gz * (g / b),)

    return _node(per.mean(), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# op-kind dispatch, backward pass, gradient checking
# ---------------------------------------------------------------------------

_OPS = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat": concat,
    "slice": slice_axis,
    "gather": gather_rows,
    "transpose": transpose,
    "mean": mean,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "softmax": softmax,
    "mse": mse,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply one named operation; unknown kinds raise KeyError."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op kind {op_kind!r}; expected one of {sorted(_OPS)}")
    if op_kind == "concat":
        return concat(list(inputs), **kwargs)
    return _OPS[op_kind](*inputs, **kwargs)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate gradients of every grad_required leaf reachable from ``loss``.

    Returns a map keyed by leaf tensor. The tape is cleared afterwards, so a
    graph can only be differentiated once.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward: loss must be a scalar tensor, got shape {shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_required:
            node.grad = g
            result[node] = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent._tracked or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # clear the tape
    for node in order:
        node._parents = ()
        node._backward = None
    return result


def grad_check(loss_fn, params: dict[str, Tensor], epsilon: float = 1e-3,
               max_coords: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Samples up to ``max_coords`` coordinates across all parameters and returns
    the worst relative error |analytic - numeric| / max(1e-8, |a| + |n|).
    """
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: loss is not finite")
    analytic = {name: None for name in params}
    grads = backward(loss)
    for name, p in params.items():
        analytic[name] = grads.get(p, np.zeros_like(p.data))

    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = float(loss_fn().data)
        flat[i] = orig - epsilon
        down = float(loss_fn().data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
