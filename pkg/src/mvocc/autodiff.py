"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation appends a record to an implicit tape (the chain of records
reachable from a result); ``backward`` replays those records in reverse
execution order exactly once and accumulates gradients into every tensor
that requires them.  All arithmetic is float64 and deterministic, so
identical inputs give bitwise identical outputs and gradients.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Monotonic id shared by all graphs; only the relative order of records
# within one graph matters for the backward walk.
_SEQ = itertools.count()


class _Record:
    """One executed differentiable operation on the tape."""

    __slots__ = ("seq", "name", "inputs", "out", "grad_fn")

    def __init__(self, name, inputs, out, grad_fn):
        self.seq = next(_SEQ)
        self.name = name
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn


class Tensor:
    """A dense float64 array plus the record of the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's values but cut from the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class GradTape:
    """Execution-ordered records reachable from one root tensor."""

    def __init__(self, root: Tensor):
        records = []
        seen = set()
        stack = [root]
        while stack:
            rec = stack.pop()._record
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            stack.extend(rec.inputs)
        records.sort(key=lambda r: r.seq)
        self.records = records


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dT into ``.grad`` of every tensor requiring grad.

    The loss must be scalar.  Each tape record is visited exactly once, in
    reverse execution order; running backward a second time on the same
    loss without rebuilding the graph is an error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward was already run on this loss; rebuild the graph first")
    loss._backward_done = True

    tape = GradTape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                holders[k] = t
    for k, t in holders.items():
        g = grads[k]
        t.grad = g if t.grad is None else t.grad + g


def _make(data, name: str, inputs: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = _Record(name, inputs, out, grad_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _make(x.data * s, "scale", (x,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (M,K) @ (K,N) -> (M,N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(n) for n in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(data.copy(), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(n) for n in shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    return _make(data.copy(), "broadcast_to", (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    nd = parts[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for {nd}-D tensors")
    axis = axis % nd
    for p in parts[1:]:
        a, b = list(parts[0].shape), list(p.shape)
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(data, "concat", tuple(parts), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range [start, stop) along one axis."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"slice axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    dim = x.shape[axis]
    if not 0 <= start < stop <= dim:
        raise ShapeError(f"slice range [{start}, {stop}) invalid for axis {axis} of size {dim}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), "slice", (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.sum(), "sum_all", (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    return _make(x.data.mean(), "mean_all", (x,), lambda g: (np.full_like(x.data, float(g) / n),))


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, "gelu", (x,), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, computed max-shifted."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    temperature = float(temperature)
    if not temperature > 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _make(y, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if x.ndim == 0 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: x {x.shape} needs gain and bias of shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    if not eps > 0.0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g):
        lead = tuple(range(x.ndim - 1))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        return term * inv, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# losses and lookups


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _make(np.mean(diff * diff), "mse", (pred, target), grad_fn)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a (N, D) table by an integer index array."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be 2-D, got {table.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding_lookup indices must be integers, got dtype {idx.dtype}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"embedding_lookup index out of range for table of {n} rows")
    idx = idx.copy()

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[idx], "embedding_lookup", (table,), grad_fn)


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Weighted-mean negative log-likelihood of integer labels.

    ``logits`` is (..., K), ``labels`` an integer array of the leading
    shape.  Class weights, when given, rescale each element's loss and the
    mean is taken over total weight, so duplicating a class's weight is
    equivalent to duplicating its voxels.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim < 1:
        raise ShapeError("cross_entropy logits need a class axis")
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"cross_entropy labels must be integers, got dtype {labels.dtype}")
    if labels.size == 0:
        raise ShapeError("cross_entropy needs at least one element")
    if labels.min() < 0 or labels.max() >= k:
        raise ParameterError(f"cross_entropy label out of range for {k} classes")
    if class_weights is None:
        w = np.ones(k)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (k,):
            raise ShapeError(f"class_weights must have shape ({k},), got {w.shape}")
        if (w < 0).any() or w.sum() <= 0:
            raise ParameterError("class_weights must be nonnegative with positive sum")

    flat = logits.data.reshape(-1, k)
    y = labels.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    nll = logsumexp - z[np.arange(y.size), y]
    wy = w[y]
    total_w = wy.sum()
    loss = (wy * nll).sum() / total_w

    def grad_fn(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(y.size), y] -= 1.0
        gl = (float(g) / total_w) * wy[:, None] * p
        return (gl.reshape(logits.shape),)

    return _make(loss, "cross_entropy", (logits,), grad_fn)


def gated_residual(x: Tensor, gate: Tensor, basis: Tensor) -> Tensor:
    """x + sum_k gate[:, k] * basis[:, k, :], a per-row gated correction.

    ``x`` is (V, D), ``gate`` (V, K), ``basis`` (V, K, D).
    """
    x, gate, basis = _as_tensor(x), _as_tensor(gate), _as_tensor(basis)
    if x.ndim != 2 or gate.ndim != 2 or basis.ndim != 3:
        raise ShapeError(
            f"gated_residual: need (V,D), (V,K), (V,K,D); got {x.shape}, {gate.shape}, {basis.shape}"
        )
    v, d = x.shape
    k = gate.shape[1]
    if gate.shape[0] != v or basis.shape != (v, k, d):
        raise ShapeError(
            f"gated_residual: inconsistent shapes {x.shape}, {gate.shape}, {basis.shape}"
        )
    correction = np.einsum("vk,vkd->vd", gate.data, basis.data)

    def grad_fn(g):
        g_gate = np.einsum("vd,vkd->vk", g, basis.data)
        g_basis = gate.data[:, :, None] * g[:, None, :]
        return g, g_gate, g_basis

    return _make(x.data + correction, "gated_residual", (x, gate, basis), grad_fn)
