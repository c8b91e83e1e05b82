"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The engine is deliberately small: it provides exactly the operations the
emotion model needs, each with a hand-written backward rule, plus a
finite-difference checker used to verify every rule.  Broadcasting is
restricted to scalars and bias vectors added over the last axis, so each
backward rule stays auditable.

A forward pass records lineage links between tensors; ``backward`` walks
that graph once in reverse topological order and accumulates gradients,
summing the contributions of every consumer of a tensor.  Graphs are
per-step: dropping the loss tensor releases the whole recording.
"""

import contextlib

import numpy as np

from .errors import ContractError, NumericError, ShapeError, ValidationError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block (evaluation mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """Dense n-dimensional array with an optional gradient and lineage.

    ``data`` is always float64.  ``grad`` is populated by :func:`backward`
    and has the same shape as ``data``.  Tensors are immutable after
    creation except for gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out: Tensor, parents, backward_fn) -> Tensor:
    """Attach lineage to ``out`` if recording is on and any parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    The graph below ``loss`` is linearized once (each node visited exactly
    once, children before parents) and traversed in reverse; fan-out sums
    all consumer contributions.  Gradients from a previous call are
    discarded first.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    for node in topo:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias over the last axis or a scalar."""
    if a.shape == b.shape:
        mode = "same"
    elif a.ndim >= 2 and b.ndim == 1 and a.shape[-1] == b.shape[0]:
        mode = "bias"
    elif b.size == 1 or a.size == 1:
        mode = "scalar"
    else:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def _bw():
        g = out.grad
        if a.requires_grad:
            if mode != "scalar" or a.size > 1:
                a.grad += g
            else:
                a.grad += np.sum(g)
        if b.requires_grad:
            if mode == "same":
                b.grad += g
            elif mode == "bias":
                b.grad += g.reshape(-1, b.shape[0]).sum(axis=0)
            elif b.size == 1:
                b.grad += np.sum(g)
            else:
                b.grad += g

    return _track(out, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def _bw():
        if a.requires_grad:
            a.grad += -out.grad

    return _track(out, (a,), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors, or scaling by a scalar."""
    if not (a.shape == b.shape or a.size == 1 or b.size == 1):
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def _bw():
        g = out.grad
        if a.requires_grad:
            contrib = g * b.data
            a.grad += contrib if a.size > 1 or g.size == 1 else np.sum(contrib)
        if b.requires_grad:
            contrib = g * a.data
            b.grad += contrib if b.size > 1 or g.size == 1 else np.sum(contrib)

    return _track(out, (a, b), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _track(out, (a, b), _bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data.T)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad.T

    return _track(out, (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def _bw():
        if a.requires_grad:
            a.grad += out.grad.reshape(a.shape)

    return _track(out, (a,), _bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into the source."""
    out = Tensor(a.data[idx])

    def _bw():
        if a.requires_grad:
            scatter = np.zeros_like(a.data)
            np.add.at(scatter, idx, out.grad)
            a.grad += scatter

    return _track(out, (a,), _bw)


def concat(parts, axis=0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))

    def _bw():
        offset = 0
        for p in parts:
            n = p.shape[axis]
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + n)
            if p.requires_grad:
                p.grad += out.grad[tuple(sl)]
            offset += n

    return _track(out, tuple(parts), _bw)


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    vectors = list(vectors)
    if not vectors:
        raise ShapeError("stack_rows needs at least one vector")
    for v in vectors:
        if v.ndim != 1 or v.shape != vectors[0].shape:
            raise ShapeError("stack_rows needs same-length 1-D tensors")
    out = Tensor(np.stack([v.data for v in vectors], axis=0))

    def _bw():
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v.grad += out.grad[i]

    return _track(out, tuple(vectors), _bw)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(a.data.sum())

    def _bw():
        if a.requires_grad:
            a.grad += np.full_like(a.data, float(out.grad))

    return _track(out, (a,), _bw)


def tmean(a: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    out = Tensor(a.data.mean())

    def _bw():
        if a.requires_grad:
            a.grad += np.full_like(a.data, float(out.grad) / a.data.size)

    return _track(out, (a,), _bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * (a.data > 0.0)

    return _track(out, (a,), _bw)


def sigmoid(a: Tensor) -> Tensor:
    # exp(-|x|) keeps both tails away from overflow
    z = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(y)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * y * (1.0 - y)

    return _track(out, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * (1.0 - y * y)

    return _track(out, (a,), _bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * y

    return _track(out, (a,), _bw)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def _bw():
        if a.requires_grad:
            a.grad += out.grad / a.data

    return _track(out, (a,), _bw)


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise(a: Tensor, kind: str) -> Tensor:
    """Apply one of the named elementwise nonlinearities."""
    try:
        return _POINTWISE[kind](a)
    except KeyError:
        raise ValidationError(f"unknown pointwise function {kind!r}") from None


# ---------------------------------------------------------------------------
# fused neural-network operations


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def _bw():
        if a.requires_grad:
            g = out.grad
            a.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _track(out, (a,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis to zero mean / unit variance, then affine."""
    if gain.ndim != 1 or bias.ndim != 1:
        raise ShapeError("layer_norm gain and bias must be 1-D")
    d = x.shape[-1]
    if gain.shape[0] != d or bias.shape[0] != d:
        raise ShapeError(f"layer_norm affine size {gain.shape}/{bias.shape} does not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def _bw():
        g = out.grad
        if gain.requires_grad:
            gain.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            bias.grad += g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv * (dxhat - m1 - xhat * m2)

    return _track(out, (x, gain, bias), _bw)


def conv1d(x: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation along the time axis.

    ``x`` is [T, Cin], ``kernels`` is [W, Cin, Cout].  With ``same`` padding
    the input is zero-padded to keep T; with ``valid`` the output has
    T - W + 1 steps.  out[t, o] = sum_w sum_i x[t+w, i] * k[w, i, o].
    """
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d needs x[T,Cin] and kernels[W,Cin,Cout], got {x.shape} and {kernels.shape}")
    t_in, c_in = x.shape
    w, kc_in, c_out = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, kernels expect {kc_in}")
    if padding == "same":
        pad_left, pad_right = (w - 1) // 2, w // 2
    elif padding == "valid":
        pad_left = pad_right = 0
        if w > t_in:
            raise ShapeError(f"kernel width {w} exceeds input length {t_in} with valid padding")
    else:
        raise ValidationError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((pad_left, pad_right), (0, 0)))
    t_out = xp.shape[0] - w + 1
    cols = np.stack([xp[i : i + t_out] for i in range(w)], axis=1)  # [T', W, Cin]
    kmat = kernels.data.reshape(w * c_in, c_out)
    out = Tensor(cols.reshape(t_out, w * c_in) @ kmat)

    def _bw():
        g = out.grad
        if kernels.requires_grad:
            kernels.grad += (cols.reshape(t_out, w * c_in).T @ g).reshape(w, c_in, c_out)
        if x.requires_grad:
            dcols = (g @ kmat.T).reshape(t_out, w, c_in)
            dxp = np.zeros_like(xp)
            for i in range(w):
                dxp[i : i + t_out] += dcols[:, i, :]
            x.grad += dxp[pad_left : pad_left + t_in]

    return _track(out, (x, kernels), _bw)


def max_pool_time(x: Tensor, valid: int | None = None) -> Tensor:
    """Per-channel maximum over time steps; gradient goes to the first argmax.

    ``valid`` restricts the pool to the first ``valid`` rows, so trailing
    padding cannot win the max.
    """
    if x.ndim != 2:
        raise ShapeError(f"max_pool_time needs x[T,C], got {x.shape}")
    t, c = x.shape
    if t < 1:
        raise ShapeError("max_pool_time on an empty time axis")
    v = t if valid is None else int(valid)
    if not 1 <= v <= t:
        raise ShapeError(f"valid count {v} outside [1, {t}]")
    idx = np.argmax(x.data[:v], axis=0)
    out = Tensor(x.data[idx, np.arange(c)])

    def _bw():
        if x.requires_grad:
            scatter = np.zeros_like(x.data)
            scatter[idx, np.arange(c)] = out.grad
            x.grad += scatter

    return _track(out, (x,), _bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under softmax(logits).

    The reduction is the mean over the batch so the learning rate is stable
    across batch sizes.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs logits[N,K], got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ValidationError(f"cross_entropy needs at least 2 classes, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValidationError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValidationError(f"label {bad} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    out = Tensor(-log_p[rows, labels].mean())

    def _bw():
        if logits.requires_grad:
            d = np.exp(log_p)
            d[rows, labels] -= 1.0
            logits.grad += d * (float(out.grad) / n)

    return _track(out, (logits,), _bw)


def embedding_rows(table: Tensor, ids, frozen_row: int | None = None) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds into the table.

    ``frozen_row`` (the padding id) never receives gradient, keeping its row
    fixed at initialization.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValidationError(f"embedding id outside [0, {table.shape[0]})")
    out = Tensor(table.data[ids])

    def _bw():
        if table.requires_grad:
            scatter = np.zeros_like(table.data)
            np.add.at(scatter, ids, out.grad)
            if frozen_row is not None:
                scatter[frozen_row] = 0.0
            table.grad += scatter

    return _track(out, (table,), _bw)


def zero_rows(x: Tensor, valid: int) -> Tensor:
    """Zero every row at index >= ``valid``; gradient is blocked the same way."""
    if x.ndim != 2:
        raise ShapeError(f"zero_rows needs a rank-2 tensor, got {x.shape}")
    out_data = x.data.copy()
    out_data[valid:] = 0.0
    out = Tensor(out_data)

    def _bw():
        if x.requires_grad:
            g = out.grad.copy()
            g[valid:] = 0.0
            x.grad += g

    return _track(out, (x,), _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate``, rescale the rest."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient verification


def gradcheck(f, xs, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``xs`` is one tensor or a sequence; every coordinate of every tensor is
    perturbed.  Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over all coordinates.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    xs = list(xs)
    for x in xs:
        x.data = np.ascontiguousarray(x.data)  # reshape(-1) below must be a view
        x.grad = None
    backward(f(*xs))
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]
    worst = 0.0
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            worst = max(worst, _coordinate_error(f, xs, flat, a_flat[i], i, eps))
    return worst


def _coordinate_error(f, xs, flat, analytic_i, i, eps) -> float:
    saved = flat[i]
    flat[i] = saved + eps
    f_plus = float(f(*xs).data)
    flat[i] = saved - eps
    f_minus = float(f(*xs).data)
    flat[i] = saved
    numeric = (f_plus - f_minus) / (2.0 * eps)
    return abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), 1e-8)


def gradcheck_sampled(f, tensors, per_tensor: int, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Gradcheck over a random sample of coordinates from each tensor.

    Used for whole models, where exhaustive finite differences would be
    intractable; every tensor still contributes ``per_tensor`` coordinates.
    """
    tensors = list(tensors)
    for x in tensors:
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
    backward(f(*tensors))
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in tensors]
    worst = 0.0
    for x, a in zip(tensors, analytic):
        flat = x.data.reshape(-1)
        a_flat = a.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= per_tensor else rng.choice(n, size=per_tensor, replace=False)
        for i in picks:
            worst = max(worst, _coordinate_error(f, tensors, flat, a_flat[i], int(i), eps))
    return worst
