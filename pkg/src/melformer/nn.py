"""Parameterized layers on top of the autograd engine.

Modules track their parameters and submodules through attribute assignment,
so named parameters, train/eval switching, and checkpoint state all fall out
of the object tree.  Affine weights use scaled uniform fan-in initialization;
biases start at zero unless a layer documents otherwise.
"""

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError, ValidationError


class Module:
    """Base class: tracks parameters and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_named_parameters(self):
        return self.named_parameters()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._modules.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValidationError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: stored {arr.shape} vs model {p.data.shape}")
            p.data = arr.copy()

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map y = x W + b on the last axis of a 1-D or 2-D input."""

    def __init__(self, n_in, n_out, rng, bias=True, zero_init=False):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        w = np.zeros((n_in, n_out)) if zero_init else fan_in_uniform(rng, (n_in, n_out), n_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = ag.reshape(x, (1, x.shape[0]))
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return ag.reshape(out, (self.n_out,)) if squeeze else out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Embedding(Module):
    """Lookup table; an optional padding row is held at zero and never trained."""

    def __init__(self, n_rows, dim, rng, pad_id=None, trainable=True):
        super().__init__()
        self.pad_id = pad_id
        table = rng.standard_normal((n_rows, dim)) / math.sqrt(dim)
        if pad_id is not None:
            table[pad_id] = 0.0
        self.table = Tensor(table, requires_grad=trainable)

    def __call__(self, ids) -> Tensor:
        return ag.embedding_rows(self.table, ids, frozen_row=self.pad_id)


class Conv1d(Module):
    """Time-axis cross-correlation layer; see autograd.conv1d for conventions."""

    def __init__(self, width, c_in, c_out, rng, padding="same", bias=True):
        super().__init__()
        self.padding = padding
        self.kernels = Tensor(fan_in_uniform(rng, (width, c_in, c_out), width * c_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.conv1d(x, self.kernels, padding=self.padding)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class Dropout(Module):
    """Inverted dropout, active only while the owning module is in train mode."""

    def __init__(self, rate, rng):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0:
            return x
        return ag.dropout(x, self.rate, self.rng)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position signal, one row per time step."""
    position = np.arange(length)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: dim // 2])
    return pe


def add_positions(x: Tensor) -> Tensor:
    """Add the sinusoidal position signal to a [T, D] sequence."""
    t, d = x.shape
    return ag.add(x, Tensor(sinusoidal_positions(t, d)))
