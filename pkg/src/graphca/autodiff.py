"""Small dense-matrix reverse-mode autodiff, MLP helpers and Adam.

Only the primitives needed by the ratio objectives are provided. Every
value is a float64 numpy array; a :class:`Tensor` records how it was
produced so that :func:`backward` can push gradients to the leaves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or inf shows up in a value or gradient."""

    def __init__(self, name: str, where: str = "value"):
        super().__init__(f"non-finite {where} in tensor {name!r}")
        self.name = name
        self.where = where


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, value, name="const", parents=(), requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self._parents = parents
        self._backward = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor({self.name}, shape={self.value.shape})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # sugar for the handful of arithmetic ops used in objectives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def const(value, name="const") -> Tensor:
    return Tensor(value, name=name, requires_grad=False)


def leaf(value, name) -> Tensor:
    return Tensor(value, name=name, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _unbroadcast(g, shape):
    # sum out axes that were broadcast in the forward op
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def affine(x: Tensor, W: Tensor, b: Tensor, name="affine") -> Tensor:
    """``x @ W + b`` for a batch ``x`` of shape (n, d_in)."""
    if x.value.ndim != 2 or x.value.shape[1] != W.value.shape[0]:
        raise ShapeError(
            f"{name}: input has shape {x.value.shape}, weight expects "
            f"{W.value.shape[0]} columns"
        )
    out = Tensor(x.value @ W.value + b.value, name, (x, W, b))

    def _backward(g):
        if x.requires_grad:
            x._accum(g @ W.value.T)
        if W.requires_grad:
            W._accum(x.value.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    out._backward = _backward
    return out


def relu(x: Tensor, name="relu") -> Tensor:
    out = Tensor(np.maximum(x.value, 0.0), name, (x,))
    out._backward = lambda g: x._accum(g * (x.value > 0))
    return out


def leaky_relu(x: Tensor, slope: float, name="leaky_relu") -> Tensor:
    factor = (x.value > 0) * (1.0 - slope) + slope
    out = Tensor(x.value * factor, name, (x,))
    out._backward = lambda g: x._accum(g * factor)
    return out


def add(a, b, name="add") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value + b.value, name, (a, b))

    def _backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.value.shape))

    out._backward = _backward
    return out


def sub(a, b, name="sub") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value - b.value, name, (a, b))

    def _backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(-_unbroadcast(g, b.value.shape))

    out._backward = _backward
    return out


def mul(a, b, name="mul") -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value * b.value, name, (a, b))

    def _backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.value.shape))

    out._backward = _backward
    return out


def scale(x: Tensor, c: float, name="scale") -> Tensor:
    out = Tensor(c * x.value, name, (x,))
    out._backward = lambda g: x._accum(c * g)
    return out


def sum_rows(x: Tensor, name="sum_rows") -> Tensor:
    """Sum over the last axis: (n, d) -> (n,)."""
    out = Tensor(x.value.sum(axis=-1), name, (x,))
    out._backward = lambda g: x._accum(np.broadcast_to(g[..., None], x.value.shape))
    return out


def total(x: Tensor, name="sum") -> Tensor:
    out = Tensor(x.value.sum(), name, (x,))
    out._backward = lambda g: x._accum(np.full(x.value.shape, float(g)))
    return out


def mean(x: Tensor, name="mean") -> Tensor:
    n = x.value.size
    out = Tensor(x.value.mean(), name, (x,))
    out._backward = lambda g: x._accum(np.full(x.value.shape, float(g) / n))
    return out


def exp(x: Tensor, name="exp") -> Tensor:
    val = np.exp(x.value)
    out = Tensor(val, name, (x,))
    out._backward = lambda g: x._accum(g * val)
    return out


def log(x: Tensor, name="log") -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.value)
    out = Tensor(val, name, (x,))
    out._backward = lambda g: x._accum(g / x.value)
    return out


def log_mean_exp(x: Tensor, name="log_mean_exp") -> Tensor:
    """``log(mean(exp(x)))`` over all entries, stabilized by the max."""
    m = np.max(x.value)
    e = np.exp(x.value - m)
    s = e.sum()
    out = Tensor(m + np.log(s / x.value.size), name, (x,))
    out._backward = lambda g: x._accum(float(g) * e / s)
    return out


def take_rows(table: Tensor, idx, name="take_rows") -> Tensor:
    """Gather rows ``table[idx]``; gradients are scattered back with add.at."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(table.value[idx], name, (table,))

    def _backward(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, idx, g)
        table._accum(acc)

    out._backward = _backward
    return out


def slice_rows(x: Tensor, start: int, stop: int, name="slice_rows") -> Tensor:
    out = Tensor(x.value[start:stop], name, (x,))

    def _backward(g):
        acc = np.zeros_like(x.value)
        acc[start:stop] = g
        x._accum(acc)

    out._backward = _backward
    return out


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, check_finite: bool = True) -> None:
    """Fill ``.grad`` on every tensor upstream of the scalar ``root``."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {root.value.shape}")
    order = _topo(root)
    if check_finite:
        for node in order:
            if not np.isfinite(node.value).all():
                raise NonFiniteError(node.name)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named float64 tensors backed by one flat vector.

    Every tensor is a reshaped view of ``flat``; ``pack`` copies it out and
    ``unpack`` builds a new store around a copy of the given vector.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        tensors = dict(tensors or {})
        self._layout = [(k, np.shape(v)) for k, v in tensors.items()]
        parts = [np.asarray(v, dtype=np.float64).ravel() for v in tensors.values()]
        self.flat = np.concatenate(parts) if parts else np.zeros(0)
        self._views = self._make_views()

    @classmethod
    def _from_layout(cls, layout, flat) -> "ParamStore":
        obj = cls.__new__(cls)
        obj._layout = list(layout)
        obj.flat = flat
        obj._views = obj._make_views()
        return obj

    def _make_views(self):
        views, off = {}, 0
        for name, shape in self._layout:
            size = int(np.prod(shape, dtype=np.int64))
            views[name] = self.flat[off:off + size].reshape(shape)
            off += size
        if off != self.flat.size:
            raise ShapeError(f"flat vector has {self.flat.size} entries, layout needs {off}")
        return views

    @property
    def size(self) -> int:
        return int(self.flat.size)

    @property
    def layout(self):
        return list(self._layout)

    def names(self) -> list[str]:
        return [k for k, _ in self._layout]

    def __getitem__(self, name) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name) -> bool:
        return name in self._views

    def __iter__(self):
        return iter(self.names())

    def __len__(self):
        return len(self._layout)

    def items(self):
        return ((k, self._views[k]) for k, _ in self._layout)

    def pack(self) -> np.ndarray:
        return self.flat.copy()

    def unpack(self, flat) -> "ParamStore":
        flat = np.array(flat, dtype=np.float64, copy=True).ravel()
        return ParamStore._from_layout(self._layout, flat)

    def copy(self) -> "ParamStore":
        return self.unpack(self.flat)

    def merged(self, other: "ParamStore") -> "ParamStore":
        both = dict(self.items())
        for k, v in other.items():
            if k in both:
                raise KeyError(f"duplicate parameter {k!r}")
            both[k] = v
        return ParamStore(both)

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self.items() if k.startswith(prefix)})

    def leaves(self) -> dict[str, Tensor]:
        return {k: leaf(v, k) for k, v in self.items()}

    def __eq__(self, other):
        if not isinstance(other, ParamStore):
            return NotImplemented
        return self._layout == other._layout and np.array_equal(self.flat, other.flat)

    def __repr__(self):
        body = ", ".join(f"{k}{tuple(s)}" for k, s in self._layout)
        return f"ParamStore({body})"


def value_and_grad(
    objective: Callable[[dict[str, Tensor]], Tensor], params: ParamStore
) -> tuple[float, np.ndarray]:
    """Evaluate ``objective`` on leaves built from ``params`` and return the
    scalar value together with the flat gradient (same order as ``pack``)."""
    leaves = params.leaves()
    out = objective(leaves)
    backward(out)
    parts = []
    for name, shape in params.layout:
        g = leaves[name].grad
        if g is None:
            g = np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteError(name, where="gradient")
        parts.append(np.broadcast_to(g, shape).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return float(out.value), flat


def grad_of_scalar(objective, params: ParamStore) -> np.ndarray:
    return value_and_grad(objective, params)[1]


# ---------------------------------------------------------------- MLPs


@dataclass(frozen=True)
class MlpSpec:
    """Feed-forward network shape.

    ``activation`` is applied after every layer except the last, which is
    always linear. Allowed values: ``"relu"``, ``"leaky_relu"`` or ``None``.
    """

    layer_widths: tuple[int, ...]
    activation: str | None = "relu"
    slope: float = 0.2

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        if self.activation not in ("relu", "leaky_relu", None):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky ReLU slope must lie in (0, 1), got {self.slope}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for layer, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            shapes.append((f"{prefix}W{layer}", (a, b)))
            shapes.append((f"{prefix}b{layer}", (b,)))
        return shapes


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> ParamStore:
    tensors = {}
    for name, shape in spec.param_shapes(prefix):
        if len(shape) == 2:
            tensors[name] = glorot_uniform(shape[0], shape[1], rng)
        else:
            tensors[name] = np.zeros(shape)
    return ParamStore(tensors)


def _check_mlp_params(spec: MlpSpec, params, prefix: str):
    for name, shape in spec.param_shapes(prefix):
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}")
        got = np.shape(params[name].value if isinstance(params[name], Tensor) else params[name])
        if tuple(got) != shape:
            raise ShapeError(f"layer {name!r}: expected shape {shape}, got {tuple(got)}")


def mlp_forward(spec: MlpSpec, params: Mapping[str, Tensor], x: Tensor, prefix: str = "") -> Tensor:
    """Recorded forward pass used inside differentiable objectives."""
    h = x
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        h = affine(h, params[f"{prefix}W{layer}"], params[f"{prefix}b{layer}"],
                   name=f"{prefix}layer{layer}")
        if layer < last:
            if spec.activation == "relu":
                h = relu(h, name=f"{prefix}relu{layer}")
            elif spec.activation == "leaky_relu":
                h = leaky_relu(h, spec.slope, name=f"{prefix}lrelu{layer}")
    return h


def mlp_apply(spec: MlpSpec, params: ParamStore, x, prefix: str = "") -> np.ndarray:
    """Evaluate the network on each row of ``x``.

    Uses einsum rather than BLAS so that row results never depend on the
    batch they were evaluated in.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {x.shape}")
    _check_mlp_params(spec, params, prefix)
    if x.shape[1] != spec.d_in:
        raise ShapeError(f"layer '{prefix}W0': input has {x.shape[1]} columns, expected {spec.d_in}")
    h = x
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        h = np.einsum("ij,jk->ik", h, params[f"{prefix}W{layer}"]) + params[f"{prefix}b{layer}"]
        if layer < last:
            if spec.activation == "relu":
                h = np.maximum(h, 0.0)
            elif spec.activation == "leaky_relu":
                h = h * ((h > 0) * (1.0 - spec.slope) + spec.slope)
    return h


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def adam_step(state: AdamState, params: ParamStore, grad) -> tuple[ParamStore, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,) or state.m.shape != grad.shape:
        raise ShapeError(
            f"gradient length {grad.size} does not match parameter length {params.size}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_flat = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return ParamStore._from_layout(params.layout, new_flat), new_state

