"""Minimal dense tensors with reverse-mode autodiff, the layers the CPAE
networks are built from, Adam, and the binary parameter checkpoint format.

Arrays are numpy-backed. Only the operations the three networks and the
distance losses need are provided; broadcasting is limited to bias-style
trailing-axis broadcasting.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "DimensionError",
    "TrainingDivergedError",
    "no_grad",
    "make_op",
    "linear",
    "relu",
    "tanh",
    "maxpool_points",
    "concat_latent",
    "Module",
    "Linear",
    "BatchNorm",
    "MLP",
    "mlp_forward",
    "AdamState",
    "adam_step",
    "Adam",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
]


class NonFiniteError(ValueError):
    """A tensor received NaN or Inf values."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, name: str, detail: str = "non-finite values"):
        super().__init__(f"training diverged: {detail} in {name!r}")
        self.name = name


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.array(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr.copy()
    return arr.astype(np.float32)


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


class Tensor:
    """A value in the computation graph.

    Leaf tensors created by users own a copy of their data. Gradients are only
    retained on leaves that have ``requires_grad`` set; intermediate gradients
    live for the duration of one ``backward`` call.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_float_array(data, dtype)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        _check_finite(data, "operation output")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))

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

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def make_op(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Record a custom differentiable operation.

    ``backward(g)`` receives the upstream gradient (shape of ``value``) and
    returns one gradient (or None) per parent.
    """
    return Tensor._node(np.asarray(value), parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and reduction ops --------------------------------------------
def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data
    return Tensor._node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return Tensor._node(a.data * s, (a,), lambda g: (g * s,))
    out = a.data * b.data
    return Tensor._node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return Tensor._node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(out, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._node(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._node(y, (x,), lambda g: (g * (1.0 - y * y),))


def _rowstable_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # One (1, d) @ (d, h) product per row: every row goes through the same
    # kernel, so its result does not depend on the other rows in the call.
    # A plain 2-D gemm tiles rows and can differ in the last bit.
    return np.matmul(x[:, None, :], w)[:, 0, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(*lead, b.shape[1])

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return Tensor._node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, rowstable: bool = False) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match layer fan-in {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = _rowstable_matmul(x2, weight.data) if rowstable else x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    y = y.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._node(y, parents, lambda g: backward(g)[: len(parents)])


def maxpool_points(x: Tensor) -> Tensor:
    """Per-feature maximum over the point axis (second to last).

    Gradient goes to the first (lowest index) maximising point per feature.
    """
    if x.ndim < 2:
        raise DimensionError(f"maxpool_points needs (..., k, d), got {x.shape}")
    if x.shape[-2] == 0:
        raise ValueError("maxpool_points over an empty point axis")
    idx = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return Tensor._node(out, (x,), backward)


def concat_latent(points: Tensor, z: Tensor) -> Tensor:
    """Concatenate a per-shape latent onto every point: (..., k, c) + (..., L) -> (..., k, c+L)."""
    if points.shape[:-2] != z.shape[:-1]:
        raise DimensionError(f"batch shapes differ: points {points.shape}, latent {z.shape}")
    k, c = points.shape[-2], points.shape[-1]
    zb = np.broadcast_to(z.data[..., None, :], (*z.shape[:-1], k, z.shape[-1]))
    out = np.concatenate([points.data, zb.astype(points.dtype, copy=False)], axis=-1)

    def backward(g):
        return g[..., :c], g[..., c:].sum(axis=-2)

    return Tensor._node(out, (points, z), backward)


# -- modules ------------------------------------------------------------------
class Module:
    """Parameter container with train/eval mode."""

    training = True

    def _children(self) -> Iterable[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(prefix + key + "."))
        return params

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        for name in getattr(self, "_buffer_names", ()):
            buffers[prefix + name] = getattr(self, name)
        for key, value in self._children():
            if isinstance(value, Module):
                buffers.update(value.named_buffers(prefix + key + "."))
        return buffers

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            _check_finite(value, name)
            p.data = value.astype(p.dtype).copy()
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.asarray(state[name]).astype(getattr(owner, attr).dtype).copy())

    def _resolve(self, dotted: str):
        obj: object = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, parts[-1]


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True, dtype=dtype)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias, rowstable=not self.training)


class BatchNorm(Module):
    """Per-feature batch normalisation over every leading axis."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(features), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(features), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        x2 = x.data.reshape(-1, d)
        if not self.training:
            scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
            shift = self.beta.data - self.running_mean * scale
            y = (x2 * scale + shift).reshape(x.shape)

            def backward_eval(g):
                g2 = g.reshape(-1, d)
                xhat = (x2 - self.running_mean) / np.sqrt(self.running_var + self.eps)
                return (
                    (g2 * scale).reshape(x.shape),
                    (g2 * xhat).sum(axis=0),
                    g2.sum(axis=0),
                )

            return Tensor._node(y, (x, self.gamma, self.beta), backward_eval)

        n = x2.shape[0]
        mean = x2.mean(axis=0)
        centered = x2 - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        y = (xhat * self.gamma.data + self.beta.data).reshape(x.shape)
        if _GRAD_ENABLED:
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)

        def backward(g):
            g2 = g.reshape(-1, d)
            gxhat = g2 * self.gamma.data
            gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            return gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

        return Tensor._node(y, (x, self.gamma, self.beta), backward)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, None: None, "none": None}


class MLP(Module):
    """Pointwise MLP described by ``(width, activation, batchnorm)`` triples.

    Layers act on the last axis only, so rows never mix except through
    training-mode batch statistics.
    """

    def __init__(self, fan_in: int, spec: Sequence[tuple[int, str | None, bool]], rng: np.random.Generator, dtype=np.float32):
        self.spec = [(int(w), act, bool(bn)) for w, act, bn in spec]
        self.layers: list[Module] = []
        self.fan_in = fan_in
        width = fan_in
        for out, act, bn in self.spec:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            self.layers.append(Linear(width, out, rng, dtype))
            if bn:
                self.layers.append(BatchNorm(out, dtype=dtype))
            if _ACTIVATIONS[act] is not None:
                self.layers.append(_Activation(act))
            width = out
        self.fan_out = width

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.layers)


class _Activation(Module):
    def __init__(self, kind: str):
        self.kind = kind

    def __call__(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.kind](x)


def mlp_forward(x: Tensor, layers: Sequence[Module]) -> Tensor:
    """Apply a composed affine/activation chain, recording the graph."""
    first = next((layer for layer in layers if isinstance(layer, Linear)), None)
    if first is not None and x.shape[-1] != first.fan_in:
        raise DimensionError(f"input width {x.shape[-1]} does not match first layer fan-in {first.fan_in}")
    for layer in layers:
        x = layer(x)
    return x


# -- optimisation ---------------------------------------------------------------
@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingDivergedError(name, "non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = state.epsilon * np.sqrt(1.0 - b2**t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)
        if not np.isfinite(p).all():
            raise TrainingDivergedError(name)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(
            {name: p.data for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.state,
        )


# -- gradient checking ----------------------------------------------------------------
def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4,
              zero_tol: float = 1e-7) -> float:
    """Max relative error between autodiff and central differences over all inputs.

    ``fn`` receives float64 tensors and must return a scalar tensor. The error
    per input is ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the
    2-norm. Inputs whose analytic and numeric gradients both have norm below
    ``zero_tol`` (e.g. a bias feeding straight into batch normalisation) count
    as agreeing.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                fp = fn(*[Tensor(x, dtype=np.float64) for x in arrays]).item()
            flat[j] = orig - h
            with no_grad():
                fm = fn(*[Tensor(x, dtype=np.float64) for x in arrays]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale >= zero_tol:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


# -- checkpoints ---------------------------------------------------------------------
CHECKPOINT_MAGIC = b"CPAE"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors in the versioned CPAE binary layout (see README)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CPAE checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
