"""Dense float64 tensors with reverse-mode autodiff, residual MLPs and SGD.

Only the handful of operations the diffusion model and the quantile
regressors need are provided. Binary operations accept identical shapes or
a right operand whose shape equals the left operand's shape minus the
leading batch axis.
"""
from __future__ import annotations

import contextlib
import dataclasses
import json
import math
from collections.abc import Iterator, Sequence
from pathlib import Path

import numpy as np
from scipy.special import expit

PARAMS_FORMAT = "qrmia.ndcore.params"
PARAMS_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate the shape algebra."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _lift(other)
        _check_broadcast(self, other)
        out = Tensor(self.data + other.data)

        def backward(g):
            _accumulate(self, g)
            _accumulate(other, _unbroadcast(g, other.shape))

        return _record(out, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _lift(other)
        _check_broadcast(self, other)
        out = Tensor(self.data - other.data)

        def backward(g):
            _accumulate(self, g)
            _accumulate(other, -_unbroadcast(g, other.shape))

        return _record(out, (self, other), backward)

    def __rsub__(self, other) -> Tensor:
        return _lift(other) - self

    def __neg__(self) -> Tensor:
        out = Tensor(-self.data)
        return _record(out, (self,), lambda g: _accumulate(self, -g))

    def __mul__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            c = float(other)
            out = Tensor(self.data * c)
            return _record(out, (self,), lambda g: _accumulate(self, g * c))
        other = _lift(other)
        _check_broadcast(self, other)
        out = Tensor(self.data * other.data)

        def backward(g):
            _accumulate(self, g * other.data)
            _accumulate(other, _unbroadcast(g * self.data, other.shape))

        return _record(out, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"cannot matmul {self.shape} by {other.shape}")
        out = Tensor(self.data @ other.data)

        def backward(g):
            _accumulate(self, g @ other.data.T)
            _accumulate(other, self.data.T @ g)

        return _record(out, (self, other), backward)

    # -- reductions -------------------------------------------------------

    def sum(self) -> Tensor:
        out = Tensor(np.sum(self.data))
        return _record(out, (self,), lambda g: _accumulate(self, np.full(self.shape, float(g))))

    def mean(self) -> Tensor:
        n = self.data.size
        out = Tensor(np.mean(self.data))
        return _record(out, (self,), lambda g: _accumulate(self, np.full(self.shape, float(g) / n)))

    def square(self) -> Tensor:
        out = Tensor(self.data * self.data)
        return _record(out, (self,), lambda g: _accumulate(self, 2.0 * g * self.data))

    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.data.ndim == 0:
        return
    if a.data.ndim >= 1 and b.shape == a.shape[1:]:
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    return np.sum(g, axis=0)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _record(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight + bias`` for a batch ``x`` of shape (B, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    out = Tensor(x.data @ weight.data + bias.data)

    def backward(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        _accumulate(bias, np.sum(g, axis=0))

    return _record(out, (x, weight, bias), backward)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor(x.data * s)
    return _record(out, (x,), lambda g: _accumulate(x, g * (s + x.data * s * (1.0 - s))))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: _accumulate(x, g * mask))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: _accumulate(x, g * (1.0 - y * y)))


ACTIVATIONS = {"silu": silu, "tanh": tanh, "relu": relu}


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Clear gradients, backpropagate ``loss`` and return one gradient per param.

    Parameters the loss does not depend on get a zero gradient.
    """
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- networks -----------------------------------------------------------------


class Mlp:
    """Fully connected network with optional residual hidden blocks.

    Hidden layer ``i`` computes ``act(h @ W_i + b_i)``; when ``residual`` is
    set and the layer keeps its width, the input is added back. The last
    layer is affine.
    """

    def __init__(self, widths: Sequence[int], activation: str = "silu", residual: bool = True,
                 params: Sequence[np.ndarray] | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"widths must list at least two positive sizes, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.residual = residual
        if params is None:
            params = [np.zeros(s) for s in self.param_shapes()]
        self.params = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
        for p, s in zip(self.params, self.param_shapes()):
            if p.shape != s:
                raise ShapeError(f"parameter shape {p.shape} != expected {s}")

    @classmethod
    def init(cls, widths: Sequence[int], seed: int | np.random.Generator,
             activation: str = "silu", residual: bool = True) -> Mlp:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(rng.uniform(-bound, bound, size=(fan_out,)))
        return cls(widths, activation, residual, params)

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def parameters(self) -> list[Tensor]:
        return self.params

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        x = _lift(x)
        if x.data.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input (batch, {self.widths[0]}), got {x.shape}")
        act = ACTIVATIONS[self.activation]
        h = x
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            z = linear(h, self.params[2 * i], self.params[2 * i + 1])
            if i == n_layers - 1:
                return z
            a = act(z)
            h = h + a if self.residual and self.widths[i] == self.widths[i + 1] else a
        raise AssertionError("unreachable")

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(x).data

    def descriptor(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "residual": self.residual}

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    @classmethod
    def from_flat(cls, descriptor: dict, flat: Sequence[float]) -> Mlp:
        net = cls(descriptor["widths"], descriptor["activation"], descriptor["residual"])
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != net.n_params:
            raise ShapeError(f"expected {net.n_params} parameters, got {flat.size}")
        offset = 0
        for p in net.params:
            p.data = flat[offset:offset + p.data.size].reshape(p.shape).copy()
            offset += p.data.size
        return net

    def copy(self) -> Mlp:
        return Mlp.from_flat(self.descriptor(), self.flat_params())


# -- optimisation -------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    clip_norm: float | None = None
    schedule: str = "constant"  # or "linear": decay to zero over ``steps``

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when given")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate of the 1-based ``step``."""
        if self.schedule == "linear" and self.steps > 0:
            return self.lr * (1.0 - (step - 1) / self.steps)
        return self.lr


class Sgd:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractError("params and grads must align one-to-one")
        grads = _clip(grads, self.cfg.clip_norm)
        self.t += 1
        lr = self.cfg.lr_at(self.t)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            v = self.cfg.momentum * self.velocity[i] + g
            self.velocity[i] = v
            p.data = p.data - lr * v


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], cfg: SgdConfig,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional form of one :class:`Sgd` update on raw arrays.

    ``velocity`` is updated in place when given; without it the update is
    plain gradient descent for this call. Uses the base learning rate.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads must align one-to-one")
    grads = _clip(grads, cfg.clip_norm)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if velocity is not None:
            velocity[i] = cfg.momentum * velocity[i] + g
            g = velocity[i]
        out.append(np.asarray(p, dtype=np.float64) - cfg.lr * g)
    return out


def _clip(grads: Sequence[np.ndarray], clip_norm: float | None) -> Sequence[np.ndarray]:
    if clip_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return [g * scale for g in grads]


# -- persistence --------------------------------------------------------------


def save_params(path: str | Path, net: Mlp, seed: int, steps: int, extra: dict | None = None) -> None:
    record = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "architecture": net.descriptor(),
        "seed": int(seed),
        "steps": int(steps),
        "params": net.flat_params().tolist(),
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record))


def load_params(path: str | Path) -> tuple[Mlp, dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path}: not a parameter record")
    if record.get("version") != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported parameter record version {record.get('version')}")
    net = Mlp.from_flat(record["architecture"], record["params"])
    return net, record
