"""Reverse-mode autodiff over float64 numpy arrays.

A `Tape` records every operation in execution order. Parameters live in a
`ParamStore` and enter a computation as leaves; `Tape.backward` walks the
record backwards and accumulates gradients into the owning stores.
"""

import math
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import logger

Spec = Sequence[Tuple[int, str]]


class DimensionError(ValueError):
    """Shape mismatch, named after the layer or op that hit it."""


class StaleTapeError(RuntimeError):
    """A tape was replayed after the parameters it read were updated."""


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, **context) -> None:
        if context:
            message = "{} ({})".format(
                message, ", ".join(f"{k}={v}" for k, v in context.items())
            )
        super().__init__(message)
        self.context = context


class Tensor:

    __slots__ = ("data", "grad", "tape", "parents", "backward_fn", "store", "name")

    def __init__(
        self,
        data,
        tape: Optional["Tape"] = None,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.store = None
        self.name = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.backward_fn is not None or self.store is not None or self.grad is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """The computation record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: List[Tensor] = []
        self._leaves: Dict[Tuple[int, str], Tensor] = {}
        self._versions: Dict[int, Tuple["ParamStore", int]] = {}

    def constant(self, data) -> Tensor:
        t = Tensor(data, self)
        _check_finite(t.data, "constant")
        return t

    def watch(self, data) -> Tensor:
        """A leaf whose gradient lands in `Tensor.grad`."""
        t = self.constant(data)
        t.grad = np.zeros_like(t.data)
        self.nodes.append(t)
        return t

    def param(self, store: "ParamStore", name: str) -> Tensor:
        key = (id(store), name)
        t = self._leaves.get(key)
        if t is None:
            t = Tensor(store[name], self)
            t.store = store
            t.name = name
            self._leaves[key] = t
            self._versions.setdefault(id(store), (store, store.version))
            self.nodes.append(t)
        return t

    def record(self, op: str, data, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"{op}: operands were recorded on different tapes.")
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        t = Tensor(data, self, parents, backward_fn)
        self.nodes.append(t)
        return t

    def backward(self, loss: Tensor, grad: float = 1.0) -> None:
        """Accumulate d(grad * loss)/d(leaf) into every leaf on the tape."""
        if loss.tape is not self:
            raise ValueError("Loss was not recorded on this tape.")
        if loss.data.size != 1:
            raise DimensionError(f"backward: expected a scalar loss, got shape {loss.shape}")
        for store, version in self._versions.values():
            if store.version != version:
                raise StaleTapeError(
                    f"Parameters changed since the tape was recorded "
                    f"(version {version} -> {store.version})."
                )

        pending = {id(loss): np.full(loss.data.shape, float(grad))}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.store is not None:
                    node.store.accumulate(node.name, g)
                elif node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

        for store, _ in self._versions.values():
            store.check_finite()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by {op}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    x, w = a.data, b.data
    return a.tape.record("matmul", x @ w, (a, b), lambda g: (g @ w.T, x.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[n, m] + b[m]. The only broadcasting op."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {list(x.shape)} + {list(b.shape)}")
    return x.tape.record("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a.tape.record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a.tape.record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return a.tape.record("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape.record("scale", x.data * c, (x,), lambda g: (g * c,))


def mul_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply each row of x[n, m] by the constant mask[n]."""
    mask = np.asarray(mask, dtype=np.float64)
    if x.data.ndim != 2 or mask.shape != (x.shape[0],):
        raise DimensionError(f"mul_mask: mask {list(mask.shape)} for rows of {list(x.shape)}")
    m = mask[:, None]
    return x.tape.record("mul_mask", x.data * m, (x,), lambda g: (g * m,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return x.tape.record("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.tape.record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return x.tape.record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return x.tape.record("exp", y, (x,), lambda g: (g * y,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return x.tape.record(
        "clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,)
    )


def square(x: Tensor) -> Tensor:
    d = x.data
    return x.tape.record("square", d * d, (x,), lambda g: (2.0 * g * d,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return x.tape.record("abs", np.abs(x.data), (x,), lambda g: (g * s,))


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return x.tape.record(
            "sum", x.data.sum(), (x,), lambda g: (np.full(shape, float(g)),)
        )
    return x.tape.record(
        "sum",
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return x.tape.record(
        "mean", x.data.mean(), (x,), lambda g: (np.full(shape, float(g) / n),)
    )


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(
                f"concat: {[list(q.shape) for q in parts]} do not share a row count"
            )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape.record(
        "concat", np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward
    )


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"columns: [{start}:{stop}] out of range for {list(x.shape)}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return x.tape.record("columns", x.data[:, start:stop], (x,), backward)


def detach(x: Tensor) -> Tensor:
    return x.tape.constant(x.data.copy())


# --------------------------------------------------------------------------
# Parameters and dense networks
# --------------------------------------------------------------------------


class ParamStore:
    """Named parameters with matching gradient accumulators."""

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, Optional[np.ndarray]] = {}
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ValueError(f'Duplicate parameter name: "{name}"')
        self.params[name] = np.array(value, dtype=np.float64)
        self.grads[name] = None

    def names(self, prefix: Optional[str] = None) -> List[str]:
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefix)]

    def leaf(self, tape: Tape, name: str) -> Tensor:
        if name not in self.params:
            raise DimensionError(f'Parameter "{name}" is not part of the architecture')
        return tape.param(self, name)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise DimensionError(
                f'Gradient of "{name}" has shape {list(grad.shape)}, '
                f"expected {list(self.params[name].shape)}"
            )
        g = self.grads[name]
        self.grads[name] = grad.copy() if g is None else g + grad

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for name in self.params if names is None else names:
            self.grads[name] = np.zeros_like(self.params[name])

    def check_finite(self) -> None:
        for name, g in self.grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteError("Non-finite gradient", parameter=name)

    def update(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise DimensionError(
                f'Cannot assign shape {list(value.shape)} to "{name}" '
                f"of shape {list(self.params[name].shape)}"
            )
        self.params[name] = value
        self.version += 1

    def bump(self) -> None:
        self.version += 1

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = self.params.keys() - state.keys()
            unexpected = state.keys() - self.params.keys()
            if missing or unexpected:
                raise DimensionError(
                    "Parameter set mismatch; missing: {}; unexpected: {}".format(
                        sorted(missing) or "-", sorted(unexpected) or "-"
                    )
                )
        for name, value in state.items():
            if name in self.params:
                self.update(name, value)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.params.items():
            other.add(name, value)
        return other


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "linear": None,
}


def init_mlp(
    params: ParamStore,
    prefix: str,
    in_dim: int,
    layer_spec: Spec,
    rng: np.random.Generator,
    init: str = "auto",
) -> None:
    """Create `{prefix}.{i}.weight` / `.bias` for every layer.

    `init` is "auto" (He-uniform before ReLU, Glorot-uniform otherwise),
    "zero" or "identity" (square layers only).
    """
    if not layer_spec:
        raise ValueError("layer_spec must not be empty.")
    fan_in = in_dim
    for i, (width, act) in enumerate(layer_spec):
        if act not in ACTIVATIONS:
            raise ValueError(f'Unknown activation "{act}" in layer {prefix}.{i}')
        if init == "zero":
            w = np.zeros((fan_in, width))
        elif init == "identity":
            if fan_in != width:
                raise DimensionError(f"layer {prefix}.{i}: identity init needs a square layer")
            w = np.eye(width)
        elif act == "relu":
            limit = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, (fan_in, width))
        else:
            limit = math.sqrt(6.0 / (fan_in + width))
            w = rng.uniform(-limit, limit, (fan_in, width))
        params.add(f"{prefix}.{i}.weight", w)
        params.add(f"{prefix}.{i}.bias", np.zeros(width))
        fan_in = width


def mlp(params: ParamStore, prefix: str, layer_spec: Spec, x: Tensor) -> Tensor:
    """Run a dense network on `x`, recording onto `x.tape`."""
    if not layer_spec:
        raise ValueError("layer_spec must not be empty.")
    h = x
    for i, (width, act) in enumerate(layer_spec):
        name = f"{prefix}.{i}"
        if name + ".weight" not in params:
            raise DimensionError(f"layer {name}: no such parameters")
        w = params.leaf(x.tape, name + ".weight")
        if h.data.ndim != 2 or w.shape[0] != h.shape[1] or w.shape[1] != width:
            raise DimensionError(
                f"layer {name}: expects input width {w.shape[0]} and output width "
                f"{w.shape[1]}, got input {list(h.shape)} and declared width {width}"
            )
        h = add_bias(matmul(h, w), params.leaf(x.tape, name + ".bias"))
        fn = ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return h


def forward_mlp(
    params: ParamStore, prefix: str, layer_spec: Spec, inputs
) -> Tuple[Tensor, Tape]:
    """Run a dense network on a fresh tape. 1-D inputs are treated as one row."""
    data = np.asarray(inputs, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    tape = Tape()
    out = mlp(params, prefix, layer_spec, tape.watch(data))
    logger.debug("forward_mlp %s: %s -> %s", prefix, list(data.shape), list(out.shape))
    return out, tape
