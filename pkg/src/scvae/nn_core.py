"""Dense tensors with reverse-mode differentiation, parameter storage and Adam.

Every tensor produced by an operation while gradient recording is enabled
remembers its parents and a closure that pushes its gradient back to them.
``backward`` walks that graph in reverse topological order. All arithmetic is
float64 and single-threaded from the caller's point of view, so repeated runs
with the same seed are bitwise reproducible.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError, UsageError

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")
SIDES = ("encoder", "decoder", "latent-head")
SIDE_CODES = {side: code for code, side in enumerate(SIDES)}

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them for differentiation."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_taped(self) -> bool:
        return self._backward is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# operations


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise ``x @ weight.T + bias`` for x of shape [batch, n_in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"affine shape mismatch: input {list(x.shape)} vs weight {list(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(
            f"affine shape mismatch: weight {list(weight.shape)} vs bias {list(bias.shape)}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _make(out, parents, backward)


def activation(kind: str, x: Tensor) -> Tensor:
    """Apply one of tanh, relu, sigmoid or identity elementwise."""
    if kind not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    _check_finite(x.data, f"{kind} input")
    if kind == "tanh":
        out = np.tanh(x.data)
        deriv = lambda: 1.0 - out * out  # noqa: E731
    elif kind == "relu":
        out = np.maximum(x.data, 0.0)
        deriv = lambda: (x.data > 0.0).astype(np.float64)  # noqa: E731
    elif kind == "sigmoid":
        out = _sigmoid(x.data)
        deriv = lambda: out * (1.0 - out)  # noqa: E731
    else:
        out = x.data.copy()
        deriv = lambda: np.ones_like(out)  # noqa: E731

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * deriv())

    return _make(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch: {list(a.shape)} vs {list(b.shape)}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * c)

    return _make(x.data * c, (x,), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * out)

    return _make(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping was active."""
    out = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * inside)

    return _make(out, (x,), backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(x, np.full_like(x.data, float(g)))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice columns ``start:stop`` of a 2-D tensor."""
    out = x.data[:, start:stop].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _make(out, (x,), backward)


def bernoulli_log_likelihood(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row sum of ``t*log(sigmoid(l)) + (1-t)*log(1-sigmoid(l))``."""
    l = logits.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != l.shape:
        raise ConfigurationError(f"target {list(t.shape)} vs logits {list(l.shape)}")
    softplus = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    out = (t * l - softplus).sum(axis=1)

    def backward(g: np.ndarray) -> None:
        _accumulate(logits, g[:, None] * (t - _sigmoid(l)))

    return _make(out, (logits,), backward)


def gaussian_log_likelihood(loc: Tensor, log_var: Tensor, target: np.ndarray) -> Tensor:
    """Per-row diagonal Gaussian log-density of ``target``."""
    t = np.asarray(target, dtype=np.float64)
    diff = t - loc.data
    inv_var = np.exp(-log_var.data)
    out = -0.5 * (np.log(2 * np.pi) + log_var.data + diff * diff * inv_var).sum(axis=1)

    def backward(g: np.ndarray) -> None:
        gc = g[:, None]
        _accumulate(loc, gc * diff * inv_var)
        _accumulate(log_var, gc * 0.5 * (diff * diff * inv_var - 1.0))

    return _make(out, (loc, log_var), backward)


def gaussian_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """Per-row KL(N(mu, exp(log_var)) || N(0, I))."""
    var = np.exp(log_var.data)
    out = 0.5 * (mu.data**2 + var - log_var.data - 1.0).sum(axis=1)

    def backward(g: np.ndarray) -> None:
        gc = g[:, None]
        _accumulate(mu, gc * mu.data)
        _accumulate(log_var, gc * 0.5 * (var - 1.0))

    return _make(out, (mu, log_var), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from a scalar ``loss``.

    Gradient slots along the graph are reset first, so calling this twice on
    equal graphs yields equal gradients instead of accumulating.
    """
    if not loss.is_taped:
        raise UsageError("backward() called on a tensor that was not produced by a recorded operation")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Layer:
    """One affine map ``weight [n_out, n_in]``, ``bias [n_out]``."""

    index: int
    side: str
    weight: Tensor
    bias: Tensor

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class ParamStore:
    layers: list[Layer] = field(default_factory=list)

    def add(self, side: str, n_in: int, n_out: int, rng: np.random.Generator) -> Layer:
        """Append a layer with fan-in scaled uniform weights and zero bias."""
        if side not in SIDES:
            raise ConfigurationError(f"unknown side tag {side!r}")
        limit = np.sqrt(3.0 / n_in)
        index = len(self.layers) + 1
        layer = Layer(
            index=index,
            side=side,
            weight=Tensor(rng.uniform(-limit, limit, size=(n_out, n_in)), requires_grad=True,
                          name=f"{side}[{index}].weight"),
            bias=Tensor(np.zeros(n_out), requires_grad=True, name=f"{side}[{index}].bias"),
        )
        self.layers.append(layer)
        return layer

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def by_side(self, side: str) -> list[Layer]:
        return [layer for layer in self.layers if layer.side == side]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ConfigurationError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, arr in zip(params, arrays):
            if p.shape != arr.shape:
                raise ConfigurationError(f"{p.name}: shape {list(p.shape)} vs {list(arr.shape)}")
            p.data = np.array(arr, dtype=np.float64)

    def validate(self) -> None:
        for expected, layer in enumerate(self.layers, start=1):
            if layer.index != expected:
                raise ConfigurationError(f"layer indices must be contiguous from 1, found {layer.index}")
            if layer.bias.shape != (layer.n_out,):
                raise ConfigurationError(f"layer {layer.index}: bias does not match weight rows")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimizerState":
        tensors = params.parameters()
        return cls(
            m=[np.zeros_like(p.data) for p in tensors],
            v=[np.zeros_like(p.data) for p in tensors],
            **hyper,
        )


def adam_step(params: ParamStore, state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update in place and clear gradients."""
    tensors = params.parameters()
    for p in tensors:
        if p.grad is None:
            raise UsageError(f"parameter {p.name} has no gradient; run backward() first")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(tensors, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint file

CHECKPOINT_MAGIC = b"SCV1"


def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    """Write every weight and bias as a tagged little-endian float64 record."""
    chunks = [CHECKPOINT_MAGIC]
    for layer in params.layers:
        for tensor in (layer.weight, layer.bias):
            chunks.append(struct.pack("<IB", layer.index, SIDE_CODES[layer.side]))
            chunks.append(struct.pack("<I", tensor.data.ndim))
            chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> list[tuple[int, str, np.ndarray]]:
    """Parse a checkpoint into ``(layer index, side, array)`` records."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    records = []
    pos = 4
    while pos < len(raw):
        if pos + 9 > len(raw):
            raise FormatError(f"truncated checkpoint record header at byte {pos}")
        index, code, rank = struct.unpack_from("<IBI", raw, pos)
        pos += 9
        if code >= len(SIDES):
            raise FormatError(f"unknown side code {code} at layer {index}")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims))
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated payload for layer {index}: need {nbytes} bytes, have {len(raw) - pos}")
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims)
        pos += nbytes
        records.append((index, SIDES[code], arr.astype(np.float64)))
    return records


def load_checkpoint(params: ParamStore, path: str | Path) -> None:
    """Load a checkpoint into an already-built ``params`` of the same layout."""
    records = read_checkpoint(path)
    expected = [(layer.index, layer.side) for layer in params.layers for _ in range(2)]
    found = [(index, side) for index, side, _ in records]
    if expected != found:
        raise ConfigurationError("checkpoint layout does not match the configured network")
    params.restore([arr for _, _, arr in records])
