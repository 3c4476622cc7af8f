"""Small reverse-mode autodiff engine on top of numpy.

Every op builds a node that remembers its parents and a closure that pushes
the output gradient back to them.  ``Tensor.backward`` walks the recorded
graph in reverse topological order, so fan-out accumulates by summation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class OptimizerError(RuntimeError):
    """An optimizer step was refused (e.g. NaN gradient)."""


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """n-d real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take_rows(self, index)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_shape = np.broadcast_shapes(a.shape, b.shape)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(np.broadcast_to(a.data + b.data, out_shape).copy(), (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):  # non-finite results are rejected below
        out = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * out / b.data, b.shape)),
        )

    return _node(out, (a, b), backward, "div")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return ((x, 2.0 * g * x.data),)

    return _node(x.data * x.data, (x,), backward, "square")


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return ((x, g * np.sign(x.data)),)

    return _node(np.abs(x.data), (x,), backward, "abs")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); no gradient flows through clamped entries."""
    keep = x.data > floor

    def backward(g):
        return ((x, g * keep),)

    return _node(np.where(keep, x.data, np.asarray(floor, x.dtype)), (x,), backward, "clamp_min")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    keep = x.data > 0

    def backward(g):
        return ((x, g * keep),)

    return _node(x.data * keep, (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return ((x, g * (1.0 - out * out)),)

    return _node(out, (x,), backward, "tanh")


# -- reductions -------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")

    def backward(g):
        return ((x, np.full(x.shape, g / n, dtype=x.dtype)),)

    return _node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as width 1."""

    def backward(g):
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _node(x.data.sum(axis=-1, keepdims=True), (x,), backward, "sum_rows")


# -- structural -------------------------------------------------------------

def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows (first axis) by integer index array or slice."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return ((x, full),)

    return _node(np.array(out, copy=True), (x,), backward, "take_rows")


def take_columns(x: Tensor, columns) -> Tensor:
    out = x.data[:, columns]

    def backward(g):
        full = np.zeros_like(x.data)
        # repeated columns must accumulate, which fancy-index += does not
        np.add.at(full, (slice(None), columns), g)
        return ((x, full),)

    return _node(np.array(out, copy=True), (x,), backward, "take_columns")


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of two n×c feature matrices."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot concatenate features {a.shape} and {b.shape}")
    split = a.shape[1]

    def backward(g):
        return ((a, g[:, :split]), (b, g[:, split:]))

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat")


def repeat_global(global_feature: Tensor, n: int) -> Tensor:
    """Tile a 1×c row to n×c; gradients sum back over rows."""
    if global_feature.data.ndim != 2 or global_feature.shape[0] != 1:
        raise DimensionError(f"global feature must be 1×c, got {global_feature.shape}")
    if n < 1:
        raise DimensionError("repeat count must be >= 1")

    def backward(g):
        return ((global_feature, g.sum(axis=0, keepdims=True)),)

    return _node(np.repeat(global_feature.data, n, axis=0), (global_feature,), backward, "repeat")


def max_pool_points(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise max over points; returns (1×c tensor, argmax rows).

    ``np.argmax`` picks the first occurrence, so ties resolve to the lowest
    point index.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"max pool needs an n×c input with n >= 1, got {x.shape}")
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out = x.data[idx, cols][None, :]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx, cols] = g[0]
        return ((x, full),)

    return _node(out.copy(), (x,), backward, "max_pool"), idx


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x: n×c_in, weight: c_in×c_out, bias: c_out."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError("linear expects 2-d input/weight and 1-d bias")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )

    def backward(g):
        grads = []
        if x.requires_grad:
            grads.append((x, g @ weight.data.T))
        if weight.requires_grad:
            grads.append((weight, x.data.T @ g))
        if bias.requires_grad:
            grads.append((bias, g.sum(axis=0)))
        return grads

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), backward, "linear")


def normalize_rows(x: Tensor, fallback: Sequence[float] = (0.0, 0.0, -1.0), eps: float = 1e-8):
    """Scale each row to unit length.

    Rows with norm below ``eps`` are replaced by ``fallback`` (no gradient);
    returns the tensor and a boolean mask of the replaced rows.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    bad = norms[:, 0] < eps
    safe = np.where(bad[:, None], 1.0, norms).astype(x.dtype)
    unit = x.data / safe
    unit[bad] = np.asarray(fallback, dtype=x.dtype)

    def backward(g):
        # d(x/|x|) = (g - u (u·g)) / |x|
        proj = (g * unit).sum(axis=1, keepdims=True)
        gx = (g - unit * proj) / safe
        gx[bad] = 0.0
        return ((x, gx),)

    return _node(unit, (x,), backward, "normalize"), bad


def mse(a: Tensor, b) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    if a.data.size == 0:
        raise DimensionError("mse of empty tensors")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        return ((a, 2.0 * g * diff / n), (b, -2.0 * g * diff / n))

    return _node(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), backward, "mse")


# -- parameters & optimizer -------------------------------------------------

def kaiming_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise OptimizerError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if g is None or g.shape != p.shape:
                raise OptimizerError(f"gradient shape mismatch for parameter {p.name or p.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {p.name or p.shape}")

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.astype(p.dtype, copy=False)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            update = (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            # rebind instead of in-place so arrays captured by old graphs stay intact
            p.data = p.data - update


def numerical_gradient(f: Callable[[], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild the graph from ``inputs`` each call and return a
    scalar.  Inputs should be float64.
    """
    for x in inputs:
        x.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad.astype(np.float64)
        numeric = numerical_gradient(lambda: float(f().data), x, h)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
