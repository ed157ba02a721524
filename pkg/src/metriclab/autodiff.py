"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations execute eagerly and record an acyclic tape; ``backward`` walks
the tape in reverse topological order and accumulates gradients into every
tensor that requires them. The op set is intentionally small: exactly what
the embedding network and the loss heads need. Broadcasting is limited to
bias addition (matrix + row vector).

All computation is 64-bit. Evaluation is deterministic: the same graph on
the same inputs produces bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Guard for sqrt inside distance computations; keeps the derivative finite
# at zero distance. sqrt(SQRT_FLOOR) = 1e-6 is the "zero" of guarded norms.
SQRT_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class GraphError(ValueError):
    """Graph construction, binding, or differentiation misuse."""


class Tensor:
    """A dense float64 array plus tape bookkeeping for reverse mode.

    ``requires_grad`` is inherited from parents, so any value computed from
    a trainable tensor participates in backward. ``grad`` buffers are
    allocated lazily and accumulate across backward calls until
    ``zero_grad`` resets them.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op="input",
                 _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars mean python numbers, not 0-d tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division only supports a python-number divisor")
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(pow_const(self, -1.0), float(other))

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    if a.shape == b.shape:
        out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

        def _bw():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)

        out._backward = _bw
        return out
    # bias-add: matrix rows + vector
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data[None, :], _parents=(a, b), _op="bias_add")

        def _bw():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad.sum(axis=0))

        out._backward = _bw
        return out
    raise ShapeError(f"add: operand shapes {a.shape} and {b.shape} differ "
                     "(only bias-add broadcasting is supported)")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c, _parents=(a,), _op="add_scalar")

    def _bw():
        _accumulate(a, out.grad)

    out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def _bw():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,), _op="neg")

    def _bw():
        _accumulate(a, -out.grad)

    out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.data * c, _parents=(a,), _op="scale")

        def _bw_s():
            _accumulate(a, out.grad * c)

        out._backward = _bw_s
        return out
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def _bw():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out._backward = _bw
    return out


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data ** exponent, _parents=(a,), _op="pow")

    def _bw():
        _accumulate(a, out.grad * exponent * a.data ** (exponent - 1.0))

    out._backward = _bw
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, _parents=(a,), _op="square")

    def _bw():
        _accumulate(a, out.grad * 2.0 * a.data)

    out._backward = _bw
    return out


def sqrt(a: Tensor, floor: float = SQRT_FLOOR) -> Tensor:
    """Guarded square root: sqrt(max(x, floor)).

    The derivative is zero wherever the floor is active, so gradients stay
    finite at zero distance.
    """
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.sqrt(clipped), _parents=(a,), _op="sqrt")
    out._backward = _make_sqrt_backward(a, out, floor)
    return out


def _make_sqrt_backward(a: Tensor, out: Tensor, floor: float):
    def _bw():
        mask = a.data > floor
        _accumulate(a, out.grad * np.where(mask, 0.5 / out.data, 0.0))

    return _bw


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,), _op="relu")

    def _bw():
        # subgradient at 0 is defined as 0
        _accumulate(a, out.grad * (a.data > 0.0))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), _parents=(a,), _op="sum")

    def _bw():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out._backward = _bw
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def log_sum_exp(a: Tensor, axis: int | None = None) -> Tensor:
    """log(sum(exp(x))) with max-shift for stability."""
    if a.size == 0:
        raise ShapeError("log_sum_exp: empty tensor")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (m + np.log(total)).reshape(
        a.data.sum(axis=axis).shape if axis is not None else ())
    out = Tensor(value, _parents=(a,), _op="log_sum_exp")

    def _bw():
        softmax = shifted / total
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * softmax)

    out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")

    def _bw():
        _accumulate(a, out.grad.reshape(a.shape))

    out._backward = _bw
    return out


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a matrix; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected a matrix, got shape {a.shape}")
    out = Tensor(a.data[idx], _parents=(a,), _op="take_rows")

    def _bw():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, out.grad)

    out._backward = _bw
    return out


def take_per_row(a: Tensor, columns) -> Tensor:
    """out[i] = a[i, columns[i]] for a matrix a."""
    cols = np.asarray(columns, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row: expected a matrix, got shape {a.shape}")
    if cols.shape != (a.shape[0],):
        raise ShapeError("take_per_row: need one column index per row")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise IndexError("take_per_row: column index out of range")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, cols], _parents=(a,), _op="take_per_row")

    def _bw():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, cols), out.grad)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra and image ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def _bw():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out._backward = _bw
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Valid 2-D convolution, stride 1.

    x: (N, C, H, W), weight: (O, C, KH, KW), bias: (O,).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N, C, H, W), got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (O, C, KH, KW), got {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} filters")
    oh, ow = h - kh + 1, w - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than input ({h}x{w})")

    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x.data[:, :, i:i + oh, j:j + ow]
    colmat = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    value = np.matmul(wmat, colmat) + bias.data[:, None]
    out = Tensor(value.reshape(n, o, oh, ow), _parents=(x, weight, bias), _op="conv2d")

    def _bw():
        gmat = out.grad.reshape(n, o, oh * ow)
        _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        _accumulate(weight, np.einsum("nop,nkp->ok", gmat, colmat).reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, oh, ow)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
            _accumulate(x, gx)

    out._backward = _bw
    return out


def mean_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/cols that do not fill a
    window are cropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"mean_pool2d: input must be (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    if oh < 1 or ow < 1:
        raise ShapeError(f"mean_pool2d: window {window} larger than input ({h}x{w})")
    cropped = x.data[:, :, :oh * window, :ow * window]
    value = cropped.reshape(n, c, oh, window, ow, window).mean(axis=(3, 5))
    out = Tensor(value, _parents=(x,), _op="mean_pool2d")

    def _bw():
        if x.requires_grad:
            g = np.repeat(np.repeat(out.grad, window, axis=2), window, axis=3)
            g = g / (window * window)
            gx = np.zeros_like(x.data)
            gx[:, :, :oh * window, :ow * window] = g
            _accumulate(x, gx)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# graph evaluation and differentiation


@dataclass(frozen=True)
class Graph:
    """A named-input computation.

    ``build`` receives one keyword Tensor per declared input name and
    returns either a single Tensor or a dict of named Tensors. Each
    evaluation records a fresh tape, so a Graph may be evaluated repeatedly
    (and concurrently on distinct bindings).
    """

    inputs: tuple[str, ...]
    build: Callable[..., "Tensor | dict[str, Tensor]"]

    def __init__(self, inputs, build):
        object.__setattr__(self, "inputs", tuple(inputs))
        object.__setattr__(self, "build", build)


def evaluate(graph: Graph, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    """Run the graph on bound inputs; intermediate activations stay alive on
    the tape for a later backward pass."""
    missing = [name for name in graph.inputs if name not in inputs]
    if missing:
        raise GraphError(f"unbound input(s): {', '.join(missing)}")
    unknown = [name for name in inputs if name not in graph.inputs]
    if unknown:
        raise GraphError(f"unknown input(s): {', '.join(unknown)}")
    result = graph.build(**{name: inputs[name] for name in graph.inputs})
    if isinstance(result, Tensor):
        return {"out": result}
    if isinstance(result, dict) and all(isinstance(v, Tensor) for v in result.values()):
        return dict(result)
    raise GraphError("graph build must return a Tensor or a dict of Tensors")


def _topo_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Reverse accumulation from a scalar output.

    Every requires_grad tensor on the tape receives a grad buffer; tensors
    with no influence on the output end up with zeros.
    """
    if output.data.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    order = _topo_order(output)
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)
    if output.requires_grad:
        output.grad = output.grad + np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward()


def kink_distance(output: Tensor) -> float:
    """Smallest distance from any relu / guarded-sqrt input to its kink,
    over the whole tape. Finite-difference checks use this to stay away
    from non-differentiable points."""
    best = np.inf
    for node in _topo_order(output):
        if node.op == "relu":
            best = min(best, float(np.abs(node._parents[0].data).min(initial=np.inf)))
        elif node.op == "sqrt":
            gap = np.abs(node._parents[0].data - SQRT_FLOOR)
            best = min(best, float(gap.min(initial=np.inf)))
    return best


@dataclass
class FdEntry:
    name: str
    max_rel_err: float
    passed: bool
    nonfinite: bool = False


@dataclass
class FdReport:
    entries: list[FdEntry] = field(default_factory=list)
    passed: bool = True

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def _single_scalar_output(outputs: dict[str, Tensor]) -> Tensor:
    if len(outputs) != 1:
        raise GraphError("finite_difference_check needs a single-output graph")
    out = next(iter(outputs.values()))
    if out.data.size != 1:
        raise GraphError("finite_difference_check needs a scalar output")
    return out


def finite_difference_check(graph: Graph, inputs: dict[str, Tensor],
                            step: float = 1e-5,
                            tolerance: float = 1e-4) -> FdReport:
    """Compare backward() gradients against central finite differences.

    Each requires_grad input is perturbed elementwise by +/- step. Relative
    error uses max(|analytic|, |numeric|, 1e-6) as the denominator. NaN in
    any function evaluation is flagged and fails the entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = _single_scalar_output(evaluate(graph, inputs))
    backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in inputs.items() if t.requires_grad
    }

    report = FdReport()
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        nonfinite = False
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _single_scalar_output(evaluate(graph, inputs)).item()
            flat[i] = orig - step
            f_minus = _single_scalar_output(evaluate(graph, inputs)).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite = True
                num_flat[i] = np.nan
            else:
                num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name]
        if nonfinite:
            entry = FdEntry(name=name, max_rel_err=np.inf, passed=False, nonfinite=True)
        else:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
            rel = np.abs(a - numeric) / denom
            worst = float(rel.max()) if rel.size else 0.0
            entry = FdEntry(name=name, max_rel_err=worst, passed=worst < tolerance)
        report.entries.append(entry)
        report.passed = report.passed and entry.passed
    return report
