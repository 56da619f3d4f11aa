"""Dense float64 tensors with reverse-mode differentiation and Adam.

A small tape-free computation graph: every operation returns a new
Tensor holding its forward value plus a closure that routes the output
gradient back into the operands. Graphs are rebuilt on every forward
pass and discarded after ``backward``. Everything is 64-bit and
single-threaded, which keeps runs bit-reproducible and lets tests pin
tight tolerances.
"""

from __future__ import annotations

import warnings

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class UnsupportedKernelError(ValueError):
    """Convolution kernel size outside the supported family (odd k)."""


class ContractViolationError(RuntimeError):
    """An operation was called outside its documented contract."""


class Tensor:
    """N-d array of float64 values plus an optional gradient accumulator.

    Leaves are created directly (``Tensor(values, requires_grad=...)``);
    non-leaves come out of the ops below and remember how to push a
    gradient back to their parents. ``grad`` is allocated lazily on the
    first accumulation and persists until explicitly cleared, so
    repeated ``backward`` calls accumulate.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backprop", "_track")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float64)
        if not v.flags.c_contiguous:
            v = v.copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backprop = None
        # whether a gradient must flow through this node
        self._track = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolationError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; dispatch to the module-level ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: tuple, backprop) -> Tensor:
    """Build a graph node; drops the tape when no parent needs gradients."""
    out = Tensor(values)
    if any(p._track for p in parents):
        out._parents = parents
        out._backprop = backprop
        out._track = True
    return out


def _acc(t: Tensor, g: np.ndarray):
    """Accumulate an upstream gradient into ``t`` if it participates."""
    if not t._track:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def backprop(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.values + b.values, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backprop(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.values - b.values, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backprop(g):
        _acc(a, g * b.values)
        _acc(b, g * a.values)

    return _node(a.values * b.values, (a, b), backprop)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "div")

    def backprop(g):
        _acc(a, g / b.values)
        _acc(b, -g * a.values / (b.values * b.values))

    return _node(a.values / b.values, (a, b), backprop)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backprop(g):
        _acc(a, -g)

    return _node(-a.values, (a,), backprop)


def add_scalar(a, s: float) -> Tensor:
    a = _as_tensor(a)

    def backprop(g):
        _acc(a, g)

    return _node(a.values + s, (a,), backprop)


def mul_scalar(a, s: float) -> Tensor:
    a = _as_tensor(a)

    def backprop(g):
        _acc(a, g * s)

    return _node(a.values * s, (a,), backprop)


def abs_map(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    sign = np.sign(a.values)

    def backprop(g):
        _acc(a, g * sign)

    return _node(np.abs(a.values), (a,), backprop)


def tanh_map(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.values)

    def backprop(g):
        _acc(a, g * (1.0 - t * t))

    return _node(t, (a,), backprop)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "maximum")
    take_a = a.values >= b.values

    def backprop(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    return _node(np.where(take_a, a.values, b.values), (a, b), backprop)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backprop(g):
        _acc(a, g.reshape(a.shape))

    return _node(a.values.reshape(shape), (a,), backprop)


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise DimensionError(f"transpose2d: expected 2-d tensor, got shape {a.shape}")

    def backprop(g):
        _acc(a, g.T)

    return _node(a.values.T.copy(), (a,), backprop)


def concat_channels(parts) -> Tensor:
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[lo:hi])

    return _node(np.concatenate([p.values for p in parts], axis=0), tuple(parts), backprop)


def add_channel(x, v) -> Tensor:
    """Add a per-channel offset v (C,) to a feature map x (C, H, W)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.values.ndim != 3 or v.values.ndim != 1 or x.shape[0] != v.shape[0]:
        raise DimensionError(f"add_channel: shapes {x.shape} and {v.shape} incompatible")

    def backprop(g):
        _acc(x, g)
        _acc(v, g.sum(axis=(1, 2)))

    return _node(x.values + v.values[:, None, None], (x, v), backprop)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)

    def backprop(g):
        _acc(a, np.full(a.shape, float(g)))

    return _node(np.asarray(a.values.sum()), (a,), backprop)


def tensor_mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size

    def backprop(g):
        _acc(a, np.full(a.shape, float(g) / n))

    return _node(np.asarray(a.values.mean()), (a,), backprop)


def spatial_mean(x) -> Tensor:
    """Global average pool: (C, H, W) -> (C,)."""
    x = _as_tensor(x)
    if x.values.ndim != 3:
        raise DimensionError(f"spatial_mean: expected (C, H, W), got shape {x.shape}")
    n = x.shape[1] * x.shape[2]

    def backprop(g):
        _acc(x, np.broadcast_to(g[:, None, None] / n, x.shape).copy())

    return _node(x.values.mean(axis=(1, 2)), (x,), backprop)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def backprop(g):
        _acc(a, g @ b.values.T)
        _acc(b, a.values.T @ g)

    return _node(a.values @ b.values, (a, b), backprop)


def softmax(v) -> Tensor:
    """Stable softmax of a 1-d tensor (max-subtraction before exp)."""
    v = _as_tensor(v)
    if v.values.ndim != 1:
        raise DimensionError(f"softmax: expected 1-d tensor, got shape {v.shape}")
    e = np.exp(v.values - v.values.max())
    y = e / e.sum()

    def backprop(g):
        _acc(v, y * (g - np.dot(g, y)))

    return _node(y, (v,), backprop)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """Stack every k x k patch of the padded input as a column."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, out_h, out_w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + out_h, j : j + out_w]
    return cols.reshape(c * k * k, out_h * out_w)


def _col2im(dcols: np.ndarray, c: int, hp: int, wp: int, k: int, out_h: int, out_w: int) -> np.ndarray:
    dxp = np.zeros((c, hp, wp), dtype=np.float64)
    d = dcols.reshape(c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + out_h, j : j + out_w] += d[:, i, j]
    return dxp


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias, padding: int) -> np.ndarray:
    """Plain numpy cross-correlation used by conv2d and frozen extractors."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = h + 2 * padding - k + 1
    out_w = w + 2 * padding - k + 1
    cols = _im2col(xp, k, out_h, out_w)
    out = kernel.reshape(c_out, c_in * k * k) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(c_out, out_h, out_w)


def conv2d(x, kernel, bias=None, padding=None) -> Tensor:
    """Same-size 2-d cross-correlation with zero padding.

    x: (C_in, H, W), kernel: (C_out, C_in, k, k) with k odd, bias:
    (C_out,) or None. padding defaults to (k - 1) / 2 so the spatial
    size is preserved. Gradients flow to x, kernel and bias.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    bias = _as_tensor(bias) if bias is not None else None
    if x.values.ndim != 3 or kernel.values.ndim != 4:
        raise DimensionError(
            f"conv2d: expected (C,H,W) input and (O,C,k,k) kernel, got {x.shape} and {kernel.shape}"
        )
    c_out, kc_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise UnsupportedKernelError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    c_in, h, w = x.shape
    if kc_in != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernel expects {kc_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    if padding is None:
        padding = (k - 1) // 2
    out_h = h + 2 * padding - k + 1
    out_w = w + 2 * padding - k + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d: {k}x{k} kernel does not fit input of shape {x.shape}")

    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, out_h, out_w)
    kmat = kernel.values.reshape(c_out, c_in * k * k)
    out = kmat @ cols
    if bias is not None:
        out = out + bias.values[:, None]

    def backprop(g):
        gmat = g.reshape(c_out, out_h * out_w)
        if kernel._track:
            _acc(kernel, (gmat @ cols.T).reshape(kernel.shape))
        if bias is not None and bias._track:
            _acc(bias, gmat.sum(axis=1))
        if x._track:
            dcols = kmat.T @ gmat
            dxp = _col2im(dcols, c_in, h + 2 * padding, w + 2 * padding, k, out_h, out_w)
            _acc(x, dxp[:, padding : padding + h, padding : padding + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out.reshape(c_out, out_h, out_w), parents, backprop)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Populate grads of everything reachable from a scalar loss.

    Gradients accumulate into existing ``grad`` buffers; call
    ``zero_grad`` (or ParamStore.zero_grad) between optimization steps.
    """
    if loss.values.size != 1:
        raise ContractViolationError(f"backward expects a scalar loss, got shape {loss.shape}")

    # iterative post-order topological sort (graphs can be deep)
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
        for p in node._parents:
            if id(p) not in visited and p._track:
                stack.append((p, False))

    # leaves accumulate across calls, intermediate buffers are per-pass
    for node in topo:
        if node._backprop is not None:
            node.grad = None
    _acc(loss, np.ones_like(loss.values))
    if not loss._track:
        return
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# ---------------------------------------------------------------------------
# parameters and Adam


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment state.

    Names are unique path-like strings; the step counter is shared by
    all parameters. Moment arrays are created alongside each parameter
    so their shapes always match.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(values, requires_grad=requires_grad)
        self.params[name] = t
        self.moment1[name] = np.zeros_like(t.values)
        self.moment2[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        """JSON-able snapshot; float64 values survive the round trip bit-exactly."""
        return {
            "step": self.step_count,
            "params": {
                name: {
                    "shape": list(p.shape),
                    "requires_grad": p.requires_grad,
                    "values": p.values.ravel().tolist(),
                }
                for name, p in self.params.items()
            },
            "moment1": {name: m.ravel().tolist() for name, m in self.moment1.items()},
            "moment2": {name: m.ravel().tolist() for name, m in self.moment2.items()},
        }

    def load_state_dict(self, state: dict):
        self.params.clear()
        self.moment1.clear()
        self.moment2.clear()
        self.step_count = int(state["step"])
        for name, rec in state["params"].items():
            shape = tuple(rec["shape"])
            vals = np.asarray(rec["values"], dtype=np.float64).reshape(shape)
            self.add(name, vals, requires_grad=bool(rec.get("requires_grad", True)))
            self.moment1[name] = np.asarray(state["moment1"][name], dtype=np.float64).reshape(shape)
            self.moment2[name] = np.asarray(state["moment2"][name], dtype=np.float64).reshape(shape)


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter with a gradient.

    Parameters without a gradient are skipped with a warning (frozen).
    """
    t = store.step_count + 1
    for name, p in store.params.items():
        if p.grad is None:
            warnings.warn(f"parameter '{name}' has no gradient; skipping update (frozen)")
            continue
        g = p.grad
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.step_count = t
