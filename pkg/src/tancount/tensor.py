"""Dense array kernels with hand-written gradients, plus Adam.

Two layers live here.  The ``*_forward`` / ``*_backward`` functions are raw
numpy kernels working on ``ndarray`` values; they are what the streaming
inference path calls.  On top of them sits :class:`Tensor`, a thin wrapper
that records the op that produced it so :func:`backward` can run the chain
rule over a composed graph.  Only the op set needed by the two counting
networks is provided.

Layouts are channels-last: images are ``H x W x C``, 2D kernels are
``k x k x Cin x Cout``, sequences are ``L x C`` and 1D kernels are
``3 x Cin x Cout``.  Convolutions are cross-correlations (no kernel flip).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is requested on a tensor with no forward record."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


# ---------------------------------------------------------------------------
# raw kernels
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape ``(H*W, k*k*C)`` for a zero "same"-padded input."""
    h, w, c = x.shape
    if k == 1:
        return x.reshape(h * w, c)
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # H, W, C, k, k
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    h, w, c = shape
    if k == 1:
        return cols.reshape(h, w, c)
    p = k // 2
    cols = cols.reshape(h, w, k, k, c)
    out = np.zeros((h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[dy : dy + h, dx : dx + w] += cols[:, :, dy, dx]
    return out[p : p + h, p : p + w]


def _check_conv2d(x, w, b):
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be HxWxC, got shape {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] not in (1, 3):
        raise ShapeError(f"conv2d weights must be kxkxCinxCout with k in (1, 3), got {w.shape}")
    if w.shape[2] != x.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[2]} channels, weights expect {w.shape[2]}"
        )
    if b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={w.shape[3]}")


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_conv2d(x, w, b)
    k, cout = w.shape[0], w.shape[3]
    h, wd, _ = x.shape
    out = _im2col(x, k) @ w.reshape(-1, cout)
    out += b
    return out.reshape(h, wd, cout)


def conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d_forward` given upstream ``g``."""
    k, cout = w.shape[0], w.shape[3]
    g2 = g.reshape(-1, cout)
    cols = _im2col(x, k)
    dw = (cols.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dx = _col2im(g2 @ w.reshape(-1, cout).T, x.shape, k)
    return dx, dw, db


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs extents >= 2, got {x.shape}")
    h2, w2 = h // 2, w // 2
    return x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c).max(axis=(1, 3))


def maxpool2_backward(g: np.ndarray, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    # Ties route the gradient to the first maximum in row-major window order.
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3)
    win = win.reshape(h2, w2, c, 4)
    arg = win.argmax(axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, arg[..., None], 1, axis=-1)
    dwin = mask * g[..., None]
    dx = np.zeros_like(x)
    dx[: 2 * h2, : 2 * w2] = (
        dwin.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * h2, 2 * w2, c)
    )
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return g * (x > 0)


def _shifted_stack(x: np.ndarray, d: int) -> np.ndarray:
    """``(L, 3*C)`` matrix holding ``x[l-d], x[l], x[l+d]`` with zero padding."""
    n, c = x.shape
    cols = np.zeros((n, 3, c), dtype=x.dtype)
    cols[:, 1] = x
    if d < n:
        cols[d:, 0] = x[:-d]
        cols[:-d, 2] = x[d:]
    return cols.reshape(n, 3 * c)


def _check_dconv(x, w, b, d):
    if d < 1:
        raise ValueError(f"dilation must be >= 1, got {d}")
    if x.ndim != 2 or x.shape[0] <= 0:
        raise ShapeError(f"dilated_conv1d input must be LxC with L > 0, got {x.shape}")
    if w.ndim != 3 or w.shape[0] != 3 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"dilated_conv1d weights {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[2],):
        raise ShapeError(f"dilated_conv1d bias shape {b.shape} does not match Cout={w.shape[2]}")


def dilated_conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    _check_dconv(x, w, b, d)
    out = _shifted_stack(x, d) @ w.reshape(-1, w.shape[2])
    out += b
    return out


def dilated_conv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, d: int):
    n, c = x.shape
    cols = _shifted_stack(x, d)
    dw = (cols.T @ g).reshape(w.shape)
    db = g.sum(axis=0)
    dcols = (g @ w.reshape(-1, w.shape[2]).T).reshape(n, 3, c)
    dx = dcols[:, 1].copy()
    if d < n:
        dx[:-d] += dcols[d:, 0]
        dx[d:] += dcols[:-d, 2]
    return dx, dw, db


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1x1 convolution over an ``L x Cin`` sequence."""
    if x.ndim != 2 or w.shape != (x.shape[1], b.shape[0]):
        raise ShapeError(f"pointwise shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x @ w
    out += b
    return out


def sum_pool_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = x.shape[:2]
    h2, w2 = h // factor, w // factor
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"sum_pool factor {factor} too large for shape {x.shape}")
    crop = x[: h2 * factor, : w2 * factor]
    tail = x.shape[2:]
    return crop.reshape(h2, factor, w2, factor, *tail).sum(axis=(1, 3))


def sum_pool_backward(g: np.ndarray, shape: tuple[int, ...], factor: int) -> np.ndarray:
    dx = np.zeros(shape, dtype=g.dtype)
    h2, w2 = g.shape[:2]
    up = np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)
    dx[: h2 * factor, : w2 * factor] = up
    return dx


# ---------------------------------------------------------------------------
# graph-recording tensors
# ---------------------------------------------------------------------------

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An ndarray with an optional gradient slot and a forward record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, upstream=None) -> None:
        backward(self, upstream)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    t = Tensor(out)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._grad_fn = grad_fn
    return t


def backward(output: Tensor, upstream=None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable tensor.

    ``upstream`` defaults to ones (so a scalar loss gets gradient 1).
    """
    if output._grad_fn is None:
        if output.requires_grad:
            # a leaf differentiated w.r.t. itself
            g = np.ones_like(output.data) if upstream is None else np.asarray(upstream)
            output.grad = g if output.grad is None else output.grad + g
            return
        raise GraphError("tensor has no forward record; run the forward pass with gradients enabled")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
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

    grads = {id(output): np.ones_like(output.data) if upstream is None else np.asarray(upstream)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if node._grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._grad_fn(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def conv2d(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = conv2d_forward(x.data, w.data, b.data)

    def grad_fn(g):
        return conv2d_backward(g, x.data, w.data)

    return _record(out, (x, w, b), grad_fn)


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    out = maxpool2_forward(x.data)
    return _record(out, (x,), lambda g: (maxpool2_backward(g, x.data, out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record(relu_forward(x.data), (x,), lambda g: (relu_backward(g, x.data),))


def dilated_conv1d(x, w, b, d: int) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = dilated_conv1d_forward(x.data, w.data, b.data, d)
    return _record(out, (x, w, b), lambda g: dilated_conv1d_backward(g, x.data, w.data, d))


def pointwise(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = pointwise_forward(x.data, w.data, b.data)
    return _record(out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def sum_pool(x, factor: int) -> Tensor:
    x = as_tensor(x)
    out = sum_pool_forward(x.data, factor)
    return _record(out, (x,), lambda g: (sum_pool_backward(g, x.shape, factor),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def stack(xs) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs])
    return _record(out, tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))))


def sum_all(x) -> Tensor:
    """Sum of every element, accumulated in 64-bit."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _record(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def check_finite(t, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


# ---------------------------------------------------------------------------
# initialization and optimization
# ---------------------------------------------------------------------------


def gaussian_init(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean i.i.d. normal entries with the given standard deviation."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=shape).astype(dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``param`` in place."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)


@dataclass
class Adam:
    """Adam over a named parameter dict of :class:`Tensor` leaves."""

    params: dict[str, Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states.setdefault(
                name,
                AdamState.like(p.data, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon),
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.states[name], self.lr)
