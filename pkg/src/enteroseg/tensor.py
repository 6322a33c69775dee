"""Dense float tensors with reverse-mode differentiation on numpy buffers.

The engine supports exactly the primitives the two segmentation networks and
their losses are built from: 2-d convolution, elementwise integer powers,
pointwise activations, channel softmax, pooling, bilinear upsampling, batch
normalization, channel concatenation, and scalar arithmetic. The graph is
rebuilt on every forward pass; ``backward`` walks it once in reverse
topological order and accumulates gradients into every tensor that asked for
them.

Gradients of intermediate nodes live only for the duration of a ``backward``
call; ``.grad`` buffers of ``requires_grad`` tensors accumulate across calls
until ``zero_grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "BatchNormState",
    "no_grad",
    "backward",
    "conv2d",
    "elementwise_pow",
    "activation",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_channels",
    "pool2d",
    "upsample_bilinear",
    "batch_norm",
    "concat_channels",
    "log",
    "gradcheck",
    "zero_grads",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A numpy buffer plus the bookkeeping reverse mode needs.

    ``_parents`` and ``_bwd`` are populated by the op that produced the
    tensor; leaves have neither. ``grad`` is lazily allocated.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def _in_graph(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- arithmetic (scalar / same-shape / constant-array operands) --------

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _mul_scalar(self, -1.0)

    def __sub__(self, other):
        return _add(self, _negate(other))

    def __rsub__(self, other):
        return _add(_negate(self), other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _div(self, other)
        return _mul_scalar(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return _div(_wrap_const(other, self.dtype), self)

    def __pow__(self, q):
        return elementwise_pow(self, q)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return _mul_scalar(sum_all(self), 1.0 / self.data.size)


def _wrap_const(value, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _negate(x):
    if isinstance(x, Tensor):
        return _mul_scalar(x, -1.0)
    return -x


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p._in_graph() for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _add(a: Tensor, b):
    if not isinstance(b, Tensor):
        b_arr = np.asarray(b, dtype=a.dtype)
        data = a.data + b_arr
        return _make(data, (a,), lambda g: (_unbroadcast(g, a.data.shape),))
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def _mul_scalar(a: Tensor, s: float):
    data = a.data * s
    return _make(data, (a,), lambda g: (g * s,))


def _mul(a: Tensor, b):
    if not isinstance(b, Tensor):
        b_arr = np.asarray(b)
        if b_arr.ndim == 0:
            return _mul_scalar(a, float(b_arr))
        b_arr = b_arr.astype(a.dtype, copy=False)
        data = a.data * b_arr
        return _make(data, (a,), lambda g: (_unbroadcast(g * b_arr, a.data.shape),))
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def _div(a: Tensor, b: Tensor):
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return _make(data, (a, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False),)

    return _make(data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return _make(data, (x,), lambda g: (g / x.data,))


def elementwise_pow(x: Tensor, q: int) -> Tensor:
    """x ** q for integer q >= 1, with d/dx = q * x**(q-1)."""
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise ValueError(f"power must be an integer >= 1, got {q!r}")
    q = int(q)
    data = x.data ** q
    if q == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))

    def bwd(g):
        return (g * q * x.data ** (q - 1),)

    return _make(data, (x,), bwd)


# -- activations -----------------------------------------------------------

def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        data = np.maximum(x.data, 0)
        mask = x.data > 0
        return _make(data, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        data = 1.0 / (1.0 + np.exp(-x.data))
        return _make(data, (x,), lambda g: (g * data * (1.0 - data),))
    if kind == "tanh":
        data = np.tanh(x.data)
        return _make(data, (x,), lambda g: (g * (1.0 - data * data),))
    raise ValueError(f"unknown activation kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an [N, C, H, W] tensor, max-subtracted."""
    if x.data.ndim != 4 or x.data.shape[1] < 2:
        raise ValueError(f"softmax_channels wants [N,C>=2,H,W], got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), bwd)


# -- convolution -----------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int):
    """Strided [N,C,Hp,Wp,k,k] view of x (already padded)."""
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] (no kernel flip).

    Zero padding, square kernel and uniform stride. ``bias`` may be None.
    """
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if cin != cin_w:
        raise ValueError(
            f"channel mismatch: input has Cin={cin} {x.data.shape}, "
            f"weight expects Cin={cin_w} {weight.data.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(
            f"kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = _windows(xp, k, stride)  # [n, cin, hp, wp, k, k]
    hp, wp = win.shape[2], win.shape[3]
    # [n, cin*k*k, hp*wp] with (cin, ki, kj) ordering to match weight layout
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * k * k, hp * wp)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols).reshape(n, cout, hp, wp)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gflat = g.reshape(n, cout, hp * wp)
        gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(weight.data.shape)
        gcols = np.matmul(wmat.T, gflat)  # [n, cin*k*k, hp*wp]
        gwin = gcols.reshape(n, cin, k, k, hp, wp)
        gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + stride * hp:stride,
                    kj:kj + stride * wp:stride] += gwin[:, :, ki, kj]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bwd)


# -- pooling ---------------------------------------------------------------

def pool2d(x: Tensor, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling with square window.

    Max pooling pads with -inf (padding cells never win) and routes the
    gradient to the first maximum in row-major window scan order on ties.
    Average pooling does not accept padding.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if kind == "avg" and padding:
        raise ValueError("average pooling does not support padding")
    n, c, h, w = x.data.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"window {k} exceeds padded input {h}x{w} (pad {padding})")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _windows(xp, k, stride)
    hp, wp = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, hp, wp, k * k)

    if kind == "avg":
        out = flat.mean(axis=-1)

        def bwd_avg(g):
            gx = np.zeros_like(x.data, dtype=g.dtype)
            gs = g / (k * k)
            for ki in range(k):
                for kj in range(k):
                    gx[:, :, ki:ki + stride * hp:stride,
                       kj:kj + stride * wp:stride] += gs
            return (gx,)

        return _make(out, (x,), bwd_avg)

    am = flat.argmax(axis=-1)  # first max in scan order
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def bwd_max(g):
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        hp_idx, wp_idx = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
        rows = hp_idx[None, None] * stride + am // k
        colx = wp_idx[None, None] * stride + am % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn, cc, rows, colx), g)
        if padding:
            return (gxp[:, :, padding:padding + h, padding:padding + w],)
        return (gxp,)

    return _make(out, (x,), bwd_max)


# -- bilinear upsampling ---------------------------------------------------

def _upsample_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Row-stochastic [dst, src] interpolation matrix, half-pixel centers."""
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for a in range(dst):
        s = (a + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, src - 1)
        t = s - i0
        m[a, i0] += 1.0 - t
        m[a, i1] += t
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling with half-pixel source centers."""
    if not isinstance(factor, (int, np.integer)) or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor!r}")
    n, c, h, w = x.data.shape
    mh = _upsample_matrix(h, h * factor, x.data.dtype)
    mw = _upsample_matrix(w, w * factor, x.data.dtype)
    t1 = np.tensordot(x.data, mh, axes=([2], [1]))   # [n,c,w,H']
    out = np.tensordot(t1, mw, axes=([2], [1]))      # [n,c,H',W']

    def bwd(g):
        u1 = np.tensordot(g, mh, axes=([2], [0]))    # [n,c,W',h]
        gx = np.tensordot(u1, mw, axes=([2], [0]))   # [n,c,h,w]
        return (gx,)

    return _make(out, (x,), bwd)


# -- batch normalization ----------------------------------------------------

class BatchNormState:
    """Learnable per-channel scale/shift plus running statistics.

    ``gamma``/``beta`` are graph tensors; running buffers are plain arrays
    updated in place by train-mode forwards (biased batch variance).
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    n, c, h, w = x.data.shape
    if c != state.gamma.data.shape[0]:
        raise ValueError(f"batch_norm state has {state.gamma.data.shape[0]} channels, "
                         f"input has {c}")
    gamma, beta = state.gamma, state.beta
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("train-mode batch_norm needs >= 2 elements per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gview * xhat + bview
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var

        def bwd_train(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gview
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv.reshape(1, c, 1, 1) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            return (dx, dgamma, dbeta)

        return _make(out, (x, gamma, beta), bwd_train)

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gview * xhat + bview

    def bwd_eval(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = g * gview * inv.reshape(1, c, 1, 1)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bwd_eval)


# -- concatenation ----------------------------------------------------------

def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("nothing to concatenate")
    data = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(data, tensors, bwd)


# -- backward engine ---------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates d(loss)/d(t) into ``t.grad`` for every reachable tensor with
    ``requires_grad``; repeated calls keep accumulating until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise ValueError("backward on a detached tensor (no recorded operations)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent._in_graph():
                continue
            acc = grads.get(id(parent))
            # out of place: bwd closures may hand back aliased or read-only
            # arrays (broadcast views, the incoming g itself)
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- finite-difference checking ----------------------------------------------

def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor],
              h: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``fn`` rebuilds the graph from the tensors in ``wrt`` each call and
    returns a scalar. All tensors must be float64; relative error per tensor
    is max|a - n| / (max|a|_inf, |n|_inf, tiny).
    """
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite forward value in gradcheck")
    backward(loss)
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in wrt]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        num = np.zeros_like(t.data)
        flat = t.data.ravel()
        nflat = num.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            dn = float(fn().data)
            flat[i] = orig
            nflat[i] = (up - dn) / (2.0 * h)
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        err = float(np.abs(a - num).max(initial=0.0) / denom)
        worst = max(worst, err)
        t.grad = None
    return worst
