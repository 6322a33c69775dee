"""Self-organized operational convolution.

Each kernel element applies a learned polynomial of the (optionally
tanh-squashed) input instead of a plain product: with Q weight banks
w_1..w_Q the layer computes

    out = bias + sum_{q=1..Q} conv2d(w_q, s(x)^q),     s = tanh or identity.

Q = 1 without the squash reduces exactly to a standard convolution.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, conv2d, elementwise_pow, gradcheck, tanh

__all__ = ["SelfOnnConv2d", "selfonn_forward", "selfonn_init", "selfonn_gradcheck",
           "NonFiniteForward"]


class NonFiniteForward(FloatingPointError):
    """Forward pass produced a non-finite value (reported apart from grad error)."""


class SelfOnnConv2d:
    """Convolution whose kernel elements are degree-Q polynomial operators.

    Parameters are Q weight banks of shape [Cout, Cin, k, k] plus one bias
    of shape [Cout]; checkpoint naming is ``<name>.wq1`` .. ``<name>.wqQ``
    and ``<name>.bias``.
    """

    def __init__(self, weights: list[Tensor], bias: Tensor, stride: int = 1,
                 padding: int = 0, pre_squash: bool = True):
        if not weights:
            raise ValueError("need at least one weight bank (q_order >= 1)")
        shape = weights[0].data.shape
        for w in weights:
            if w.data.shape != shape:
                raise ValueError("all weight banks must share one shape")
        if bias.data.shape != (shape[0],):
            raise ValueError(f"bias shape {bias.data.shape} != ({shape[0]},)")
        self.weights = weights
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.pre_squash = pre_squash

    @property
    def q_order(self) -> int:
        return len(self.weights)

    def __call__(self, x: Tensor) -> Tensor:
        return selfonn_forward(x, self)

    def params(self, name: str) -> dict[str, Tensor]:
        named = {f"{name}.wq{q + 1}": w for q, w in enumerate(self.weights)}
        named[f"{name}.bias"] = self.bias
        return named


def selfonn_forward(x: Tensor, layer: SelfOnnConv2d) -> Tensor:
    s = tanh(x) if layer.pre_squash else x
    out = conv2d(s, layer.weights[0], layer.bias,
                 stride=layer.stride, padding=layer.padding)
    for q in range(2, layer.q_order + 1):
        out = out + conv2d(elementwise_pow(s, q), layer.weights[q - 1], None,
                           stride=layer.stride, padding=layer.padding)
    return out


def selfonn_init(cin: int, cout: int, k: int, q_order: int, seed: int,
                 stride: int = 1, padding: int = 0, pre_squash: bool = True,
                 dtype=np.float32) -> SelfOnnConv2d:
    """Seeded fan-balanced uniform init.

    All Q banks draw from U(-b, b) with b = sqrt(6 / (Cin*k*k*Q + Cout*k*k));
    bias starts at zero.
    """
    if q_order < 1:
        raise ValueError(f"q_order must be >= 1, got {q_order}")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (cin * k * k * q_order + cout * k * k))
    weights = [
        Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype),
               requires_grad=True)
        for _ in range(q_order)
    ]
    bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return SelfOnnConv2d(weights, bias, stride=stride, padding=padding,
                         pre_squash=pre_squash)


def selfonn_gradcheck(layer: SelfOnnConv2d, x: Tensor, h: float = 1e-4) -> float:
    """Finite-difference check of a sum-loss through the layer.

    Returns the max relative error over the input and every parameter.
    Requires a float64 layer and input; a non-finite forward raises
    NonFiniteForward instead of being reported as a gradient mismatch.
    """
    wrt = [x] + list(layer.weights) + [layer.bias]

    def fn():
        out = selfonn_forward(x, layer)
        if not np.isfinite(out.data).all():
            raise NonFiniteForward("non-finite value in selfonn forward")
        return out.sum()

    return gradcheck(fn, wrt, h=h)
