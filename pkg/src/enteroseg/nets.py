"""The two segmentation networks, built from scratch on the tensor engine.

Both share a width- and depth-reduced densely connected encoder: a 7x7 stem
conv + batch norm + ReLU at full resolution, a 3x3/stride-2 max pool, then
``levels`` dense blocks (each layer: BN -> ReLU -> 3x3 conv of ``growth``
channels, concatenated) joined by transitions (BN -> ReLU -> 1x1 conv at
0.5 compression -> 2x2 average pool). Encoder row i lives at 1/2^i
resolution with channel counts fixed by the config arithmetic below, so the
parameter count is a closed-form function of the config.

The multiclass net decodes through a nested skip grid: node (i, j)
concatenates the 2x-upsampled node (i+1, j-1) with rows (i, 0..j-1) and
applies one 3x3 conv (back to the row's channel count) + BN + ReLU; a 1x1
conv head + channel softmax sits on node (0, levels).

The single-organ net decodes one level at a time: 2x upsample, concatenate
the encoder skip, then one self-organized operational conv (tanh
pre-squash); a final such layer maps to one channel before the sigmoid.

Channel arithmetic (one line per named piece, c = init_channels,
g = growth, b = block_layers, r_i = channels of encoder row i):
    r_0 = c;  r_1 = c + b*g;  r_{i+1} = floor(r_i / 2) + b*g   for i >= 1
Everything downstream is derived from the r_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .selfonn import SelfOnnConv2d, selfonn_init
from .tensor import (BatchNormState, Tensor, activation, batch_norm, concat_channels,
                     conv2d, pool2d, sigmoid, softmax_channels, upsample_bilinear)

__all__ = ["CoarseNetConfig", "BinaryNetConfig", "Network",
           "build_coarse_net", "build_binary_net"]


@dataclass(frozen=True)
class CoarseNetConfig:
    """Multiclass stage: nested-skip decoder over the dense encoder.

    Defaults target the full-resolution setting; desk-scale runs override
    ``input_hw`` down to 64x64 and shrink widths.
    """
    input_hw: tuple[int, int] = (224, 224)
    in_channels: int = 1
    levels: int = 4
    init_channels: int = 24
    growth: int = 12
    block_layers: int = 3
    n_classes: int = 11
    dtype: str = "float32"


@dataclass(frozen=True)
class BinaryNetConfig:
    """Single-organ stage: plain skip decoder with operational convs."""
    input_hw: tuple[int, int] = (96, 96)
    in_channels: int = 1
    levels: int = 3
    init_channels: int = 16
    growth: int = 8
    block_layers: int = 2
    q_order: int = 3
    pre_squash: bool = True
    dtype: str = "float32"


def _np_dtype(name: str):
    if name not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {name!r}")
    return np.dtype(name)


class Conv2dLayer:
    def __init__(self, cin: int, cout: int, k: int, rng, dtype,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        bound = np.sqrt(6.0 / (cin * k * k))
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) \
            if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding)

    def params(self, name: str) -> dict[str, Tensor]:
        out = {f"{name}.weight": self.weight}
        if self.bias is not None:
            out[f"{name}.bias"] = self.bias
        return out


class BatchNorm2dLayer:
    def __init__(self, channels: int, dtype):
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.state, train)

    def params(self, name: str) -> dict[str, Tensor]:
        return {f"{name}.gamma": self.state.gamma, f"{name}.beta": self.state.beta}

    def buffers(self, name: str) -> dict[str, np.ndarray]:
        return {f"{name}.running_mean": self.state.running_mean,
                f"{name}.running_var": self.state.running_var}


class DenseBlock:
    """b layers of BN -> ReLU -> 3x3 conv(growth), concatenated."""

    def __init__(self, cin: int, n_layers: int, growth: int, rng, dtype):
        self.layers = []
        ch = cin
        for _ in range(n_layers):
            bn = BatchNorm2dLayer(ch, dtype)
            conv = Conv2dLayer(ch, growth, 3, rng, dtype, padding=1, bias=False)
            self.layers.append((bn, conv))
            ch += growth
        self.out_channels = ch

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        feats = x
        for bn, conv in self.layers:
            y = conv(activation(bn(feats, train), "relu"))
            feats = concat_channels([feats, y])
        return feats

    def named(self, name: str):
        for j, (bn, conv) in enumerate(self.layers):
            yield f"{name}.layer{j}.bn", bn
            yield f"{name}.layer{j}.conv", conv


class Transition:
    """BN -> ReLU -> 1x1 conv (0.5 compression) -> 2x2 average pool."""

    def __init__(self, cin: int, rng, dtype):
        self.out_channels = cin // 2
        self.bn = BatchNorm2dLayer(cin, dtype)
        self.conv = Conv2dLayer(cin, self.out_channels, 1, rng, dtype, bias=False)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = self.conv(activation(self.bn(x, train), "relu"))
        return pool2d(y, "avg", 2, 2)

    def named(self, name: str):
        yield f"{name}.bn", self.bn
        yield f"{name}.conv", self.conv


def encoder_row_channels(init_channels: int, levels: int, block_layers: int,
                         growth: int) -> list[int]:
    rows = [init_channels]
    ch = init_channels
    for i in range(levels):
        ch = ch + block_layers * growth
        rows.append(ch)
        if i < levels - 1:
            ch = ch // 2
    return rows


class DenseEncoder:
    def __init__(self, cfg, rng, dtype):
        self.stem_conv = Conv2dLayer(cfg.in_channels, cfg.init_channels, 7,
                                     rng, dtype, padding=3, bias=False)
        self.stem_bn = BatchNorm2dLayer(cfg.init_channels, dtype)
        self.blocks = []
        self.transitions = []
        ch = cfg.init_channels
        for i in range(cfg.levels):
            block = DenseBlock(ch, cfg.block_layers, cfg.growth, rng, dtype)
            self.blocks.append(block)
            ch = block.out_channels
            if i < cfg.levels - 1:
                tr = Transition(ch, rng, dtype)
                self.transitions.append(tr)
                ch = tr.out_channels
        self.row_channels = encoder_row_channels(
            cfg.init_channels, cfg.levels, cfg.block_layers, cfg.growth)

    def __call__(self, x: Tensor, train: bool) -> list[Tensor]:
        rows = []
        t = activation(self.stem_bn(self.stem_conv(x), train), "relu")
        rows.append(t)
        t = pool2d(t, "max", 3, 2, padding=1)
        for i, block in enumerate(self.blocks):
            t = block(t, train)
            rows.append(t)
            if i < len(self.transitions):
                t = self.transitions[i](t, train)
        return rows

    def named(self, prefix: str = ""):
        yield f"{prefix}stem.conv", self.stem_conv
        yield f"{prefix}stem.bn", self.stem_bn
        for i, block in enumerate(self.blocks):
            yield from block.named(f"{prefix}enc{i + 1}")
        for i, tr in enumerate(self.transitions):
            yield from tr.named(f"{prefix}tr{i + 1}")


class Network:
    """Named-parameter registry over an ordered layer graph."""

    def __init__(self, config):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._bn_layers: dict[str, BatchNorm2dLayer] = {}

    def _register(self, named_layers) -> None:
        for name, layer in named_layers:
            for pname, p in layer.params(name).items():
                if pname in self._params:
                    raise ValueError(f"duplicate parameter name {pname!r}")
                p.name = pname
                self._params[pname] = p
            if isinstance(layer, BatchNorm2dLayer):
                self._bn_layers[name] = layer
                for bname, b in layer.buffers(name).items():
                    self._buffers[bname] = b

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def buffers(self) -> dict[str, np.ndarray]:
        # running stats are updated in place, so the registered references
        # always reflect the current state
        return dict(self._buffers)

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self._params.items()}
        out.update({name: b.copy() for name, b in self.buffers().items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self._params) | set(self._buffers)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:4]
            surplus = sorted(got - expected)[:4]
            raise ValueError(f"state mismatch: missing {missing}, "
                             f"unexpected {surplus}")
        dtype = self._params[next(iter(self._params))].data.dtype \
            if self._params else np.float32
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        for base, layer in self._bn_layers.items():
            layer.state.running_mean[...] = arrays[f"{base}.running_mean"]
            layer.state.running_var[...] = arrays[f"{base}.running_var"]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None


class CoarseNet(Network):
    def __init__(self, cfg: CoarseNetConfig, seed: int):
        super().__init__(cfg)
        dtype = _np_dtype(cfg.dtype)
        _validate_input(cfg.input_hw, cfg.levels)
        rng = np.random.default_rng(seed)
        self.encoder = DenseEncoder(cfg, rng, dtype)
        rows = self.encoder.row_channels
        self.dec: dict[tuple[int, int], tuple] = {}
        for j in range(1, cfg.levels + 1):
            for i in range(cfg.levels - j + 1):
                cin = rows[i + 1] + j * rows[i]
                conv = Conv2dLayer(cin, rows[i], 3, rng, dtype, padding=1,
                                   bias=False)
                bn = BatchNorm2dLayer(rows[i], dtype)
                self.dec[(i, j)] = (conv, bn)
        self.head = Conv2dLayer(rows[0], cfg.n_classes, 1, rng, dtype, bias=True)
        self._register(self._layout())

    def _layout(self):
        yield from self.encoder.named()
        for (i, j), (conv, bn) in sorted(self.dec.items()):
            yield f"dec{i}_{j}.conv", conv
            yield f"dec{i}_{j}.bn", bn
        yield "head", self.head

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        cfg = self.config
        rows = self.encoder(x, train)
        grid: dict[tuple[int, int], Tensor] = {(i, 0): rows[i]
                                               for i in range(cfg.levels + 1)}
        for j in range(1, cfg.levels + 1):
            for i in range(cfg.levels - j + 1):
                up = upsample_bilinear(grid[(i + 1, j - 1)], 2)
                cat = concat_channels([up] + [grid[(i, m)] for m in range(j)])
                conv, bn = self.dec[(i, j)]
                grid[(i, j)] = activation(bn(conv(cat), train), "relu")
        logits = self.head(grid[(0, cfg.levels)])
        return softmax_channels(logits)


class BinaryNet(Network):
    def __init__(self, cfg: BinaryNetConfig, seed: int):
        super().__init__(cfg)
        dtype = _np_dtype(cfg.dtype)
        _validate_input(cfg.input_hw, cfg.levels)
        rng = np.random.default_rng(seed)
        self.encoder = DenseEncoder(cfg, rng, dtype)
        rows = self.encoder.row_channels
        self.dec = []
        for i in range(cfg.levels - 1, -1, -1):
            cin = rows[i + 1] + rows[i]
            layer = selfonn_init(cin, rows[i], 3, cfg.q_order,
                                 seed=int(rng.integers(2 ** 31)), padding=1,
                                 pre_squash=cfg.pre_squash, dtype=dtype)
            self.dec.append(layer)
        self.head = selfonn_init(rows[0], 1, 3, cfg.q_order,
                                 seed=int(rng.integers(2 ** 31)), padding=1,
                                 pre_squash=cfg.pre_squash, dtype=dtype)
        self._register(self._layout())

    def _layout(self):
        yield from self.encoder.named()

    def _register(self, named_layers) -> None:
        super()._register(named_layers)
        # operational layers carry their own naming scheme (wq1..wqQ, bias)
        for idx, layer in enumerate(self.dec):
            row = self.config.levels - 1 - idx
            for pname, p in layer.params(f"dec{row}").items():
                p.name = pname
                self._params[pname] = p
        for pname, p in self.head.params("head").items():
            p.name = pname
            self._params[pname] = p

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        cfg = self.config
        rows = self.encoder(x, train)
        d = rows[cfg.levels]
        for idx, layer in enumerate(self.dec):
            row = cfg.levels - 1 - idx
            up = upsample_bilinear(d, 2)
            d = layer(concat_channels([up, rows[row]]))
        return sigmoid(self.head(d))


def _validate_input(input_hw: tuple[int, int], levels: int) -> None:
    h, w = input_hw
    div = 2 ** levels
    if h % div or w % div:
        raise ValueError(f"input {h}x{w} must be divisible by 2^{levels}")


def build_coarse_net(cfg: CoarseNetConfig, seed: int) -> CoarseNet:
    return CoarseNet(cfg, seed)


def build_binary_net(cfg: BinaryNetConfig, seed: int) -> BinaryNet:
    return BinaryNet(cfg, seed)
