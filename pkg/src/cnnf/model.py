"""Network assembly: the eight-learnable-layer architecture, the shrunken
test-scale variant, fine-tuning surgery (head replacement, batchnorm
insertion, layer freezing), and whole-network forward/backward.

The canonical build is sequential:

    conv1 relu1 lrn1 pool1  conv2 relu2 lrn2 pool2
    conv3 relu3  conv4 relu4  conv5 relu5 pool5
    fc6 relu6 dropout6  fc7 relu7 dropout7  fc8

fc8 emits raw logits; softmax lives at the loss boundary (see
layers.softmax_xent).  Fine-tuning inserts bn1/bn2 immediately after
lrn1/lrn2.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Optional

import numpy as np

from . import layers as L
from .errors import (
    InvalidArgumentError,
    ShapeError,
    StateError,
    StructureError,
    UnknownLayerError,
)
from .tensor import derive_seed, gaussian_array

PARAM_FIELDS = {
    "conv": ("weights", "bias"),
    "fc": ("weights", "bias"),
    "bn": ("gamma", "beta"),
}

# statistics buffers serialized alongside parameters but never updated by
# the optimizer
STAT_FIELDS = {"bn": ("running_mean", "running_var")}

FINETUNE_FROZEN = ("conv1", "conv2", "conv3", "conv4", "conv5")

INIT_VARIANCE = 0.01  # zero-mean gaussian init, variance 1e-2


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv | relu | lrn | pool | bn | fc | dropout
    params: Any = None
    trainable: bool = False


class Network:
    """Ordered layer stack with square input of `input_hw` pixels."""

    def __init__(self, layer_list: list, input_hw: int, in_channels: int,
                 num_classes: int, dtype=np.float32):
        names = [spec.name for spec in layer_list]
        if len(set(names)) != len(names):
            raise StructureError("layer names must be unique")
        self.layers = list(layer_list)
        self.input_hw = int(input_hw)
        self.in_channels = int(in_channels)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self._caches = None
        self._fwd_start = 0

    # -- structure ---------------------------------------------------------

    def index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise UnknownLayerError(f"no layer named {name!r}")

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def has_layer(self, name: str) -> bool:
        return any(spec.name == name for spec in self.layers)

    def param_items(self) -> Iterator[tuple]:
        """Yields (layer_name, field, array) over all learnable parameters."""
        for spec in self.layers:
            for field in PARAM_FIELDS.get(spec.kind, ()):
                yield spec.name, field, getattr(spec.params, field)

    def trainable_param_items(self) -> Iterator[tuple]:
        for spec in self.layers:
            if not spec.trainable:
                continue
            for field in PARAM_FIELDS.get(spec.kind, ()):
                yield spec.name, field, getattr(spec.params, field)

    def set_param(self, name: str, field: str, value: np.ndarray) -> None:
        setattr(self.layer(name).params, field, value)

    def copy(self) -> "Network":
        return Network(copy.deepcopy(self.layers), self.input_hw,
                       self.in_channels, self.num_classes, self.dtype)

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter and stat buffer cast to `dtype`."""
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for spec in new.layers:
            for field in PARAM_FIELDS.get(spec.kind, ()) + STAT_FIELDS.get(spec.kind, ()):
                setattr(spec.params, field, getattr(spec.params, field).astype(dtype))
        return new

    def weight_layer_count(self) -> int:
        return sum(1 for spec in self.layers if spec.kind in ("conv", "fc"))

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = L.EVAL,
                dropout_seed: Optional[int] = None, start: int = 0) -> np.ndarray:
        """Run layers[start:]; train mode keeps per-layer caches for backward."""
        if start == 0 and x.shape[1:] != (self.input_hw, self.input_hw, self.in_channels):
            raise ShapeError(
                f"expected input (n, {self.input_hw}, {self.input_hw}, "
                f"{self.in_channels}), got {x.shape}")
        caches = []
        for spec in self.layers[start:]:
            kind = spec.kind
            if kind == "conv":
                x, cache = L.conv2d(x, spec.params)
            elif kind == "relu":
                x, cache = L.relu(x)
            elif kind == "lrn":
                x, cache = L.lrn(x, spec.params)
            elif kind == "pool":
                x, cache = L.maxpool(x, spec.params.window, spec.params.stride)
            elif kind == "bn":
                x, cache = L.batchnorm(x, spec.params, mode)
            elif kind == "fc":
                x, cache = L.fully_connected(x, spec.params)
            elif kind == "dropout":
                seed = None
                if mode == L.TRAIN and spec.params.rate > 0.0:
                    if dropout_seed is None:
                        raise InvalidArgumentError(
                            "train-mode forward through dropout requires dropout_seed")
                    seed = derive_seed(dropout_seed, spec.name)
                x, cache = L.dropout(x, spec.params, mode, seed)
            else:
                raise StructureError(f"unknown layer kind {kind!r}")
            caches.append(cache)
        if mode == L.TRAIN:
            self._caches = caches
            self._fwd_start = start
        return x

    def backward(self, grad: np.ndarray) -> dict:
        """Gradients for every trainable parameter; consumes the forward cache.

        Frozen layers pass gradients through but contribute no entries.
        Propagation stops below the deepest trainable layer.
        """
        if self._caches is None:
            raise StateError("backward requires a train-mode forward cache")
        executed = self.layers[self._fwd_start:]
        caches = self._caches
        self._caches = None
        trainable = [i for i, spec in enumerate(executed)
                     if spec.trainable and spec.kind in PARAM_FIELDS]
        grads = {}
        if not trainable:
            return grads
        lowest = trainable[0]
        g = grad
        for i in range(len(executed) - 1, lowest - 1, -1):
            spec, cache = executed[i], caches[i]
            kind = spec.kind
            if kind == "conv":
                g, gp = L.conv2d_backward(g, cache)
            elif kind == "relu":
                g = L.relu_backward(g, cache)
                gp = None
            elif kind == "lrn":
                g = L.lrn_backward(g, cache)
                gp = None
            elif kind == "pool":
                g = L.maxpool_backward(g, cache)
                gp = None
            elif kind == "bn":
                g, gp = L.batchnorm_backward(g, cache)
            elif kind == "fc":
                g, gp = L.fully_connected_backward(g, cache)
            else:  # dropout
                g = L.dropout_backward(g, cache)
                gp = None
            if gp is not None and spec.trainable:
                grads[spec.name] = gp
        return grads

    # -- static shape chain --------------------------------------------------

    def output_shapes(self, n: int = 1) -> list:
        """(name, (n, h, w, c)) per layer, computed without touching data."""
        h = w = self.input_hw
        c = self.in_channels
        out = []
        for spec in self.layers:
            if spec.kind == "conv":
                kh, kw, _, c_out = spec.params.weights.shape
                h, w = L.conv_output_hw(h, w, kh, kw, spec.params.stride, spec.params.pad)
                c = c_out
            elif spec.kind == "pool":
                h, w = L.pool_output_hw(h, w, spec.params.window, spec.params.stride)
            elif spec.kind == "fc":
                h = w = 1
                c = spec.params.weights.shape[1]
            out.append((spec.name, (n, h, w, c)))
        return out

    def describe(self) -> str:
        """Human-readable layer table: name, output shape, parameters."""
        shapes = dict(self.output_shapes())
        rows = [("layer", "output", "parameters", "trainable")]
        for spec in self.layers:
            p = spec.params
            if spec.kind == "conv":
                kh, kw, _, c_out = p.weights.shape
                desc = f"{c_out}x{kh}x{kw} stride {p.stride}, pad {p.pad}"
            elif spec.kind == "fc":
                desc = f"{p.weights.shape[0]} -> {p.weights.shape[1]}"
            elif spec.kind == "lrn":
                desc = f"depth {p.depth}, k={p.k:g}, alpha={p.alpha:g}, beta={p.beta:g}"
            elif spec.kind == "pool":
                desc = f"window {p.window}, stride {p.stride}"
            elif spec.kind == "bn":
                desc = f"{p.gamma.shape[0]} channels"
            elif spec.kind == "dropout":
                desc = f"rate {p.rate:g}"
            else:
                desc = ""
            n, h, w, c = shapes[spec.name]
            flag = "yes" if spec.trainable else ("no" if spec.kind in PARAM_FIELDS else "-")
            rows.append((spec.name, f"{h}x{w}x{c}", desc, flag))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
                 for row in rows]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _assemble(conv_specs, fc_widths, num_classes, input_hw, in_channels, seed,
              dtype, dropout_rate, lrn_params) -> Network:
    def gauss(shape, name):
        return gaussian_array(shape, 0.0, INIT_VARIANCE,
                              derive_seed(seed, f"init/{name}"), dtype)

    layer_list = []
    h = w = input_hw
    c = in_channels
    for i, (c_out, k, stride, pad) in enumerate(conv_specs, start=1):
        name = f"conv{i}"
        weights = gauss((k, k, c, c_out), f"{name}.weights")
        layer_list.append(LayerSpec(name, "conv",
                                    L.ConvParams(weights, np.zeros(c_out, dtype=dtype),
                                                 stride=stride, pad=pad),
                                    trainable=True))
        h, w = L.conv_output_hw(h, w, k, k, stride, pad)
        c = c_out
        layer_list.append(LayerSpec(f"relu{i}", "relu"))
        if i in (1, 2):
            layer_list.append(LayerSpec(f"lrn{i}", "lrn", copy.copy(lrn_params)))
        if i in (1, 2, 5):
            layer_list.append(LayerSpec(f"pool{i}", "pool", L.PoolConfig(2, 2)))
            h, w = L.pool_output_hw(h, w, 2, 2)

    in_features = h * w * c
    for j, width in zip((6, 7), fc_widths):
        name = f"fc{j}"
        layer_list.append(LayerSpec(name, "fc",
                                    L.FCParams(gauss((in_features, width), f"{name}.weights"),
                                               np.zeros(width, dtype=dtype)),
                                    trainable=True))
        layer_list.append(LayerSpec(f"relu{j}", "relu"))
        layer_list.append(LayerSpec(f"dropout{j}", "dropout", L.DropoutConfig(dropout_rate)))
        in_features = width
    layer_list.append(LayerSpec("fc8", "fc",
                                L.FCParams(gauss((in_features, num_classes), "fc8.weights"),
                                           np.zeros(num_classes, dtype=dtype)),
                                trainable=True))
    return Network(layer_list, input_hw, in_channels, num_classes, dtype)


def build_cnnf(num_classes: int = 1000, seed: int = 0, dtype=np.float32,
               input_hw: int = 224, dropout_rate: float = 0.5,
               lrn_params: Optional[L.LRNParams] = None) -> Network:
    """Full-scale architecture: 5 conv + 3 fc learnable layers, 224x224x3 input."""
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    conv_specs = [(64, 11, 4, 0), (256, 5, 1, 2), (256, 3, 1, 1),
                  (256, 3, 1, 1), (256, 3, 1, 1)]
    return _assemble(conv_specs, (4096, 4096), num_classes, input_hw, 3, seed,
                     dtype, dropout_rate, lrn_params or L.LRNParams())


def build_mini_cnnf(num_classes: int = 7, seed: int = 0, dtype=np.float32,
                    input_hw: int = 32, dropout_rate: float = 0.5,
                    lrn_params: Optional[L.LRNParams] = None) -> Network:
    """Same topology at test scale: channel widths /8, 3x3 kernels, small input.

    input_hw 32 gives the chain 32-30-15-15-7-7-7-7-3; 16 gives
    16-14-7-7-3-3-3-3-1 (handy for end-to-end gradient checks).
    """
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    conv_specs = [(8, 3, 1, 0), (32, 3, 1, 1), (32, 3, 1, 1),
                  (32, 3, 1, 1), (32, 3, 1, 1)]
    return _assemble(conv_specs, (512, 512), num_classes, input_hw, 3, seed,
                     dtype, dropout_rate, lrn_params or L.LRNParams())


# ---------------------------------------------------------------------------
# fine-tuning surgery
# ---------------------------------------------------------------------------


def replace_head(net: Network, num_classes: int, init_variance: float = INIT_VARIANCE,
                 seed: int = 0) -> Network:
    """Swap fc8 for a fresh randomly initialized layer of `num_classes` outputs."""
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    if not net.has_layer("fc8"):
        raise StructureError("network has no fc8 layer to replace")
    new = net.copy()
    spec = new.layer("fc8")
    in_features = spec.params.weights.shape[0]
    spec.params = L.FCParams(
        gaussian_array((in_features, num_classes), 0.0, init_variance,
                       derive_seed(seed, "init/fc8.weights"), net.dtype),
        np.zeros(num_classes, dtype=net.dtype))
    spec.trainable = True
    new.num_classes = num_classes
    return new


def insert_batchnorm(net: Network, epsilon: float = 1e-5,
                     stat_momentum: float = 0.1) -> Network:
    """Insert bn1/bn2 after the conv1/conv2 blocks (after their LRN)."""
    for required in ("conv1", "conv2"):
        if not net.has_layer(required):
            raise StructureError(f"network has no {required} layer")
    new = net.copy()
    for i in (1, 2):
        if new.has_layer(f"bn{i}"):
            raise StructureError(f"bn{i} already present")
        anchor = next(name for name in (f"lrn{i}", f"relu{i}", f"conv{i}")
                      if new.has_layer(name))
        channels = new.layer(f"conv{i}").params.weights.shape[3]
        spec = LayerSpec(f"bn{i}", "bn",
                         L.BNParams.identity(channels, epsilon, stat_momentum,
                                             dtype=new.dtype),
                         trainable=True)
        new.layers.insert(new.index(anchor) + 1, spec)
    return new


def set_trainable(net: Network, frozen: Iterable[str]) -> Network:
    """Flag the named layers non-trainable; gradients still flow through them."""
    new = net.copy()
    for name in frozen:
        new.layer(name).trainable = False
    return new


def finetune_surgery(net: Network, num_classes: int = 7, seed: int = 0,
                     init_variance: float = INIT_VARIANCE,
                     freeze: Iterable[str] = FINETUNE_FROZEN,
                     batchnorm: bool = True) -> Network:
    """The standard fine-tuning recipe: new head, bn1/bn2, frozen conv stack."""
    net = replace_head(net, num_classes, init_variance, seed)
    if batchnorm:
        net = insert_batchnorm(net)
    return set_trainable(net, freeze)
