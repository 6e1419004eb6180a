"""Binarized layers, model specifications and the model zoo.

A :class:`ModelSpec` is a JSON-serializable list of layer descriptors.
:func:`build_model` turns it into a :class:`Network` whose binary conv and
linear layers binarize weights and input activations on every forward pass
and inject the estimator derivative on the backward pass:

    dL/dw = dL/dQ_w * g'(w_hat) * 2**s        dL/da = dL/dQ_a * g'(a)

with the layer-wide mean, std and shift ``s`` treated as constants.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .dte import Estimator
from .imb import QuantizedWeights, binarize_weights, shift_scalar, sign, standardize_balance
from .tensor import Tensor, custom_grad, no_grad

BINARIZERS = ("imb", "vanilla", "xnor")
LAYER_TYPES = ("conv", "linear", "bn", "hardtanh", "maxpool", "gap", "flatten", "residual")


# -- layers ----------------------------------------------------------------
class Layer:
    kind = ""

    def __init__(self, name: str):
        self.name = name

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def children(self) -> list["Layer"]:
        return []


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class _WeightLayer(Layer):
    """Shared logic of conv and linear layers, full precision or binary."""

    def __init__(self, name, weight, binary, binarizer, estimator, surrogate, binarize_acts):
        super().__init__(name)
        if binarizer not in BINARIZERS:
            raise ValueError(f"unknown binarizer {binarizer!r}; expected one of {BINARIZERS}")
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.binary = bool(binary)
        self.binarizer = binarizer
        self.estimator = estimator if estimator is not None else Estimator()
        # forward with g = k*tanh(t*x) instead of sign (gradient checks only)
        self.surrogate = surrogate
        self.binarize_acts = binarize_acts
        self.last_act_p_plus = float("nan")
        self.record_acts = False

    def params(self):
        return [("weight", self.weight)]

    # weight-side views used by training diagnostics
    def weights_std(self) -> np.ndarray:
        """The tensor the binarizer takes the sign of (w_hat for IMB, w otherwise)."""
        if self.binarizer == "imb":
            return standardize_balance(self.weight.data)
        return self.weight.data

    def weight_scale(self, w_hat: np.ndarray) -> tuple[float, int]:
        """(multiplier, shift) applied to the signs."""
        if self.binarizer == "imb":
            s = shift_scalar(w_hat)
            return float(2.0**s), s
        if self.binarizer == "xnor":
            return float(np.mean(np.abs(self.weight.data), dtype=np.float64)), 0
        return 1.0, 0

    def quantize(self) -> QuantizedWeights:
        """Current binary weights (signs, shift), recomputed from the latent weights."""
        if self.binarizer == "imb":
            return binarize_weights(self.weight.data)
        if self.binarizer == "xnor":
            raise ValueError(f"{self.name}: xnor-scaled weights carry a float scalar, not an integer shift")
        w = self.weight.data
        return QuantizedWeights(sign(w).astype(np.int8), 0, w.shape)

    def binary_weight(self) -> Tensor:
        w_hat = self.weights_std()
        mult, _ = self.weight_scale(w_hat)
        est = self.estimator
        if self.surrogate:

            def fwd(_):
                return est.surrogate(w_hat) * mult

        else:

            def fwd(_):
                return sign(w_hat) * np.float32(mult)

        return custom_grad(self.weight, fwd, lambda _: est.derivative(w_hat) * mult)

    def binary_input(self, x: Tensor, training: bool) -> Tensor:
        if not self.binarize_acts:
            return x
        if training or self.record_acts:
            self.last_act_p_plus = float(np.mean(x.data >= 0))
        est = self.estimator
        fwd = est.surrogate if self.surrogate else sign
        return custom_grad(x, fwd, est.derivative)

    def effective(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        if not self.binary:
            return x, self.weight
        return self.binary_input(x, training), self.binary_weight()


class Conv2d(_WeightLayer):
    kind = "conv"

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 0,
        binary: bool = False,
        binarizer: str = "imb",
        estimator: Optional[Estimator] = None,
        rng: Optional[np.random.Generator] = None,
        surrogate: bool = False,
        binarize_acts: bool = True,
    ):
        rng = rng or np.random.default_rng(0)
        w = _kaiming(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel)
        super().__init__(name, w, binary, binarizer, estimator, surrogate, binarize_acts)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, training):
        xi, w = self.effective(x, training)
        return F.conv2d(xi, w, self.stride, self.padding)


class Linear(_WeightLayer):
    kind = "linear"

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        binary: bool = False,
        binarizer: str = "imb",
        estimator: Optional[Estimator] = None,
        rng: Optional[np.random.Generator] = None,
        surrogate: bool = False,
        binarize_acts: bool = True,
    ):
        rng = rng or np.random.default_rng(0)
        w = _kaiming(rng, (out_features, in_features), in_features)
        super().__init__(name, w, binary, binarizer, estimator, surrogate, binarize_acts)
        self.in_features, self.out_features = in_features, out_features

    def forward(self, x, training):
        xi, w = self.effective(x, training)
        return F.linear(xi, w)


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, name: str, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__(name)
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x, training):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Hardtanh(Layer):
    kind = "hardtanh"

    def forward(self, x, training):
        return F.hardtanh(x)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, name: str, kernel: int = 2):
        super().__init__(name)
        self.kernel = kernel

    def forward(self, x, training):
        return F.max_pool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training):
        return F.global_avg_pool(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training):
        return F.flatten(x)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, name: str, layers: list[Layer]):
        super().__init__(name)
        self.layers = list(layers)

    def forward(self, x, training):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def children(self):
        return self.layers


class Residual(Layer):
    """``body(x) + shortcut(x)``; an empty shortcut is the identity."""

    kind = "residual"

    def __init__(self, name: str, body: Sequential, shortcut: Sequential):
        super().__init__(name)
        self.body, self.shortcut = body, shortcut

    def forward(self, x, training):
        y = self.body.forward(x, training)
        return F.add(y, self.shortcut.forward(x, training))

    def children(self):
        return [self.body, self.shortcut]


def iter_layers(layer: Layer) -> Iterator[Layer]:
    """Depth-first pre-order walk over leaf layers."""
    kids = layer.children()
    if not kids:
        yield layer
        return
    for k in kids:
        yield from iter_layers(k)


# -- specification -----------------------------------------------------------
@dataclass
class ModelSpec:
    """Ordered layer descriptors plus input shape and class count.

    Descriptor examples::

        {"type": "conv", "name": "conv0", "in": 1, "out": 16, "kernel": 3,
         "stride": 1, "padding": 1, "binary": false}
        {"type": "bn", "name": "bn0", "channels": 16}
        {"type": "residual", "name": "block1", "body": [...], "shortcut": [...]}
    """

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[dict]
    binarizer: str = "imb"
    binarize_acts: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "binarizer": self.binarizer,
            "binarize_acts": self.binarize_acts,
            "layers": copy.deepcopy(self.layers),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            layers=copy.deepcopy(d["layers"]),
            binarizer=d.get("binarizer", "imb"),
            binarize_acts=bool(d.get("binarize_acts", True)),
        )

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_dict(json.loads(s))

    def param_layers(self) -> list[dict]:
        out: list[dict] = []

        def walk(descs):
            for d in descs:
                if d["type"] == "residual":
                    walk(d["body"])
                    walk(d.get("shortcut", []))
                elif d["type"] in ("conv", "linear"):
                    out.append(d)

        walk(self.layers)
        return out

    def validate(self) -> None:
        if self.binarizer not in BINARIZERS:
            raise ValueError(f"unknown binarizer {self.binarizer!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        names: set[str] = set()

        def walk(descs):
            for d in descs:
                t = d.get("type")
                if t not in LAYER_TYPES:
                    raise ValueError(f"unknown layer type {t!r}")
                n = d.get("name")
                if not n or n in names:
                    raise ValueError(f"layer names must be unique and non-empty, got {n!r}")
                names.add(n)
                if t == "residual":
                    walk(d["body"])
                    walk(d.get("shortcut", []))

        walk(self.layers)
        params = self.param_layers()
        if not params:
            raise ValueError("model has no parameterized layers")
        if params[0].get("binary") or params[-1].get("binary"):
            raise ValueError("first and last parameterized layers must be full precision")


def _build_layer(d: dict, spec: ModelSpec, rng, est_kw: dict, surrogate: bool) -> Layer:
    t, n = d["type"], d["name"]
    if t == "conv":
        binary = bool(d.get("binary", False))
        return Conv2d(
            n, d["in"], d["out"], d.get("kernel", 3), d.get("stride", 1), d.get("padding", 0),
            binary=binary, binarizer=spec.binarizer, estimator=Estimator(**est_kw), rng=rng,
            surrogate=surrogate, binarize_acts=spec.binarize_acts,
        )  # fmt: skip
    if t == "linear":
        binary = bool(d.get("binary", False))
        return Linear(
            n, d["in"], d["out"], binary=binary, binarizer=spec.binarizer, estimator=Estimator(**est_kw),
            rng=rng, surrogate=surrogate, binarize_acts=spec.binarize_acts,
        )  # fmt: skip
    if t == "bn":
        return BatchNorm(n, d["channels"])
    if t == "hardtanh":
        return Hardtanh(n)
    if t == "maxpool":
        return MaxPool2d(n, d.get("kernel", 2))
    if t == "gap":
        return GlobalAvgPool(n)
    if t == "flatten":
        return Flatten(n)
    body = Sequential(n + ".body", [_build_layer(c, spec, rng, est_kw, surrogate) for c in d["body"]])
    short = Sequential(n + ".shortcut", [_build_layer(c, spec, rng, est_kw, surrogate) for c in d.get("shortcut", [])])
    return Residual(n, body, short)


class Network:
    """A built model: forward pass, parameter access and state (de)serialization."""

    def __init__(self, spec: ModelSpec, root: Sequential):
        self.spec = spec
        self.root = root

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {self.spec.input_shape}")
        return self.root.forward(x, training)

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        outs = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i : i + batch_size], training=False).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.num_classes), np.float32)

    def layers(self) -> list[Layer]:
        return list(iter_layers(self.root))

    def weight_layers(self) -> list[_WeightLayer]:
        return [l for l in self.layers() if isinstance(l, _WeightLayer)]

    def binary_layers(self) -> list[_WeightLayer]:
        return [l for l in self.weight_layers() if l.binary]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{l.name}.{k}", p) for l in self.layers() for k, p in l.params()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{l.name}.{k}", b) for l in self.layers() for k, b in l.buffers()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            if k not in arrays or arrays[k].shape != p.shape:
                raise ValueError(f"state is missing or misshapen for {k}")
            p.data = np.ascontiguousarray(arrays[k], dtype=np.float32)
        for k, b in self.named_buffers():
            if k not in arrays or arrays[k].shape != b.shape:
                raise ValueError(f"state is missing or misshapen for {k}")
            b[...] = arrays[k]

    def estimators(self) -> dict[str, Estimator]:
        return {l.name: l.estimator for l in self.binary_layers()}

    def set_surrogate(self, flag: bool) -> None:
        for l in self.weight_layers():
            l.surrogate = flag

    def output_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-layer output shape (without batch axis) from a dry forward pass."""
        shapes: dict[str, tuple[int, ...]] = {}

        def run(layer: Layer, x: Tensor) -> Tensor:
            if isinstance(layer, Sequential):
                for c in layer.layers:
                    x = run(c, x)
                return x
            if isinstance(layer, Residual):
                y = run(layer.body, x)
                out = F.add(y, run(layer.shortcut, x))
                shapes[layer.name] = out.shape[1:]
                return out
            x_out = layer.forward(x, False)
            shapes[layer.name] = x_out.shape[1:]
            return x_out

        with no_grad():
            run(self.root, Tensor(np.zeros((1,) + self.spec.input_shape, np.float32)))
        return shapes

    def input_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-layer input shape (without batch axis)."""
        shapes: dict[str, tuple[int, ...]] = {}

        def run(layer: Layer, x: Tensor) -> Tensor:
            if isinstance(layer, Sequential):
                for c in layer.layers:
                    x = run(c, x)
                return x
            if isinstance(layer, Residual):
                return F.add(run(layer.body, x), run(layer.shortcut, x))
            shapes[layer.name] = x.shape[1:]
            return layer.forward(x, False)

        with no_grad():
            run(self.root, Tensor(np.zeros((1,) + self.spec.input_shape, np.float32)))
        return shapes


def build_model(spec: ModelSpec, seed: int = 0, estimator: Optional[dict] = None, surrogate: bool = False) -> Network:
    """Instantiate ``spec`` with seeded Kaiming-normal weights.

    ``estimator`` holds :class:`Estimator` keyword arguments shared by every
    binary layer (each layer still owns its own state).
    """
    rng = np.random.default_rng(seed)
    est_kw = dict(estimator or {})
    root = Sequential("root", [_build_layer(d, spec, rng, est_kw, surrogate) for d in spec.layers])
    net = Network(spec, root)
    out = net.output_shapes()
    last = spec.layers[-1]["name"]
    if out[last] != (spec.num_classes,):
        raise ValueError(f"model output {out[last]} does not match {spec.num_classes} classes")
    return net


# -- zoo -------------------------------------------------------------------
def _conv(name, cin, cout, k=3, stride=1, padding=1, binary=True):
    return {"type": "conv", "name": name, "in": cin, "out": cout, "kernel": k, "stride": stride,
            "padding": padding, "binary": binary}  # fmt: skip


def cnn4(input_shape=(1, 28, 28), num_classes=10, width=16, binarizer="imb") -> ModelSpec:
    """Four weight layers: full-precision conv, two binary convs, full-precision classifier.

    Each conv is followed by 2x2 max pooling (floor mode), batch norm and
    hardtanh; pooling comes first so the elementwise work runs on the smaller map.
    """
    c, h, w = input_shape
    if h < 8 or w < 8:
        raise ValueError("cnn4 needs spatial size of at least 8x8")
    w1, w2, w3 = width, 2 * width, 4 * width
    layers = [
        _conv("conv0", c, w1, binary=False),
        {"type": "maxpool", "name": "pool0", "kernel": 2},
        {"type": "bn", "name": "bn0", "channels": w1},
        {"type": "hardtanh", "name": "act0"},
        _conv("bconv1", w1, w2),
        {"type": "maxpool", "name": "pool1", "kernel": 2},
        {"type": "bn", "name": "bn1", "channels": w2},
        {"type": "hardtanh", "name": "act1"},
        _conv("bconv2", w2, w3),
        {"type": "maxpool", "name": "pool2", "kernel": 2},
        {"type": "bn", "name": "bn2", "channels": w3},
        {"type": "hardtanh", "name": "act2"},
        {"type": "flatten", "name": "flat"},
        {"type": "linear", "name": "fc3", "in": w3 * (h // 2 // 2 // 2) * (w // 2 // 2 // 2), "out": num_classes,
         "binary": False},
    ]  # fmt: skip
    return ModelSpec("cnn4", (c, h, w), num_classes, layers, binarizer)


def mlp(input_shape=(1, 1, 2), num_classes=2, hidden=32, binarizer="imb") -> ModelSpec:
    """Full-precision input layer, one binary hidden layer, full-precision output."""
    n_in = int(np.prod(input_shape))
    layers = [
        {"type": "flatten", "name": "flat"},
        {"type": "linear", "name": "fc0", "in": n_in, "out": hidden, "binary": False},
        {"type": "bn", "name": "bn0", "channels": hidden},
        {"type": "hardtanh", "name": "act0"},
        {"type": "linear", "name": "bfc1", "in": hidden, "out": hidden, "binary": True},
        {"type": "bn", "name": "bn1", "channels": hidden},
        {"type": "hardtanh", "name": "act1"},
        {"type": "linear", "name": "fc2", "in": hidden, "out": num_classes, "binary": False},
    ]
    return ModelSpec("mlp", tuple(input_shape), num_classes, layers, binarizer)


def vgg_small(input_shape=(3, 32, 32), num_classes=10, width=128, binarizer="imb") -> ModelSpec:
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ValueError("vgg_small needs spatial size divisible by 8")
    chans = [width, width, 2 * width, 2 * width, 4 * width, 4 * width]
    layers: list[dict] = []
    cin = c
    for i, cout in enumerate(chans):
        layers.append(_conv(f"conv{i}", cin, cout, binary=i > 0))
        if i % 2 == 1:
            layers.append({"type": "maxpool", "name": f"pool{i}", "kernel": 2})
        layers.append({"type": "bn", "name": f"bn{i}", "channels": cout})
        layers.append({"type": "hardtanh", "name": f"act{i}"})
        cin = cout
    layers.append({"type": "flatten", "name": "flat"})
    layers.append({"type": "linear", "name": "fc", "in": cin * (h // 8) * (w // 8), "out": num_classes,
                   "binary": False})  # fmt: skip
    return ModelSpec("vgg_small", (c, h, w), num_classes, layers, binarizer)


def resnet20(input_shape=(3, 32, 32), num_classes=10, width=16, binarizer="imb") -> ModelSpec:
    """ResNet-20 with binary 3x3 convs and full-precision 1x1 downsampling shortcuts."""
    c = input_shape[0]
    layers: list[dict] = [
        _conv("conv0", c, width, binary=False),
        {"type": "bn", "name": "bn0", "channels": width},
        {"type": "hardtanh", "name": "act0"},
    ]
    cin = width
    for stage in range(3):
        cout = width * (2**stage)
        for b in range(3):
            stride = 2 if stage > 0 and b == 0 else 1
            n = f"s{stage}b{b}"
            body = [
                _conv(f"{n}.conv1", cin, cout, stride=stride),
                {"type": "bn", "name": f"{n}.bn1", "channels": cout},
                {"type": "hardtanh", "name": f"{n}.act1"},
                _conv(f"{n}.conv2", cout, cout),
                {"type": "bn", "name": f"{n}.bn2", "channels": cout},
            ]
            short: list[dict] = []
            if stride != 1 or cin != cout:
                short = [
                    _conv(f"{n}.down", cin, cout, k=1, stride=stride, padding=0, binary=False),
                    {"type": "bn", "name": f"{n}.down_bn", "channels": cout},
                ]
            layers.append({"type": "residual", "name": n, "body": body, "shortcut": short})
            layers.append({"type": "hardtanh", "name": f"{n}.act2"})
            cin = cout
    layers.append({"type": "gap", "name": "gap"})
    layers.append({"type": "linear", "name": "fc", "in": cin, "out": num_classes, "binary": False})
    return ModelSpec("resnet20", tuple(input_shape), num_classes, layers, binarizer)


ZOO = {"cnn4": cnn4, "mlp": mlp, "vgg_small": vgg_small, "resnet20": resnet20}


def zoo_spec(name: str, input_shape, num_classes: int, binarizer: str = "imb", width: Optional[int] = None) -> ModelSpec:
    if name not in ZOO:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(ZOO)}")
    kw = {"binarizer": binarizer}
    if width is not None:
        kw["hidden" if name == "mlp" else "width"] = width
    return ZOO[name](tuple(input_shape), num_classes, **kw)


def sign_flip_rate(prev_signs, curr_signs) -> float:
    """Fraction of positions whose sign changed."""
    a, b = np.asarray(prev_signs), np.asarray(curr_signs)
    if a.shape != b.shape:
        raise ValueError(f"sign_flip_rate: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a >= 0) != (b >= 0)))


@dataclass
class LayerSnapshot:
    """Binary weight signs of each binary layer at one point in time."""

    signs: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def take(cls, net: Network) -> "LayerSnapshot":
        return cls({l.name: sign(l.weights_std()).astype(np.int8) for l in net.binary_layers()})
