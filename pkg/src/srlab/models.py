"""Small configurable CNN classifiers with named tap points.

Architectures are data, not code: a `ModelSpec` lists layer descriptors and
the tap points where latent ensembling may terminate. `forward` is always
the exact composition `forward_from_tap(forward_to_tap(x, t), t)` for every
tap t, bit for bit, because both halves run the same layer loop.

Training is deliberately plain SGD with momentum — the defense under study
is training-free, so optimizer sophistication adds nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .serialize import FormatError, load_tensors, save_tensors
from .tensor import Tensor

__all__ = [
    "Conv",
    "Relu",
    "MaxPool",
    "AvgPool",
    "GlobalAvgPool",
    "Flatten",
    "Dense",
    "ResBlock",
    "TapPoint",
    "ModelSpec",
    "Model",
    "WeightBundle",
    "SpecError",
    "TrainConfig",
    "build_model",
    "parse_layer",
    "train",
    "evaluate_accuracy",
    "save_weights",
    "load_weights",
    "equivariant_probe_spec",
]


class SpecError(ValueError):
    """Raised when a model specification does not compose."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pad_mode: str = "zeros"


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int


@dataclass(frozen=True)
class AvgPool:
    k: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class ResBlock:
    # Two same-channel convs with a skip connection: relu(conv2(relu(conv1(x))) + x).
    kernel: int = 3
    pad_mode: str = "zeros"


def parse_layer(text):
    """Parse one layer descriptor string, e.g. "conv:8:3:1:1:zeros"."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "conv":
            out_ch, k = int(parts[1]), int(parts[2])
            stride = int(parts[3]) if len(parts) > 3 else 1
            padding = int(parts[4]) if len(parts) > 4 else 0
            pad_mode = parts[5] if len(parts) > 5 else "zeros"
            return Conv(out_ch, k, stride, padding, pad_mode)
        if kind == "relu":
            return Relu()
        if kind == "maxpool":
            return MaxPool(int(parts[1]))
        if kind == "avgpool":
            return AvgPool(int(parts[1]))
        if kind in ("gap", "global_avgpool"):
            return GlobalAvgPool()
        if kind == "flatten":
            return Flatten()
        if kind == "linear":
            return Dense(int(parts[1]))
        if kind == "resblock":
            k = int(parts[1]) if len(parts) > 1 else 3
            pad_mode = parts[2] if len(parts) > 2 else "zeros"
            return ResBlock(k, pad_mode)
    except (IndexError, ValueError) as e:
        raise SpecError(f"cannot parse layer descriptor {text!r}: {e}") from None
    raise SpecError(f"unknown layer kind {kind!r} in {text!r}")


def layer_to_string(layer):
    if isinstance(layer, Conv):
        return f"conv:{layer.out_channels}:{layer.kernel}:{layer.stride}:{layer.padding}:{layer.pad_mode}"
    if isinstance(layer, Relu):
        return "relu"
    if isinstance(layer, MaxPool):
        return f"maxpool:{layer.k}"
    if isinstance(layer, AvgPool):
        return f"avgpool:{layer.k}"
    if isinstance(layer, GlobalAvgPool):
        return "gap"
    if isinstance(layer, Flatten):
        return "flatten"
    if isinstance(layer, Dense):
        return f"linear:{layer.out_features}"
    if isinstance(layer, ResBlock):
        return f"resblock:{layer.kernel}:{layer.pad_mode}"
    raise SpecError(f"unknown layer object {layer!r}")


@dataclass(frozen=True)
class TapPoint:
    """A named layer boundary: features after `layer_index` layers, with the
    cumulative downsampling factor accumulated up to that point."""

    name: str
    layer_index: int
    cumulative_stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    num_classes: int
    input_shape: tuple  # (C, H, W)
    taps: tuple = field(default_factory=tuple)

    def tap(self, name):
        for t in self.taps:
            if t.name == name:
                return t
        raise SpecError(f"tap {name!r} not defined; available: {[t.name for t in self.taps]}")


def _shape_after(layer, shape, index):
    spatial = len(shape) == 3
    if isinstance(layer, (Conv, MaxPool, AvgPool, GlobalAvgPool, ResBlock)) and not spatial:
        raise SpecError(f"layer {index} ({layer_to_string(layer)}): requires spatial input, got {shape}")
    if isinstance(layer, Conv):
        C, H, W = shape
        if layer.kernel > H + 2 * layer.padding or layer.kernel > W + 2 * layer.padding:
            raise SpecError(f"layer {index} ({layer_to_string(layer)}): kernel exceeds padded input {shape}")
        Ho = (H + 2 * layer.padding - layer.kernel) // layer.stride + 1
        Wo = (W + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return (layer.out_channels, Ho, Wo), layer.stride
    if isinstance(layer, Relu):
        return shape, 1
    if isinstance(layer, (MaxPool, AvgPool)):
        C, H, W = shape
        if H % layer.k or W % layer.k:
            raise SpecError(f"layer {index} (pool:{layer.k}): does not divide spatial dims {H}x{W}")
        return (C, H // layer.k, W // layer.k), layer.k
    if isinstance(layer, GlobalAvgPool):
        return (shape[0],), 1
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),), 1
    if isinstance(layer, Dense):
        if spatial:
            raise SpecError(f"layer {index} (linear): requires flat input, got {shape}; add flatten/gap first")
        return (layer.out_features,), 1
    if isinstance(layer, ResBlock):
        if layer.kernel % 2 == 0:
            raise SpecError(f"layer {index} (resblock): kernel must be odd for same-shape padding")
        return shape, 1
    raise SpecError(f"layer {index}: unknown layer {layer!r}")


def validate_spec(spec):
    """Compose shapes through the layer list; returns (shapes, strides) where
    shapes[k] is the shape after k layers and strides[k] the cumulative
    downsampling factor. Raises SpecError naming the offending layer."""
    shape = tuple(spec.input_shape)
    if len(shape) != 3:
        raise SpecError(f"input_shape must be (C, H, W), got {shape}")
    shapes = [shape]
    strides = [1]
    cum = 1
    for idx, layer in enumerate(spec.layers):
        shape, f = _shape_after(layer, shape, idx)
        cum *= f
        shapes.append(shape)
        strides.append(cum)
    if spec.num_classes is not None and shape != (spec.num_classes,):
        raise SpecError(f"final shape {shape} does not match num_classes={spec.num_classes}")
    for t in spec.taps:
        if not (0 < t.layer_index <= len(spec.layers)):
            raise SpecError(f"tap {t.name!r}: layer_index {t.layer_index} out of range")
        if len(shapes[t.layer_index]) != 3:
            raise SpecError(f"tap {t.name!r}: boundary after layer {t.layer_index} is not spatial")
    return shapes, strides


def resolve_taps(spec):
    """Return taps with cumulative strides recomputed from the layer list."""
    _, strides = validate_spec(spec)
    return tuple(
        TapPoint(t.name, t.layer_index, int(strides[t.layer_index])) for t in spec.taps
    )


@dataclass
class WeightBundle:
    """Named parameter arrays plus training provenance metadata."""

    tensors: dict
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, WeightBundle):
            return NotImplemented
        if self.meta != other.meta or set(self.tensors) != set(other.tensors):
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


class Model:
    """A validated ModelSpec bound to parameter tensors."""

    def __init__(self, spec, seed=0):
        self.shapes, self.strides = validate_spec(spec)
        self.spec = ModelSpec(
            layers=tuple(spec.layers),
            num_classes=spec.num_classes,
            input_shape=tuple(spec.input_shape),
            taps=resolve_taps(spec),
        )
        self.params = {}
        self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        for idx, layer in enumerate(self.spec.layers):
            cin = self.shapes[idx][0]
            if isinstance(layer, Conv):
                fan_in = cin * layer.kernel * layer.kernel
                w = rng.standard_normal((layer.out_channels, cin, layer.kernel, layer.kernel))
                self.params[f"layer{idx}.weight"] = Tensor(w * np.sqrt(2.0 / fan_in))
                self.params[f"layer{idx}.bias"] = Tensor(np.zeros(layer.out_channels))
            elif isinstance(layer, Dense):
                fan_in = self.shapes[idx][0]
                w = rng.standard_normal((layer.out_features, fan_in))
                self.params[f"layer{idx}.weight"] = Tensor(w * np.sqrt(2.0 / fan_in))
                self.params[f"layer{idx}.bias"] = Tensor(np.zeros(layer.out_features))
            elif isinstance(layer, ResBlock):
                fan_in = cin * layer.kernel * layer.kernel
                for half in ("conv1", "conv2"):
                    w = rng.standard_normal((cin, cin, layer.kernel, layer.kernel))
                    self.params[f"layer{idx}.{half}.weight"] = Tensor(w * np.sqrt(2.0 / fan_in))
                    self.params[f"layer{idx}.{half}.bias"] = Tensor(np.zeros(cin))

    def _apply(self, layer, idx, h):
        if isinstance(layer, Conv):
            return T.conv2d(
                h,
                self.params[f"layer{idx}.weight"],
                self.params[f"layer{idx}.bias"],
                stride=layer.stride,
                padding=layer.padding,
                pad_mode=layer.pad_mode,
            )
        if isinstance(layer, Relu):
            return T.relu(h)
        if isinstance(layer, MaxPool):
            return T.maxpool2d(h, layer.k)
        if isinstance(layer, AvgPool):
            return T.avgpool2d(h, layer.k)
        if isinstance(layer, GlobalAvgPool):
            return T.global_avgpool(h)
        if isinstance(layer, Flatten):
            return T.flatten(h)
        if isinstance(layer, Dense):
            return T.linear(h, self.params[f"layer{idx}.weight"], self.params[f"layer{idx}.bias"])
        if isinstance(layer, ResBlock):
            pad = layer.kernel // 2
            a = T.conv2d(
                h,
                self.params[f"layer{idx}.conv1.weight"],
                self.params[f"layer{idx}.conv1.bias"],
                stride=1,
                padding=pad,
                pad_mode=layer.pad_mode,
            )
            a = T.relu(a)
            a = T.conv2d(
                a,
                self.params[f"layer{idx}.conv2.weight"],
                self.params[f"layer{idx}.conv2.bias"],
                stride=1,
                padding=pad,
                pad_mode=layer.pad_mode,
            )
            return T.relu(a + h)
        raise SpecError(f"unknown layer {layer!r}")

    def _run(self, h, start, stop):
        for idx in range(start, stop):
            h = self._apply(self.spec.layers[idx], idx, h)
        return h

    def forward(self, x):
        return self._run(x, 0, len(self.spec.layers))

    def tap(self, tap):
        return tap if isinstance(tap, TapPoint) else self.spec.tap(tap)

    def forward_to_tap(self, x, tap):
        return self._run(x, 0, self.tap(tap).layer_index)

    def forward_from_tap(self, f, tap):
        return self._run(f, self.tap(tap).layer_index, len(self.spec.layers))

    # -- weight management -----------------------------------------------

    def set_requires_grad(self, flag):
        for name, p in self.params.items():
            self.params[name] = Tensor(p.data, requires_grad=flag)

    def get_bundle(self, meta=None):
        return WeightBundle({k: v.data.copy() for k, v in self.params.items()}, dict(meta or {}))

    def set_bundle(self, bundle):
        if set(bundle.tensors) != set(self.params):
            missing = sorted(set(self.params) - set(bundle.tensors))
            extra = sorted(set(bundle.tensors) - set(self.params))
            raise FormatError(f"weight bundle does not match spec: missing={missing}, unexpected={extra}")
        for name, arr in bundle.tensors.items():
            if arr.shape != self.params[name].data.shape:
                raise FormatError(
                    f"shape mismatch for parameter {name!r}: "
                    f"bundle {arr.shape} vs spec {self.params[name].data.shape}"
                )
            self.params[name] = Tensor(arr.copy())


def build_model(spec, seed=0):
    """Validate a spec and instantiate a model with seeded He-init weights."""
    return Model(spec, seed=seed)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 5
    batch: int = 64
    seed: int = 0
    momentum: float = 0.9


def train(model, dataset, hp, val=None):
    """SGD-with-momentum training; deterministic given hp.seed.

    `dataset` is (images [N,C,H,W], labels [N]). Returns a WeightBundle
    whose metadata records the seed, epoch count, per-epoch mean loss and
    final train/val accuracy. Raises RuntimeError if the loss diverges.
    """
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.size and y.max() >= model.spec.num_classes:
        raise ValueError(f"dataset labels reach {y.max()} but model has {model.spec.num_classes} classes")
    rng = np.random.default_rng(hp.seed)
    model.set_requires_grad(True)
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    loss_curve = []
    try:
        for epoch in range(hp.epochs):
            perm = rng.permutation(len(X))
            losses = []
            for lo in range(0, len(X), hp.batch):
                sel = perm[lo : lo + hp.batch]
                logits = model.forward(Tensor(X[sel]))
                loss = T.cross_entropy(logits, y[sel])
                if not np.isfinite(loss.data):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at epoch {epoch}, batch {lo // hp.batch}"
                    )
                grads = T.backward(loss, leaves=model.params.values())
                for name in model.params:
                    p = model.params[name]
                    v = velocity[name]
                    v *= hp.momentum
                    v -= hp.lr * grads[p].data
                    model.params[name] = Tensor(p.data + v, requires_grad=True)
                losses.append(float(loss.data))
            loss_curve.append(float(np.mean(losses)))
    finally:
        model.set_requires_grad(False)

    meta = {
        "seed": int(hp.seed),
        "epochs": int(hp.epochs),
        "lr": float(hp.lr),
        "batch": int(hp.batch),
        "momentum": float(hp.momentum),
        "loss_curve": loss_curve,
        "final_train_accuracy": evaluate_accuracy(model, X, y),
    }
    if val is not None:
        meta["final_val_accuracy"] = evaluate_accuracy(model, np.asarray(val[0]), np.asarray(val[1]))
    return model.get_bundle(meta)


def evaluate_accuracy(model, X, y, batch=256):
    correct = 0
    for lo in range(0, len(X), batch):
        logits = model.forward(Tensor(X[lo : lo + batch]))
        correct += int((logits.data.argmax(axis=1) == y[lo : lo + batch]).sum())
    return float(correct) / max(1, len(X))


def save_weights(bundle, path):
    save_tensors(path, bundle.tensors, bundle.meta)


def load_weights(path):
    tensors, meta = load_tensors(path)
    return WeightBundle(tensors, meta)


def equivariant_probe_spec(in_channels=1, channels=(4, 4), num_classes=4, kernel=3, input_size=16):
    """Stride-1, circular-padded, conv-only encoder: exactly
    translation-equivariant at every tap, used by the defense identity
    tests. The flatten+linear readout is deliberately *not* shift
    invariant, so unaligned feature averaging is visibly different from a
    plain forward pass while realigned averaging is exactly equal."""
    layers = []
    taps = []
    for n, ch in enumerate(channels):
        layers.append(Conv(ch, kernel, stride=1, padding=kernel // 2, pad_mode="circular"))
        layers.append(Relu())
        taps.append(TapPoint(f"conv{n + 1}", len(layers)))
    layers.append(Flatten())
    layers.append(Dense(num_classes))
    return ModelSpec(
        layers=tuple(layers),
        num_classes=num_classes,
        input_shape=(in_channels, input_size, input_size),
        taps=tuple(taps),
    )
