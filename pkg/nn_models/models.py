"""
Layer-list models with per-layer activation capture
===================================================
A ``ModelSpec`` is an ordered list of ``LayerSpec`` descriptors plus the indices
of the layers whose outputs feed the soft nearest neighbor loss.  ``Model``
holds the weights as leaf tensors named ``L{i}.weight`` / ``L{i}.bias``.

Shape rules (batch axis omitted):
    dense(in, out)          (in,)       -> (out,)
    conv(in, out, k, pad)   (in, H, W)  -> (out, H', W')   H' = H - k + 1 (valid) or H (same)
    maxpool                 (C, H, W)   -> (C, H // 2, W // 2)
    flatten                 (...)       -> (prod,)
    relu/sigmoid/dropout    unchanged
    softmax                 (K,)        -> (K,), terminal
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from common import tensor_autodiff as ad
from common.config import rng_stream
from common.errors import ContractError
from common.tensor_autodiff import Tensor

LAYER_KINDS = ("dense", "conv", "maxpool", "relu", "sigmoid", "dropout", "flatten", "softmax")
PARAMETRIC = ("dense", "conv")
ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 0
    padding: str = "valid"
    rate: float = 0.0

    @classmethod
    def dense(cls, n_in, n_out):
        return cls("dense", in_features=n_in, out_features=n_out)

    @classmethod
    def conv(cls, in_channels, kernels, kernel_size, padding="valid"):
        return cls("conv", in_features=in_channels, out_features=kernels, kernel_size=kernel_size, padding=padding)

    @classmethod
    def maxpool(cls):
        return cls("maxpool")

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def sigmoid(cls):
        return cls("sigmoid")

    @classmethod
    def dropout(cls, rate):
        return cls("dropout", rate=rate)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def softmax(cls):
        return cls("softmax")


@dataclass
class ModelSpec:
    input_shape: Tuple[int, ...]
    layers: list
    snnl_layers: Tuple[int, ...] = ()
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = list(self.layers)
        self.snnl_layers = tuple(int(i) for i in self.snnl_layers)

    def output_shapes(self):
        """Per-layer output shapes; raises ``ContractError`` at the first violation."""
        shape = self.input_shape
        if not shape or any(d <= 0 for d in shape):
            raise ContractError(f"input shape {shape} must be nonempty with positive dims")
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = _next_shape(i, layer, shape)
            shapes.append(shape)
        return shapes

    def validate(self):
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if not self.layers:
            raise ContractError("model has no layers")
        shapes = self.output_shapes()
        softmax_at = [i for i, layer in enumerate(self.layers) if layer.kind == "softmax"]
        if softmax_at != [len(self.layers) - 1]:
            raise ContractError("exactly one softmax head is required, as the last layer")
        if shapes[-1] != (self.num_classes,):
            raise ContractError(f"classification head has width {shapes[-1]}, expected ({self.num_classes},)")
        last = self.param_layers()[-1] if self.param_layers() else None
        if last is None or self.layers[last].kind != "dense":
            raise ContractError("the classification head must be a dense layer")
        prev = -1
        for idx in self.snnl_layers:
            if not 0 <= idx < len(self.layers) - 1:
                raise ContractError(f"snnl layer index {idx} out of range [0, {len(self.layers) - 1})")
            if idx <= prev:
                raise ContractError(f"snnl layer indices must be strictly increasing, got {self.snnl_layers}")
            prev = idx
        return self

    def param_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in PARAMETRIC]

    def param_shapes(self):
        """(name, shape) pairs in file order."""
        out = []
        for i in self.param_layers():
            layer = self.layers[i]
            if layer.kind == "dense":
                out.append((f"L{i}.weight", (layer.in_features, layer.out_features)))
            else:
                k = layer.kernel_size
                out.append((f"L{i}.weight", (layer.out_features, layer.in_features, k, k)))
            out.append((f"L{i}.bias", (layer.out_features,)))
        return out

    @property
    def param_count(self):
        return int(sum(int(np.prod(shape)) for _, shape in self.param_shapes()))

    def hidden_units(self):
        """(parametric layer, its activation layer, unit count) for every layer but the head.

        Units are dense outputs or conv channels; the activation layer is the first
        relu/sigmoid after the parametric layer.
        """
        params = self.param_layers()
        units = []
        for pos, i in enumerate(params[:-1]):
            stop = params[pos + 1]
            act = next((j for j in range(i + 1, stop) if self.layers[j].kind in ACTIVATIONS), None)
            if act is not None:
                units.append((i, act, self.layers[i].out_features))
        return units

    def entanglement_layers(self):
        """SNNL capture layers, or the penultimate activation when none are declared."""
        return self.snnl_layers or (self.penultimate_index(),)

    def penultimate_index(self):
        """Index of the last activation layer before the classification head."""
        head = self.param_layers()[-1]
        for j in range(head - 1, -1, -1):
            if self.layers[j].kind in ACTIVATIONS:
                return j
        raise ContractError("model has no hidden activation layer before its head")


def _next_shape(i, layer, shape):
    where = f"layer {i} ({layer.kind})"
    if layer.kind not in LAYER_KINDS:
        raise ContractError(f"{where}: unknown layer kind")
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_features or layer.out_features <= 0:
            raise ContractError(f"{where}: expects ({layer.in_features},) input, got {shape}")
        return (layer.out_features,)
    if layer.kind == "conv":
        k = layer.kernel_size
        if len(shape) != 3 or shape[0] != layer.in_features or k <= 0 or layer.out_features <= 0:
            raise ContractError(f"{where}: expects ({layer.in_features}, H, W) input, got {shape}")
        if layer.padding not in ("valid", "same"):
            raise ContractError(f"{where}: padding must be 'valid' or 'same'")
        if layer.padding == "same":
            return (layer.out_features, shape[1], shape[2])
        if shape[1] < k or shape[2] < k:
            raise ContractError(f"{where}: {shape[1]}x{shape[2]} input is smaller than the {k}x{k} kernel")
        return (layer.out_features, shape[1] - k + 1, shape[2] - k + 1)
    if layer.kind == "maxpool":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ContractError(f"{where}: expects (C, H>=2, W>=2) input, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dropout" and not 0.0 <= layer.rate < 1.0:
        raise ContractError(f"{where}: rate {layer.rate} outside [0, 1)")
    if layer.kind == "softmax" and len(shape) != 1:
        raise ContractError(f"{where}: expects flat logits, got {shape}")
    return shape


@dataclass
class Model:
    spec: ModelSpec
    params: dict
    masks: dict = field(default_factory=dict)
    training: bool = False

    def parameters(self):
        return [self.params[name] for name, _ in self.spec.param_shapes()]

    def apply_masks(self):
        """Re-zero pruned weights after an optimizer step."""
        for name, mask in self.masks.items():
            self.params[name].data *= mask

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.spec, params, {k: m.copy() for k, m in self.masks.items()}, self.training)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def build_model(spec, seed):
    """Fresh weights: He-uniform ahead of relu, Glorot-uniform elsewhere, zero biases."""
    spec.validate()
    rng = rng_stream(seed, "init")
    params = {}
    for i in spec.param_layers():
        layer = spec.layers[i]
        if layer.kind == "dense":
            shape = (layer.in_features, layer.out_features)
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            k2 = layer.kernel_size ** 2
            shape = (layer.out_features, layer.in_features, layer.kernel_size, layer.kernel_size)
            fan_in, fan_out = layer.in_features * k2, layer.out_features * k2
        nxt = next((spec.layers[j].kind for j in range(i + 1, len(spec.layers))
                    if spec.layers[j].kind in ACTIVATIONS + PARAMETRIC + ("softmax",)), None)
        limit = np.sqrt(6.0 / fan_in) if nxt == "relu" else np.sqrt(6.0 / (fan_in + fan_out))
        params[f"L{i}.weight"] = Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=f"L{i}.weight")
        params[f"L{i}.bias"] = Tensor(np.zeros(layer.out_features), requires_grad=True, name=f"L{i}.bias")
    return Model(spec, params)


def model_from_arrays(spec, arrays):
    """Model with the given weight arrays (name -> ndarray), checked against ``spec``."""
    spec.validate()
    params = {}
    for name, shape in spec.param_shapes():
        if name not in arrays:
            raise ContractError(f"missing weights for {name}")
        value = np.asarray(arrays[name], dtype=np.float32)
        if value.shape != shape:
            raise ContractError(f"{name}: weight shape {value.shape} does not match spec shape {shape}")
        params[name] = Tensor(value, requires_grad=True, name=name)
    return Model(spec, params)


def _as_input(spec, batch):
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    want = spec.input_shape
    if x.shape[1:] == want:
        return x
    if int(np.prod(x.shape[1:])) == int(np.prod(want)):
        return ad.reshape(x, (x.shape[0],) + want)
    raise ContractError(f"batch of shape {x.shape} does not match model input {want}")


def forward_with_activations(model, batch, training=None, rng=None, layers=None):
    """Logits (pre-softmax, shape (N, K)) and flattened activations at ``layers``.

    ``layers`` defaults to the spec's snnl layers.  Dropout is active only when
    ``training`` is on, and then needs ``rng``.
    """
    spec = model.spec
    training = model.training if training is None else training
    capture = spec.snnl_layers if layers is None else tuple(layers)
    h = _as_input(spec, batch)
    acts = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "softmax":
            break
        if layer.kind == "dense":
            h = ad.add(ad.matmul(h, model.params[f"L{i}.weight"]), model.params[f"L{i}.bias"])
        elif layer.kind == "conv":
            h = ad.conv2d(h, model.params[f"L{i}.weight"], model.params[f"L{i}.bias"], padding=layer.padding)
        elif layer.kind == "maxpool":
            h = ad.maxpool2d(h)
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "sigmoid":
            h = ad.sigmoid(h)
        elif layer.kind == "flatten":
            h = ad.flatten(h)
        elif layer.kind == "dropout" and training and layer.rate > 0:
            if rng is None:
                raise ContractError("dropout in training mode needs an rng")
            h = ad.dropout(h, layer.rate, rng)
        if i in capture:
            acts[i] = h if h.ndim == 2 else ad.flatten(h)
    return h, [acts[i] for i in capture]


def logits(model, inputs, batch_size=512):
    """Inference-mode logits as a numpy array."""
    inputs = np.asarray(inputs, dtype=np.float32)
    if len(inputs) == 0:
        return np.zeros((0, model.spec.num_classes), dtype=np.float32)
    out = []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            z, _ = forward_with_activations(model, inputs[start:start + batch_size], training=False, layers=())
            out.append(z.data)
    return np.concatenate(out)


def activations(model, inputs, layers, batch_size=512):
    """Inference-mode activations (numpy, one (N, features) array per layer)."""
    inputs = np.asarray(inputs, dtype=np.float32)
    chunks = [[] for _ in layers]
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            _, acts = forward_with_activations(model, inputs[start:start + batch_size], training=False, layers=layers)
            for bucket, a in zip(chunks, acts):
                bucket.append(a.data)
    return [np.concatenate(bucket) if bucket else np.zeros((0, 0), dtype=np.float32) for bucket in chunks]


def predict(model, inputs, batch_size=512):
    return np.argmax(logits(model, inputs, batch_size), axis=1)


def evaluate(model, dataset):
    """Fraction of samples whose argmax prediction equals the label."""
    if len(dataset) == 0:
        raise ContractError(f"evaluate: dataset {dataset.name!r} is empty")
    return float(np.mean(predict(model, dataset.inputs) == dataset.labels))


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def mnist_cnn_spec(side=28, num_classes=10, dropout=0.5):
    """conv32@5x5, pool, conv64@3x3, pool, dense128, dense K; SNNL after both convs and dense128."""
    L = LayerSpec
    conv_out = ((side - 4) // 2 - 2) // 2
    layers = [
        L.conv(1, 32, 5), L.relu(), L.maxpool(), L.dropout(dropout),
        L.conv(32, 64, 3), L.relu(), L.maxpool(), L.dropout(dropout),
        L.flatten(), L.dense(64 * conv_out * conv_out, 128), L.relu(), L.dropout(dropout),
        L.dense(128, num_classes), L.softmax(),
    ]
    return ModelSpec((1, side, side), layers, (1, 5, 10), num_classes).validate()


def small_cnn_spec(side=16, num_classes=10, dropout=0.0):
    L = LayerSpec
    conv_out = ((side - 2) // 2 - 2) // 2
    layers = [
        L.conv(1, 16, 3), L.relu(), L.maxpool(), L.dropout(dropout),
        L.conv(16, 32, 3), L.relu(), L.maxpool(), L.dropout(dropout),
        L.flatten(), L.dense(32 * conv_out * conv_out, 64), L.relu(), L.dropout(dropout),
        L.dense(64, num_classes), L.softmax(),
    ]
    return ModelSpec((1, side, side), layers, (1, 5, 10), num_classes).validate()


def mlp_spec(in_features, hidden=64, num_classes=10, depth=2, activation="relu", dropout=0.0):
    """``depth`` hidden dense layers, each followed by ``activation``; SNNL on every hidden layer."""
    L = LayerSpec
    act = L.relu if activation == "relu" else L.sigmoid
    layers, snnl = [L.flatten()], []
    width = in_features
    for _ in range(depth):
        layers += [L.dense(width, hidden), act()]
        snnl.append(len(layers) - 1)
        if dropout > 0:
            layers.append(L.dropout(dropout))
        width = hidden
    layers += [L.dense(width, num_classes), L.softmax()]
    return ModelSpec((in_features,), layers, tuple(snnl), num_classes).validate()


def toy_spec(hidden=3):
    """2-D input, one hidden relu layer, binary head."""
    L = LayerSpec
    return ModelSpec((2,), [L.dense(2, hidden), L.relu(), L.dense(hidden, 2), L.softmax()], (1,), 2).validate()


def toy_victim():
    """Hand-built watermarked toy network.

    Its class-1 logit is R(x1) + 2 R(x2) - R(x2 + 2) + 1 (class 0 stays at 0), which
    equals x1 + x2 - 1 on the unit square and x1 on the watermark line x2 = -1.
    """
    w1 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    b1 = np.array([0.0, 0.0, 2.0])
    w2 = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, -1.0]])
    b2 = np.array([0.0, 1.0])
    return model_from_arrays(toy_spec(), {"L0.weight": w1, "L0.bias": b1, "L2.weight": w2, "L2.bias": b2})


def spec_for(name, input_shape, num_classes, hidden=64, dropout=0.0):
    """Architecture by config name."""
    side = input_shape[-1]
    if name == "mnist_cnn":
        return mnist_cnn_spec(side, num_classes, dropout)
    if name == "small_cnn":
        return small_cnn_spec(side, num_classes, dropout)
    if name == "mlp":
        return mlp_spec(int(np.prod(input_shape)), hidden, num_classes, dropout=dropout)
    if name == "toy":
        return toy_spec()
    raise ContractError(f"unknown architecture {name!r}")
