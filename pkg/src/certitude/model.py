"""Network representation, specification matrices, presets and manifest I/O."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, ValidationError

MANIFEST_MAGIC = "CERTNET/1"


class Affine:
    """Fully connected layer z = W h + b with W of shape [out, in]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.ndim != 1:
            raise DimensionError(f"affine: weight {weight.shape}, bias {bias.shape}")
        if bias.shape[0] != weight.shape[0]:
            raise DimensionError(
                f"affine: bias length {bias.shape[0]} != output dim {weight.shape[0]}"
            )
        self.weight = weight
        self.bias = bias

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if len(in_shape) != 1 or flat != self.weight.shape[1]:
            raise DimensionError(
                f"affine expects flat input of {self.weight.shape[1]}, got {in_shape}"
            )
        return (self.weight.shape[0],)


class Conv2D:
    """Valid (no padding) strided cross-correlation with per-filter bias."""

    def __init__(self, kernel: Tensor, bias: Tensor, stride: int):
        if kernel.ndim != 4 or bias.ndim != 1:
            raise DimensionError(f"conv: kernel {kernel.shape}, bias {bias.shape}")
        if bias.shape[0] != kernel.shape[0]:
            raise DimensionError(
                f"conv: bias length {bias.shape[0]} != filter count {kernel.shape[0]}"
            )
        self.kernel = kernel
        self.bias = bias
        self.stride = int(stride)

    def params(self):
        return [self.kernel, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.kernel.shape[1]:
            raise DimensionError(
                f"conv expects [C,H,W] with C={self.kernel.shape[1]}, got {in_shape}"
            )
        h, w = ad.conv_output_hw(in_shape[1:], self.kernel.shape[2:], self.stride)
        return (self.kernel.shape[0], h, w)


class ReLU:
    def params(self):
        return []

    def out_shape(self, in_shape):
        return tuple(in_shape)


class Flatten:
    def params(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Network:
    """Ordered layer list with validated shapes; final layer is Affine."""

    def __init__(self, layers, input_shape, num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self._validate()

    def _validate(self):
        if not self.layers or not isinstance(self.layers[-1], Affine):
            raise ValidationError("network must end with an affine layer")
        shapes = [self.input_shape]
        prev_param = False
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ReLU):
                if not prev_param:
                    raise ValidationError(
                        f"layer {i}: activation must directly follow an affine/conv layer"
                    )
                prev_param = False
            elif isinstance(layer, (Affine, Conv2D)):
                if prev_param:
                    # two parameterized layers in a row are fine; only relu/relu is not
                    pass
                prev_param = True
            shapes.append(layer.out_shape(shapes[-1]))
        if isinstance(self.layers[-1], ReLU):
            raise ValidationError("network must not end with an activation")
        if shapes[-1] != (self.num_classes,):
            raise ValidationError(
                f"final layer produces {shapes[-1]}, expected ({self.num_classes},)"
            )
        # per-layer output shapes (per example, no batch axis)
        self.shapes = shapes

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def hidden_units(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes[1:-1])


def forward(net: Network, x: Tensor) -> Tensor:
    """Logits for a batch x of shape [B, *input_shape]."""
    if tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(f"input {x.shape[1:]} != network input {net.input_shape}")
    h = x
    for layer in net.layers:
        if isinstance(layer, Affine):
            h = ad.add_bias(ad.matmul(h, ad.transpose(layer.weight)), layer.bias)
        elif isinstance(layer, Conv2D):
            h = ad.add_bias(ad.conv2d(h, layer.kernel, layer.stride), layer.bias, axis=1)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        elif isinstance(layer, Flatten):
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        else:
            raise ContractError(f"unknown layer {type(layer).__name__}")
    return h


def spec_matrix(y: int, n_classes: int) -> np.ndarray:
    """Margin specification matrix for label y: row i is e_y - e_i, row y is 0."""
    y = int(y)
    if not 0 <= y < n_classes:
        raise IndexError(f"label {y} out of range [0, {n_classes})")
    c = -np.eye(n_classes)
    c[:, y] += 1.0
    c[y, :] = 0.0
    return c


def spec_matrices(labels, n_classes: int) -> np.ndarray:
    """Stacked spec matrices [B, n, n] for a label vector."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"label out of range [0, {n_classes})")
    b = labels.shape[0]
    c = np.broadcast_to(-np.eye(n_classes), (b, n_classes, n_classes)).copy()
    c[np.arange(b), :, labels] += 1.0
    c[np.arange(b), labels, :] = 0.0
    return c


def merge_spec_into_last_layer(net: Network, c: np.ndarray) -> Network:
    """Replace the final affine (W, b) by (C W, C b)."""
    last = net.layers[-1]
    if not isinstance(last, Affine):
        raise ContractError("final layer must be affine to merge a specification")
    c = np.asarray(c, dtype=last.weight.data.dtype)
    if c.shape != (net.num_classes, net.num_classes):
        raise DimensionError(f"spec matrix {c.shape} != ({net.num_classes},)*2")
    merged = Affine(Tensor(c @ last.weight.data), Tensor(c @ last.bias.data))
    return Network(net.layers[:-1] + [merged], net.input_shape, net.num_classes)


def init_params(net: Network, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    for layer in net.layers:
        if isinstance(layer, Affine):
            fan_in = layer.weight.shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            layer.weight.data = rng.uniform(-bound, bound, layer.weight.shape).astype(dtype)
            layer.bias.data = np.zeros(layer.bias.shape, dtype=dtype)
        elif isinstance(layer, Conv2D):
            f, c, kh, kw = layer.kernel.shape
            bound = 1.0 / np.sqrt(c * kh * kw)
            layer.kernel.data = rng.uniform(-bound, bound, layer.kernel.shape).astype(dtype)
            layer.bias.data = np.zeros(layer.bias.shape, dtype=dtype)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# Small convolutional families (filters, kernel, stride per conv; then FC widths).
_CONV_PRESETS = {
    "A": ([(4, 4, 2), (8, 4, 2)], [128]),
    "B": ([(8, 4, 2), (16, 4, 2)], [256]),
    "C": ([(4, 3, 1), (8, 3, 1), (8, 4, 4)], [64]),
    "G": ([(4, 3, 1), (4, 4, 2), (8, 3, 1), (8, 4, 2)], [256, 256]),
}
_MLP_HIDDEN = [128, 128]


def preset_names():
    return ["mlp"] + sorted(_CONV_PRESETS)


def _placeholder(shape):
    return Tensor(np.zeros(shape, dtype=ad.default_dtype()), requires_grad=True)


def build_preset(name: str, input_shape=(1, 28, 28), num_classes: int = 10,
                 seed: int | None = None) -> Network:
    """Construct a named architecture; pass a seed to initialize parameters."""
    key = name.strip()
    layers: list = []
    if key.lower() == "mlp":
        flat = int(np.prod(input_shape))
        dims = [flat] + list(_MLP_HIDDEN) + [num_classes]
        if len(input_shape) > 1:
            layers.append(Flatten())
        for i in range(len(dims) - 1):
            layers.append(Affine(_placeholder((dims[i + 1], dims[i])), _placeholder((dims[i + 1],))))
            if i < len(dims) - 2:
                layers.append(ReLU())
    elif key.upper() in _CONV_PRESETS:
        convs, fcs = _CONV_PRESETS[key.upper()]
        if len(input_shape) != 3:
            raise ValidationError(f"preset {key} needs [C,H,W] input, got {input_shape}")
        c, h, w = input_shape
        for filters, k, s in convs:
            layers.append(Conv2D(_placeholder((filters, c, k, k)), _placeholder((filters,)), s))
            layers.append(ReLU())
            h, w = ad.conv_output_hw((h, w), (k, k), s)
            c = filters
        layers.append(Flatten())
        prev = c * h * w
        for width in fcs:
            layers.append(Affine(_placeholder((width, prev)), _placeholder((width,))))
            layers.append(ReLU())
            prev = width
        layers.append(Affine(_placeholder((num_classes, prev)), _placeholder((num_classes,))))
    else:
        raise ValidationError(f"unknown preset {name!r}; available: {preset_names()}")
    net = Network(layers, input_shape, num_classes)
    if seed is not None:
        init_params(net, seed)
    return net


# ---------------------------------------------------------------------------
# manifest format: text header + hex-encoded little-endian f64 payloads
# ---------------------------------------------------------------------------

def save_model(net: Network, path: str) -> None:
    lines = [MANIFEST_MAGIC]
    lines.append("input_shape " + " ".join(str(s) for s in net.input_shape))
    lines.append(f"num_classes {net.num_classes}")
    lines.append(f"layers {len(net.layers)}")
    tensors = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            lines.append(f"layer {i} affine out {layer.weight.shape[0]} in {layer.weight.shape[1]}")
            tensors.append((i, "weight", layer.weight))
            tensors.append((i, "bias", layer.bias))
        elif isinstance(layer, Conv2D):
            f, c, kh, kw = layer.kernel.shape
            lines.append(f"layer {i} conv2d filters {f} channels {c} kernel {kh} {kw} stride {layer.stride}")
            tensors.append((i, "kernel", layer.kernel))
            tensors.append((i, "bias", layer.bias))
        elif isinstance(layer, ReLU):
            lines.append(f"layer {i} relu")
        elif isinstance(layer, Flatten):
            lines.append(f"layer {i} flatten")
        else:
            raise ContractError(f"cannot serialize layer {type(layer).__name__}")
    lines.append(f"tensors {len(tensors)}")
    for i, name, t in tensors:
        payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes().hex()
        lines.append(f"tensor {i} {name} shape " + " ".join(str(s) for s in t.shape))
        lines.append("hex " + payload)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


class _ManifestReader:
    def __init__(self, path):
        with open(path) as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0
        self.path = path

    def next(self, expect: str | None = None) -> list[str]:
        if self.pos >= len(self.lines):
            raise FormatError(f"{self.path}: unexpected end of file at line {self.pos + 1}")
        line = self.lines[self.pos]
        self.pos += 1
        parts = line.split()
        if expect is not None and (not parts or parts[0] != expect):
            raise FormatError(
                f"{self.path}:{self.pos}: expected {expect!r}, got {line[:40]!r}"
            )
        return parts

    def ints(self, parts, start, n, what):
        try:
            vals = [int(p) for p in parts[start : start + n]]
        except (ValueError, IndexError):
            raise FormatError(f"{self.path}:{self.pos}: bad {what} in {' '.join(parts)!r}") from None
        if len(vals) != n:
            raise FormatError(f"{self.path}:{self.pos}: expected {n} integers for {what}")
        return vals


def load_model(path: str) -> Network:
    r = _ManifestReader(path)
    magic = r.next()
    if magic != [MANIFEST_MAGIC]:
        raise FormatError(f"{path}:1: bad magic {' '.join(magic)!r}, expected {MANIFEST_MAGIC!r}")
    shape_parts = r.next("input_shape")
    input_shape = tuple(r.ints(shape_parts, 1, len(shape_parts) - 1, "input_shape"))
    num_classes = r.ints(r.next("num_classes"), 1, 1, "num_classes")[0]
    n_layers = r.ints(r.next("layers"), 1, 1, "layer count")[0]

    layers: list = []
    slots: dict[tuple[int, str], tuple] = {}
    for i in range(n_layers):
        parts = r.next("layer")
        idx = r.ints(parts, 1, 1, "layer index")[0]
        if idx != i:
            raise FormatError(f"{path}:{r.pos}: layer index {idx}, expected {i}")
        kind = parts[2] if len(parts) > 2 else ""
        if kind == "affine":
            if parts[3] != "out" or parts[5] != "in":
                raise FormatError(f"{path}:{r.pos}: malformed affine header")
            out_d = r.ints(parts, 4, 1, "affine out")[0]
            in_d = r.ints(parts, 6, 1, "affine in")[0]
            layer = Affine(_placeholder((out_d, in_d)), _placeholder((out_d,)))
            slots[(i, "weight")] = (layer.weight, (out_d, in_d))
            slots[(i, "bias")] = (layer.bias, (out_d,))
        elif kind == "conv2d":
            if parts[3] != "filters" or parts[5] != "channels" or parts[7] != "kernel" or parts[10] != "stride":
                raise FormatError(f"{path}:{r.pos}: malformed conv2d header")
            f = r.ints(parts, 4, 1, "filters")[0]
            c = r.ints(parts, 6, 1, "channels")[0]
            kh, kw = r.ints(parts, 8, 2, "kernel size")
            stride = r.ints(parts, 11, 1, "stride")[0]
            layer = Conv2D(_placeholder((f, c, kh, kw)), _placeholder((f,)), stride)
            slots[(i, "kernel")] = (layer.kernel, (f, c, kh, kw))
            slots[(i, "bias")] = (layer.bias, (f,))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise FormatError(f"{path}:{r.pos}: unknown layer kind {kind!r}")
        layers.append(layer)

    n_tensors = r.ints(r.next("tensors"), 1, 1, "tensor count")[0]
    seen = set()
    for _ in range(n_tensors):
        parts = r.next("tensor")
        idx = r.ints(parts, 1, 1, "tensor layer index")[0]
        name = parts[2] if len(parts) > 2 else ""
        if len(parts) < 4 or parts[3] != "shape":
            raise FormatError(f"{path}:{r.pos}: malformed tensor header")
        shape = tuple(r.ints(parts, 4, len(parts) - 4, "tensor shape"))
        key = (idx, name)
        if key not in slots:
            raise ValidationError(f"{path}:{r.pos}: tensor {key} does not match any layer slot")
        if key in seen:
            raise ValidationError(f"{path}:{r.pos}: duplicate tensor {key}")
        target, want_shape = slots[key]
        if shape != want_shape:
            raise ValidationError(
                f"{path}:{r.pos}: tensor {key} shape {shape}, architecture says {want_shape}"
            )
        hex_parts = r.next("hex")
        payload = hex_parts[1] if len(hex_parts) == 2 else ""
        try:
            raw = bytes.fromhex(payload)
        except ValueError:
            raise FormatError(f"{path}:{r.pos}: invalid hex payload") from None
        want_bytes = int(np.prod(shape)) * 8
        if len(raw) != want_bytes:
            raise FormatError(
                f"{path}:{r.pos}: payload is {len(raw)} bytes, shape {shape} needs {want_bytes}"
            )
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
        target.data = arr.astype(ad.default_dtype())
        seen.add(key)
    if seen != set(slots):
        missing = sorted(set(slots) - seen)
        raise ValidationError(f"{path}: missing tensors {missing}")
    return Network(layers, input_shape, num_classes)
