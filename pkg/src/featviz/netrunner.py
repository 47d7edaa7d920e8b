"""Sequential CNN definition, forward execution with a recorded tape, FVNET I/O.

Every activation is kept as a 4-D tensor: ``Flatten`` produces
(n, c*h*w, 1, 1) and ``Dense`` consumes the row-major (c, h, w) flattening
of whatever precedes it, so a dense layer is exactly a 1x1 convolution over
flattened features.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, ConfigurationError, FormatError, ShapeChainError,
                     ShapeError, TruncatedError, UnknownLayerError)

FVNET_MAGIC = b"FVNETv1\n"


def _weights(a, ndim, name):
    a = np.array(a, dtype=np.float32, copy=True)
    if a.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains NaN or Inf")
    a.setflags(write=False)
    return a


def _pair(v):
    if np.isscalar(v):
        return (int(v), int(v))
    return tuple(int(a) for a in v)


@dataclass(frozen=True, eq=False)
class Conv:
    kernel: np.ndarray
    bias: np.ndarray = None
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)

    def __post_init__(self):
        kernel = _weights(self.kernel, 4, "conv kernel")
        bias = np.zeros(kernel.shape[0], np.float32) if self.bias is None else self.bias
        bias = _weights(np.reshape(bias, -1), 1, "conv bias")
        if bias.shape[0] != kernel.shape[0]:
            raise ShapeError(f"conv bias length {bias.shape[0]} != {kernel.shape[0]} kernels")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "pad", _pair(self.pad))

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.kernel.shape[1]:
            raise ShapeError(f"conv expects {self.kernel.shape[1]} input channels, got {c}")
        oh, ow = T.conv_output_hw((h, w), self.kernel.shape[2:], self.stride, self.pad)
        return (self.kernel.shape[0], oh, ow)

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.pad), None

    def blobs(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def hyper(self):
        return {"stride": list(self.stride), "pad": list(self.pad)}


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        w = _weights(self.weights, 2, "dense weights")
        b = np.zeros(w.shape[0], np.float32) if self.bias is None else self.bias
        b = _weights(np.reshape(b, -1), 1, "dense bias")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"dense bias length {b.shape[0]} != {w.shape[0]} outputs")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def output_shape(self, shape):
        size = int(np.prod(shape))
        if size != self.weights.shape[1]:
            raise ShapeError(
                f"dense expects {self.weights.shape[1]} inputs, predecessor flattens to {size}")
        return (self.weights.shape[0], 1, 1)

    def as_conv_kernel(self):
        """The weights viewed as a 1x1 convolution over flattened features."""
        return self.weights.reshape(*self.weights.shape, 1, 1)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1, 1, 1)
        return T.conv2d(flat, self.as_conv_kernel(), self.bias), None

    def blobs(self):
        return {"weights": self.weights, "bias": self.bias}

    def hyper(self):
        return {}


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, np.float32(0)), None

    def blobs(self):
        return {}

    def hyper(self):
        return {}


@dataclass(frozen=True)
class LeakyReLU:
    alpha: float = 0.01

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.where(x > 0, x, x * np.float32(self.alpha)).astype(np.float32), None

    def blobs(self):
        return {}

    def hyper(self):
        return {"alpha": float(self.alpha)}


@dataclass(frozen=True)
class MaxPool:
    window: tuple
    stride: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "window", _pair(self.window))
        object.__setattr__(self, "stride", _pair(self.stride if self.stride is not None
                                                 else self.window))

    def output_shape(self, shape):
        c, h, w = shape
        return (c, *T.conv_output_hw((h, w), self.window, self.stride, 0))

    def forward(self, x):
        return T.maxpool(x, self.window, self.stride)

    def blobs(self):
        return {}

    def hyper(self):
        return {"window": list(self.window), "stride": list(self.stride)}


@dataclass(frozen=True)
class AvgPool:
    window: tuple
    stride: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "window", _pair(self.window))
        object.__setattr__(self, "stride", _pair(self.stride if self.stride is not None
                                                 else self.window))

    def output_shape(self, shape):
        c, h, w = shape
        return (c, *T.conv_output_hw((h, w), self.window, self.stride, 0))

    def forward(self, x):
        return T.avgpool(x, self.window, self.stride), None

    def blobs(self):
        return {}

    def hyper(self):
        return {"window": list(self.window), "stride": list(self.stride)}


@dataclass(frozen=True)
class GlobalAvgPool:
    def output_shape(self, shape):
        return (shape[0], 1, 1)

    def forward(self, x):
        return T.avgpool(x, global_pool=True), None

    def blobs(self):
        return {}

    def hyper(self):
        return {}


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, shape):
        return (int(np.prod(shape)), 1, 1)

    def forward(self, x):
        return np.ascontiguousarray(x.reshape(x.shape[0], -1, 1, 1)), None

    def blobs(self):
        return {}

    def hyper(self):
        return {}


@dataclass(frozen=True)
class Softmax:
    """Softmax over all non-batch elements; allowed only as the final layer."""

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        z = x.reshape(x.shape[0], -1).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        z /= z.sum(axis=1, keepdims=True)
        return z.reshape(x.shape).astype(np.float32), None

    def blobs(self):
        return {}

    def hyper(self):
        return {}


LAYER_TYPES = {
    "conv": Conv, "dense": Dense, "relu": ReLU, "leaky_relu": LeakyReLU,
    "maxpool": MaxPool, "avgpool": AvgPool, "global_avgpool": GlobalAvgPool,
    "flatten": Flatten, "softmax": Softmax,
}
_TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def layer_type_name(layer):
    return _TYPE_NAMES[type(layer)]


@dataclass(frozen=True, eq=False)
class Network:
    """An immutable, shape-checked sequential chain of layers.

    ``input_shape`` is (channels, height, width); the batch extent is free.
    """

    layers: tuple
    input_shape: tuple
    labels: tuple = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ConfigurationError("a network needs at least one layer")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be 3 positive extents, got {self.input_shape}")
        shapes = [self.input_shape]
        for i, layer in enumerate(layers):
            if type(layer) not in _TYPE_NAMES:
                raise UnknownLayerError(f"unsupported layer object {layer!r}", i)
            if isinstance(layer, Softmax) and i != len(layers) - 1:
                raise ShapeChainError("softmax may only be the final layer", i)
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except (ShapeError, ConfigurationError) as exc:
                raise ShapeChainError(f"{layer_type_name(layer)}: {exc}", i) from exc
        object.__setattr__(self, "_shapes", tuple(shapes))
        if self.labels is not None and len(self.labels) != self.n_outputs:
            raise ConfigurationError(
                f"{len(self.labels)} labels for {self.n_outputs} network outputs")

    @property
    def shapes(self):
        """Activation shapes (c, h, w): the input followed by each layer's output."""
        return self._shapes

    @property
    def n_outputs(self):
        return int(np.prod(self._shapes[-1]))

    @property
    def score_layer(self):
        """Index of the layer whose output holds the pre-softmax class scores."""
        n = len(self.layers)
        return n - 2 if isinstance(self.layers[-1], Softmax) and n > 1 else n - 1

    def weights_digest(self):
        h = hashlib.sha256()
        for layer in self.layers:
            for blob in layer.blobs().values():
                h.update(blob.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class TapeEntry:
    input: np.ndarray
    output: np.ndarray
    switches: np.ndarray = None


@dataclass(frozen=True, eq=False)
class ForwardTape:
    """Inputs, outputs and max-pool switches of every layer for one forward pass."""

    network: Network
    entries: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def output(self):
        return self.entries[-1].output


@dataclass(frozen=True)
class ClassUnit:
    class_index: int


@dataclass(frozen=True)
class InternalUnit:
    layer_index: int
    channel: int
    y: int = 0
    x: int = 0


def forward(network, x):
    """Run ``x`` through ``network`` and record every layer on a ForwardTape."""
    x = T.as_tensor(x).copy()
    if x.shape[1:] != network.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != network input {network.input_shape}")
    x.setflags(write=False)
    entries = []
    for layer in network.layers:
        y, switches = layer.forward(x)
        y = np.ascontiguousarray(y, dtype=np.float32)
        y.setflags(write=False)
        entries.append(TapeEntry(x, y, switches))
        x = y
    return ForwardTape(network, tuple(entries))


def predict_scores(network, x):
    """Pre-softmax scores, shape (n, n_outputs)."""
    tape = forward(network, x)
    return tape[network.score_layer].output.reshape(tape.output.shape[0], -1)


def class_score(tape, class_index, batch=0):
    """Pre-softmax score of ``class_index``; a final Softmax layer is looked through."""
    scores = tape[tape.network.score_layer].output[batch].reshape(-1)
    if not 0 <= class_index < scores.shape[0]:
        raise IndexError(f"class index {class_index} outside [0, {scores.shape[0]})")
    return float(scores[class_index])


def resolve_target(network, target):
    """Map a target to ``(layer_index, (channel, y, x))`` and bounds-check it."""
    if isinstance(target, ClassUnit):
        layer = network.score_layer
        c, h, w = network.shapes[layer + 1]
        idx = int(target.class_index)
        if not 0 <= idx < c * h * w:
            raise IndexError(f"class index {idx} outside [0, {c * h * w})")
        return layer, tuple(int(v) for v in np.unravel_index(idx, (c, h, w)))
    if isinstance(target, InternalUnit):
        layer = int(target.layer_index)
        if not 0 <= layer < len(network.layers):
            raise IndexError(f"layer index {layer} outside [0, {len(network.layers)})")
        if isinstance(network.layers[layer], Softmax):
            raise ConfigurationError("targets are read before softmax, not from it")
        c, h, w = network.shapes[layer + 1]
        pos = (int(target.channel), int(target.y), int(target.x))
        if not all(0 <= p < e for p, e in zip(pos, (c, h, w))):
            raise IndexError(f"unit {pos} outside layer {layer} output extents {(c, h, w)}")
        return layer, pos
    raise TypeError(f"unsupported target {target!r}")


def describe_target(target):
    if isinstance(target, ClassUnit):
        return {"kind": "class", "class_index": int(target.class_index)}
    return {"kind": "unit", "layer_index": target.layer_index, "channel": target.channel,
            "y": target.y, "x": target.x}


def unit_value(tape, target, batch=0):
    layer, (c, y, x) = resolve_target(tape.network, target)
    return tape[layer].output[batch, c, y, x]


# -- FVNET serialization ------------------------------------------------------

def save_network(network):
    """Serialize to FVNET bytes: magic, u32 header length, JSON header, float32 blobs."""
    layers, payload = [], []
    for layer in network.layers:
        entry = {"type": layer_type_name(layer), **layer.hyper()}
        blobs = []
        for name, arr in layer.blobs().items():
            blobs.append({"name": name, "shape": list(arr.shape), "count": int(arr.size)})
            payload.append(arr.astype("<f4").tobytes())
        if blobs:
            entry["blobs"] = blobs
        layers.append(entry)
    header = {"format": "FVNETv1", "input_shape": list(network.input_shape), "layers": layers}
    if network.labels is not None:
        header["labels"] = list(network.labels)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return FVNET_MAGIC + struct.pack("<I", len(head)) + head + b"".join(payload)


_BLOB_NAMES = {"conv": ("kernel", "bias"), "dense": ("weights", "bias")}


def load_network(blob):
    """Decode and fully validate FVNET bytes."""
    blob = bytes(blob)
    if blob[:len(FVNET_MAGIC)] != FVNET_MAGIC:
        raise BadMagicError(f"expected magic {FVNET_MAGIC!r}, got {blob[:len(FVNET_MAGIC)]!r}")
    pos = len(FVNET_MAGIC)
    if len(blob) < pos + 4:
        raise TruncatedError("missing header length")
    (hlen,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    if len(blob) < pos + hlen:
        raise TruncatedError(f"header declares {hlen} bytes, only {len(blob) - pos} present")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    pos += hlen
    if not isinstance(header, dict) or "layers" not in header or "input_shape" not in header:
        raise FormatError("header must be an object with 'input_shape' and 'layers'")

    layers = []
    for i, spec in enumerate(header["layers"]):
        kind = spec.get("type")
        if kind not in LAYER_TYPES:
            raise UnknownLayerError(f"unknown layer type {kind!r}", i)
        arrays = {}
        for b in spec.get("blobs", []):
            count = int(b["count"])
            if int(np.prod(b["shape"], dtype=np.int64)) != count:
                raise FormatError(f"blob {b['name']!r} shape {b['shape']} != count {count}", i)
            end = pos + 4 * count
            if end > len(blob):
                raise TruncatedError(f"blob {b['name']!r} runs past end of file", i)
            arrays[b["name"]] = np.frombuffer(blob[pos:end], "<f4").reshape(b["shape"])
            pos = end
        need = _BLOB_NAMES.get(kind, ())
        if set(arrays) != set(need):
            raise FormatError(f"{kind} needs blobs {list(need)}, got {sorted(arrays)}", i)
        hyper = {k: v for k, v in spec.items() if k not in ("type", "blobs")}
        try:
            layers.append(LAYER_TYPES[kind](**arrays, **hyper))
        except TypeError as exc:
            raise FormatError(f"bad hyperparameters for {kind}: {exc}", i) from exc
        except ShapeError as exc:
            raise ShapeChainError(str(exc), i) from exc
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after weight blobs")
    try:
        return Network(tuple(layers), tuple(header["input_shape"]), header.get("labels"))
    except ConfigurationError as exc:
        raise FormatError(str(exc)) from exc
