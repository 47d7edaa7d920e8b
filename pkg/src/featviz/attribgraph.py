"""Backward attribution through a recorded forward pass.

Deconvnet, Backpropagation (saliency), Guided Backpropagation and epsilon
relevance propagation differ only in how a signal crosses ReLUs and
convolution/dense layers.  :func:`attribute` walks the tape from the target
unit back to the input applying one :class:`ReluRule` and one conv rule.
"""

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .heatmap import Heatmap
from .netrunner import (AvgPool, ClassUnit, Conv, Dense, Flatten, GlobalAvgPool, InternalUnit,
                        LeakyReLU, MaxPool, ReLU, Softmax, describe_target, forward,
                        layer_type_name, resolve_target)

DEFAULT_EPSILON = 1e-3


class ReluRule(enum.Enum):
    BACKPROP = "backprop"
    DECONVNET = "deconvnet"
    GUIDED = "guided"


@dataclass(frozen=True)
class Gradient:
    """Propagate through linear layers with the exact transposed operator."""

    name = "gradient"


@dataclass(frozen=True)
class LrpEpsilon:
    """Epsilon-stabilized relevance redistribution proportional to x_i * w_ij."""

    epsilon: float = DEFAULT_EPSILON
    name = "lrp"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class AttributionConfig:
    relu_rule: ReluRule = ReluRule.BACKPROP
    conv_rule: object = field(default_factory=Gradient)
    target: object = None

    def __post_init__(self):
        object.__setattr__(self, "relu_rule", ReluRule(self.relu_rule))
        if not isinstance(self.conv_rule, (Gradient, LrpEpsilon)):
            raise ConfigurationError(f"unknown conv rule {self.conv_rule!r}")

    def describe(self):
        doc = {"relu_rule": self.relu_rule.value, "conv_rule": self.conv_rule.name}
        if isinstance(self.conv_rule, LrpEpsilon):
            doc["epsilon"] = self.conv_rule.epsilon
        if self.target is not None:
            doc["target"] = describe_target(self.target)
        return doc


@dataclass(frozen=True, eq=False)
class AttributionMap:
    values: np.ndarray
    config: AttributionConfig
    target: object

    def to_fvt(self):
        return T.save_fvt(self.values)

    def sidecar(self):
        doc = {"shape": list(self.values.shape), **self.config.describe()}
        doc["target"] = describe_target(self.target)
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _gate(v, alpha):
    if alpha == 0:
        return (v > 0).astype(np.float32)
    return np.where(v > 0, np.float32(1), np.float32(alpha))


def relu_backward(rule, forward_input, upstream, alpha=0.0):
    """Carry ``upstream`` back through a (leaky) ReLU.

    Backprop masks by the forward input sign, Deconvnet by the sign of the
    backward signal itself, Guided by both.  For a leaky ReLU a closed gate
    passes ``alpha`` instead of 0.
    """
    rule = ReluRule(rule)
    x = np.asarray(forward_input, dtype=np.float32)
    g = np.asarray(upstream, dtype=np.float32)
    if x.shape != g.shape:
        raise ShapeError(f"forward input shape {x.shape} != upstream shape {g.shape}")
    if rule is ReluRule.BACKPROP:
        return g * _gate(x, alpha)
    if rule is ReluRule.DECONVNET:
        return g * _gate(g, alpha)
    return g * _gate(x, alpha) * _gate(g, alpha)


def _linear_params(layer, forward_input):
    """(kernel, bias, stride, pad, input viewed as NCHW for that kernel)."""
    if isinstance(layer, Conv):
        return layer.kernel, layer.bias, layer.stride, layer.pad, forward_input
    if isinstance(layer, Dense):
        flat = forward_input.reshape(forward_input.shape[0], -1, 1, 1)
        return layer.as_conv_kernel(), layer.bias, (1, 1), (0, 0), flat
    raise TypeError(f"{layer_type_name(layer)} is not a linear layer")


def conv_backward(rule, layer, forward_input, upstream):
    """Carry ``upstream`` back through a Conv or Dense layer under ``rule``.

    For :class:`LrpEpsilon`, input i receives
    ``sum_j x_i w_ij / (z_j + eps*sign(z_j)) * R_j`` with sign(0) = +1; the
    bias enters z_j but takes no relevance.
    """
    forward_input = np.asarray(forward_input, dtype=np.float32)
    kernel, bias, stride, pad, x = _linear_params(layer, forward_input)
    out_shape = (x.shape[0], kernel.shape[0],
                 *T.conv_output_hw(x.shape[2:], kernel.shape[2:], stride, pad))
    upstream = np.asarray(upstream, dtype=np.float32)
    if upstream.size != np.prod(out_shape):
        raise ShapeError(f"upstream shape {upstream.shape} != layer output {out_shape}")
    upstream = upstream.reshape(out_shape)
    if isinstance(rule, Gradient):
        g = T._conv_adjoint64(kernel, upstream, x.shape, stride, pad)
    elif isinstance(rule, LrpEpsilon):
        z = T._conv_forward64(x, kernel, bias, stride, pad)
        denom = z + rule.epsilon * np.where(z >= 0, 1.0, -1.0)
        s = np.asarray(upstream, dtype=np.float64) / denom
        g = x.astype(np.float64) * T._conv_adjoint64(kernel, s, x.shape, stride, pad)
    else:
        raise ConfigurationError(f"unknown conv rule {rule!r}")
    return g.reshape(forward_input.shape).astype(np.float32)


def avgpool_backward(rule, layer, forward_input, upstream):
    """Carry ``upstream`` back through an average pool.

    Gradients spread uniformly.  Relevance treats the pool as a linear layer
    with weights 1/|window| under the epsilon rule, so each input's share is
    proportional to its contribution to the mean.
    """
    x = np.asarray(forward_input, dtype=np.float32)
    if isinstance(layer, GlobalAvgPool):
        window = stride = x.shape[2:]
    else:
        window, stride = layer.window, layer.stride
    if isinstance(rule, LrpEpsilon):
        z = T._avgpool64(x, window, stride)
        s = np.asarray(upstream, dtype=np.float64) / (z + rule.epsilon * np.where(z >= 0, 1.0, -1.0))
        g = x.astype(np.float64) * T._avgpool_adjoint64(s, window, stride, x.shape)
    else:
        g = T._avgpool_adjoint64(np.asarray(upstream, dtype=np.float32), window, stride, x.shape)
    return g.astype(np.float32)


def propagate(tape, start_layer, upstream, relu_rule=ReluRule.BACKPROP, conv_rule=None):
    """Push ``upstream`` (shaped like layer ``start_layer``'s output) back to the input."""
    conv_rule = Gradient() if conv_rule is None else conv_rule
    relu_rule = ReluRule(relu_rule)
    layers = tape.network.layers
    g = np.asarray(upstream, dtype=np.float32).reshape(tape[start_layer].output.shape)
    for i in range(start_layer, -1, -1):
        layer, entry = layers[i], tape[i]
        if isinstance(layer, ReLU):
            g = relu_backward(relu_rule, entry.input, g)
        elif isinstance(layer, LeakyReLU):
            g = relu_backward(relu_rule, entry.input, g, alpha=layer.alpha)
        elif isinstance(layer, (Conv, Dense)):
            g = conv_backward(conv_rule, layer, entry.input, g)
        elif isinstance(layer, MaxPool):
            g = T.maxunpool(g, entry.switches, entry.input.shape)
        elif isinstance(layer, (AvgPool, GlobalAvgPool)):
            g = avgpool_backward(conv_rule, layer, entry.input, g)
        elif isinstance(layer, Flatten):
            g = g.reshape(entry.input.shape)
        elif isinstance(layer, Softmax):
            if i != len(layers) - 1:
                raise ConfigurationError(f"softmax at layer {i} is not the final layer")
            # targets are pre-softmax scores, nothing to undo
        else:
            raise TypeError(f"no backward rule for {layer!r}")
    return g


def attribute(network, x, config, tape=None):
    """Per-pixel contribution map of ``config.target`` for a single image.

    Gradient-rule runs seed the target with 1.0; relevance runs seed it with
    the unit's own forward activation.  All other units start at zero.
    """
    if config.target is None:
        raise ConfigurationError("attribution needs a target unit")
    if tape is None:
        tape = forward(network, x)
    if tape[0].input.shape[0] != 1:
        raise ShapeError("attribution is defined for a single image (batch size 1)")
    layer, (c, y, xx) = resolve_target(network, config.target)
    seed = np.zeros(tape[layer].output.shape, np.float32)
    if isinstance(config.conv_rule, LrpEpsilon):
        seed[0, c, y, xx] = tape[layer].output[0, c, y, xx]
    else:
        seed[0, c, y, xx] = 1.0
    values = propagate(tape, layer, seed, config.relu_rule, config.conv_rule)
    values.setflags(write=False)
    return AttributionMap(values, config, config.target)


def saliency(network, x, class_index, relu_rule=ReluRule.BACKPROP, conv_rule=None):
    """Shorthand for :func:`attribute` on a class score."""
    cfg = AttributionConfig(relu_rule, conv_rule or Gradient(), ClassUnit(class_index))
    return attribute(network, x, cfg)


def _cam_tail(network):
    layers = network.layers
    gaps = [i for i, l in enumerate(layers) if isinstance(l, GlobalAvgPool)]
    if not gaps:
        raise ConfigurationError("CAM needs a GlobalAvgPool layer before the output layer")
    gap = gaps[-1]
    rest = [l for l in layers[gap + 1:] if not isinstance(l, Flatten)]
    if rest and isinstance(rest[-1], Softmax):
        rest = rest[:-1]
    if len(rest) != 1 or not isinstance(rest[0], Dense):
        names = [layer_type_name(l) for l in layers[gap + 1:]]
        raise ConfigurationError(
            f"CAM needs GlobalAvgPool -> [Flatten] -> Dense [-> Softmax] at the tail, "
            f"found global_avgpool -> {' -> '.join(names) or 'nothing'}")
    return gap, rest[0]


def cam(network, x, class_index):
    """Class activation map: output-layer weights applied to the maps entering GAP.

    Returned at feature-map resolution; ``meta['scale']`` gives the
    input-pixels-per-cell factor along (y, x) for upsampling.
    """
    gap, dense = _cam_tail(network)
    if not 0 <= class_index < dense.weights.shape[0]:
        raise IndexError(f"class index {class_index} outside [0, {dense.weights.shape[0]})")
    tape = forward(network, x)
    if tape[0].input.shape[0] != 1:
        raise ShapeError("CAM is defined for a single image (batch size 1)")
    fmaps = tape[gap].input[0].astype(np.float64)
    w = dense.weights[class_index].astype(np.float64)
    values = np.tensordot(w, fmaps, axes=(0, 0))
    _, H, W = network.input_shape
    fh, fw = fmaps.shape[1:]
    meta = {"class_index": int(class_index), "feature_shape": [fh, fw],
            "input_shape": [H, W], "scale": [H / fh, W / fw],
            "bias": float(dense.bias[class_index])}
    return Heatmap(values.astype(np.float32), "cam", meta)
