"""Occlusion sensitivity: slide a filled box over the image and record score drops.

Heatmap cell (i, j) holds ``score(original) - score(occluded)`` for the box
whose top-left corner is the (i, j)-th grid position, so positive values mark
regions the target unit depends on.  Fill values are written into the raw
input tensor; apply any mean subtraction the model expects beforehand.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .heatmap import Heatmap
from .netrunner import ClassUnit, describe_target, forward, resolve_target, unit_value

WORKERS_ENV = "FEATVIZ_WORKERS"


@dataclass(frozen=True)
class SolidFill:
    """Constant fill; ``value`` is a scalar or one value per channel."""

    value: object = 0.5

    def describe(self):
        v = self.value
        return {"kind": "solid", "value": list(map(float, v)) if np.ndim(v) else float(v)}


@dataclass(frozen=True)
class RandomFill:
    """Uniform noise in [low, high), one independent patch per grid position."""

    seed: int = 0
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigurationError(f"random fill needs low < high, got [{self.low}, {self.high})")

    def describe(self):
        return {"kind": "random", "seed": int(self.seed), "low": self.low, "high": self.high}


@dataclass(frozen=True)
class OcclusionConfig:
    box: tuple = (3, 3)
    stride: tuple = (1, 1)
    fill: object = field(default_factory=SolidFill)
    target: object = None

    def __post_init__(self):
        box, stride = _pair(self.box), _pair(self.stride)
        if min(box) < 1:
            raise ConfigurationError(f"box extents must be >= 1, got {box}")
        if min(stride) < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "stride", stride)


def _pair(v):
    if np.isscalar(v):
        return (int(v), int(v))
    return tuple(int(a) for a in v)


def grid_shape(input_size, box, stride):
    (H, W), (bh, bw), (sy, sx) = _pair(input_size), _pair(box), _pair(stride)
    if bh > H or bw > W:
        raise ConfigurationError(f"occlusion box {(bh, bw)} larger than image {(H, W)}")
    return ((H - bh) // sy + 1, (W - bw) // sx + 1)


def occlusion_positions(input_size, box, stride):
    """Top-left corners of every occlusion box, row-major."""
    gh, gw = grid_shape(input_size, box, stride)
    sy, sx = _pair(stride)
    return [(i * sy, j * sx) for i in range(gh) for j in range(gw)]


def fill_patch(fill, index, channels, box):
    """The (channels, bh, bw) patch pasted at grid position ``index``."""
    bh, bw = box
    if isinstance(fill, RandomFill):
        rng = np.random.default_rng([int(fill.seed), int(index)])
        return rng.uniform(fill.low, fill.high, size=(channels, bh, bw)).astype(np.float32)
    value = np.asarray(fill.value, dtype=np.float32).reshape(-1)
    if value.size not in (1, channels):
        raise ConfigurationError(f"fill has {value.size} values for {channels} channels")
    return np.broadcast_to(value.reshape(-1, 1, 1), (channels, bh, bw)).astype(np.float32)


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {workers}")
    return workers


def occlusion_map(network, x, config, workers=None):
    """Occlusion heatmap for ``config.target`` (default: the top-scoring class).

    ``workers`` (or the FEATVIZ_WORKERS environment variable) sets how many
    threads evaluate grid positions; the result does not depend on it.
    """
    tape = forward(network, x)
    base = tape[0].input
    if base.shape[0] != 1:
        raise ShapeError("occlusion is defined for a single image (batch size 1)")
    target = config.target
    if target is None:
        target = ClassUnit(int(np.argmax(tape[network.score_layer].output.reshape(-1))))
    resolve_target(network, target)
    _, c, H, W = base.shape
    gh, gw = grid_shape((H, W), config.box, config.stride)
    positions = occlusion_positions((H, W), config.box, config.stride)
    reference = np.float32(unit_value(tape, target))
    bh, bw = config.box

    def drop(k):
        y, xx = positions[k]
        occluded = base.copy()
        occluded[0, :, y:y + bh, xx:xx + bw] = fill_patch(config.fill, k, c, config.box)
        return reference - np.float32(unit_value(forward(network, occluded), target))

    n = resolve_workers(workers)
    if n == 1:
        drops = [drop(k) for k in range(len(positions))]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            drops = list(pool.map(drop, range(len(positions))))
    values = np.array(drops, dtype=np.float32).reshape(gh, gw)
    meta = {"box": list(config.box), "stride": list(config.stride), "input_size": [H, W],
            "grid": [gh, gw], "sign": "score_drop", "fill": config.fill.describe(),
            "target": describe_target(target), "reference_score": float(reference)}
    return Heatmap(values, "occlusion", meta)
