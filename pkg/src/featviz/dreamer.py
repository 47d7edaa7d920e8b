"""Input reconstruction by gradient ascent in input space.

Two objectives are supported: driving one unit as high as possible
(activation maximization) and matching a reference code at some layer
(representation inversion, squared Euclidean loss).  Both can be combined
with an L_p penalty and a smoothed total-variation penalty.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .attribgraph import Gradient, ReluRule, propagate
from .errors import ConfigurationError, NonFiniteError, NumericalError, ShapeError
from .netrunner import describe_target, forward, resolve_target
from .tensor import as_tensor

TV_DELTA = 1e-8


@dataclass(frozen=True)
class MaximizeUnit:
    target: object


@dataclass(frozen=True, eq=False)
class MatchRepresentation:
    layer_index: int
    reference: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reference", as_tensor(self.reference).copy())


@dataclass(frozen=True)
class RegConfig:
    lambda_p: float = 0.0
    p: float = 6.0
    lambda_tv: float = 0.0

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_tv < 0:
            raise ConfigurationError("regularizer weights must be >= 0")
        if self.p < 1:
            raise ConfigurationError(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class Zeros:
    def make(self, shape):
        return np.zeros(shape, np.float32)


@dataclass(frozen=True)
class Constant:
    value: float

    def make(self, shape):
        return np.full(shape, self.value, np.float32)


@dataclass(frozen=True)
class RandomUniform:
    seed: int = 0
    low: float = 0.0
    high: float = 1.0

    def make(self, shape):
        rng = np.random.default_rng(int(self.seed))
        return rng.uniform(self.low, self.high, size=shape).astype(np.float32)


@dataclass(frozen=True)
class OptConfig:
    """Fixed-step gradient ascent settings.

    ``schedule``, if given, maps the step index to a step size and overrides
    ``step_size``.  ``record_every=k`` snapshots the iterate after every k-th
    step; 0 keeps only the final image.  ``init`` may also be an explicit
    tensor.
    """

    steps: int = 200
    step_size: float = 0.1
    init: object = field(default_factory=Zeros)
    record_every: int = 0
    schedule: object = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if not self.step_size > 0:
            raise ConfigurationError(f"step_size must be > 0, got {self.step_size}")
        if self.record_every < 0:
            raise ConfigurationError("record_every must be >= 0")


@dataclass(frozen=True, eq=False)
class Reconstruction:
    final: np.ndarray
    trajectory: list
    loss_history: list

    def manifest(self, objective, reg, opt):
        doc = {"objective": describe_objective(objective),
               "reg": {"lambda_p": reg.lambda_p, "p": reg.p, "lambda_tv": reg.lambda_tv},
               "opt": {"steps": opt.steps, "step_size": opt.step_size,
                       "record_every": opt.record_every, "init": repr(opt.init)},
               "snapshots": [step for step, _ in self.trajectory],
               "loss_history": [float(v) for v in self.loss_history]}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def describe_objective(objective):
    if isinstance(objective, MaximizeUnit):
        return {"kind": "maximize", "target": describe_target(objective.target)}
    return {"kind": "match", "layer_index": objective.layer_index,
            "reference_shape": list(objective.reference.shape)}


def lp_penalty(x, p):
    """``sum |x|^p`` and its gradient ``p |x|^(p-1) sign(x)`` (0 at x = 0)."""
    if p < 1:
        raise ConfigurationError(f"p must be >= 1, got {p}")
    a = np.asarray(x, dtype=np.float64)
    mag = np.abs(a)
    value = float(np.sum(mag ** p))
    grad = p * mag ** (p - 1) * np.sign(a)
    return value, grad.astype(np.float32)


def tv_penalty(x):
    """Smoothed total variation over the interior of each channel plane.

    Sums ``sqrt(dy^2 + dx^2 + delta^2)`` with forward differences at every
    (y, x) having both a lower and a right neighbour; delta = 1e-8.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        a = as_tensor(a).astype(np.float64)
    grad = np.zeros_like(a)
    if a.shape[2] < 2 or a.shape[3] < 2:
        return 0.0, grad.astype(np.float32)
    base = a[:, :, :-1, :-1]
    dy = a[:, :, 1:, :-1] - base
    dx = a[:, :, :-1, 1:] - base
    mag = np.sqrt(dy * dy + dx * dx + TV_DELTA ** 2)
    gy, gx = dy / mag, dx / mag
    grad[:, :, 1:, :-1] += gy
    grad[:, :, :-1, 1:] += gx
    grad[:, :, :-1, :-1] -= gy + gx
    return float(mag.sum()), grad.astype(np.float32)


def objective_and_grad(network, x, objective):
    """Value and input gradient of the (unregularized) objective at ``x``."""
    tape = forward(network, x)
    if isinstance(objective, MaximizeUnit):
        layer, (c, y, xx) = resolve_target(network, objective.target)
        value = float(tape[layer].output[0, c, y, xx])
        seed = np.zeros(tape[layer].output.shape, np.float32)
        seed[0, c, y, xx] = 1.0
    elif isinstance(objective, MatchRepresentation):
        layer = objective.layer_index
        if not 0 <= layer < len(network.layers):
            raise IndexError(f"layer index {layer} outside [0, {len(network.layers)})")
        phi = tape[layer].output
        if objective.reference.shape != phi.shape:
            raise ShapeError(f"reference shape {objective.reference.shape} != layer {layer} "
                             f"output {phi.shape}")
        diff = objective.reference.astype(np.float64) - phi
        value = -0.5 * float(np.sum(diff * diff))
        seed = diff.astype(np.float32)
    else:
        raise TypeError(f"unsupported objective {objective!r}")
    grad = propagate(tape, layer, seed, ReluRule.BACKPROP, Gradient())
    return value, grad


def total_objective(network, x, objective, reg):
    """``objective(x) - lambda_p * L_p(x) - lambda_tv * TV(x)`` and its gradient."""
    value, grad = objective_and_grad(network, x, objective)
    grad = grad.astype(np.float64)
    if reg.lambda_p:
        v, g = lp_penalty(x, reg.p)
        value -= reg.lambda_p * v
        grad -= reg.lambda_p * g
    if reg.lambda_tv:
        v, g = tv_penalty(x)
        value -= reg.lambda_tv * v
        grad -= reg.lambda_tv * g
    return value, grad


def _evaluate(network, x, objective, reg, step):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = total_objective(network, x, objective, reg)
    except NonFiniteError as exc:
        raise NumericalError(f"activations overflowed: {exc}", step) from exc
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError("objective or gradient is not finite", step)
    return value, grad


def reconstruct(network, objective, reg=None, opt=None):
    """Run gradient ascent on the regularized objective.

    Returns a :class:`Reconstruction` whose ``loss_history`` holds the negated
    total objective at every visited iterate (steps + 1 entries).
    """
    reg = RegConfig() if reg is None else reg
    opt = OptConfig() if opt is None else opt
    shape = (1, *network.input_shape)
    if isinstance(opt.init, np.ndarray):
        x = as_tensor(opt.init).copy()
        if x.shape != shape:
            raise ShapeError(f"init shape {x.shape} != network input {shape}")
    else:
        x = opt.init.make(shape)
    trajectory, history = [], []
    for step in range(opt.steps):
        value, grad = _evaluate(network, x, objective, reg, step)
        history.append(-value)
        lr = opt.schedule(step) if opt.schedule is not None else opt.step_size
        with np.errstate(over="ignore", invalid="ignore"):
            x = (x + lr * grad).astype(np.float32)
        if not np.all(np.isfinite(x)) or not np.isfinite(value):
            raise NumericalError("iterate diverged to non-finite values", step)
        if opt.record_every and (step + 1) % opt.record_every == 0:
            trajectory.append((step + 1, x.copy()))
    value, _ = _evaluate(network, x, objective, reg, opt.steps)
    history.append(-value)
    if not trajectory or trajectory[-1][0] != opt.steps:
        trajectory.append((opt.steps, x.copy()))
    return Reconstruction(x, trajectory, history)
