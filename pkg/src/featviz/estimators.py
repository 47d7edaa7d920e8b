"""scikit-learn compatible wrappers around the functional API.

Images may be passed as (n, c, h, w) arrays or as (n, c*h*w) rows, so the
estimators drop into ``Pipeline`` and friends.  ``fit`` only validates the
wrapped network against the data; nothing is trained.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attribgraph import AttributionConfig, Gradient, LrpEpsilon, ReluRule, attribute, cam
from .dreamer import (Constant, MatchRepresentation, MaximizeUnit, OptConfig, RandomUniform,
                      RegConfig, Zeros, reconstruct)
from .netrunner import ClassUnit, Network, forward, predict_scores
from .perturb import OcclusionConfig, RandomFill, SolidFill, occlusion_map


def check_images(X, network):
    """Validate ``X`` and reshape it to float32 (n, c, h, w) for ``network``."""
    if not isinstance(network, Network):
        raise TypeError(f"network must be a featviz Network, got {type(network).__name__}")
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    shape = network.input_shape
    if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
        X = X.reshape(-1, *shape)
    elif X.ndim == 3 and X.shape == shape:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != shape:
        raise ValueError(f"X has shape {X.shape}; expected (n, {shape[0]}, {shape[1]}, "
                         f"{shape[2]}) or (n, {int(np.prod(shape))})")
    return np.ascontiguousarray(X)


class _NetworkEstimator(BaseEstimator):
    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X, self.network)
        elif not isinstance(self.network, Network):
            raise TypeError("network must be a featviz Network")
        self.input_shape_ = self.network.input_shape
        self.n_features_in_ = int(np.prod(self.input_shape_))
        self.classes_ = np.arange(self.network.n_outputs)
        return self

    def _targets(self, X):
        if self.target_class is not None:
            return [int(self.target_class)] * len(X)
        return list(np.argmax(predict_scores(self.network, X), axis=1))


class NetworkClassifier(ClassifierMixin, _NetworkEstimator):
    """Expose a loaded network as a (pre-trained) scikit-learn classifier."""

    def __init__(self, network=None):
        self.network = network

    def decision_function(self, X):
        check_is_fitted(self, "classes_")
        return predict_scores(self.network, check_images(X, self.network)).astype(np.float64)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class SaliencyMap(TransformerMixin, _NetworkEstimator):
    """Backward attribution maps, one per image, shaped like the input.

    ``relu_rule`` is "backprop", "deconvnet" or "guided"; ``conv_rule`` is
    "gradient" or "lrp" (with ``epsilon``).  ``target_class=None`` explains
    each image's top-scoring class.
    """

    def __init__(self, network=None, relu_rule="backprop", conv_rule="gradient",
                 epsilon=1e-3, target_class=None):
        self.network = network
        self.relu_rule = relu_rule
        self.conv_rule = conv_rule
        self.epsilon = epsilon
        self.target_class = target_class

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = check_images(X, self.network)
        if self.conv_rule not in ("lrp", "gradient"):
            raise ValueError(f"conv_rule must be 'gradient' or 'lrp', got {self.conv_rule!r}")
        rule = LrpEpsilon(self.epsilon) if self.conv_rule == "lrp" else Gradient()
        out = []
        for img, cls in zip(X, self._targets(X)):
            cfg = AttributionConfig(ReluRule(self.relu_rule), rule, ClassUnit(cls))
            out.append(attribute(self.network, img[None], cfg).values[0])
        return np.stack(out)


class OcclusionSensitivity(TransformerMixin, _NetworkEstimator):
    """Occlusion heatmaps (n, grid_h, grid_w).

    ``fill`` is a scalar, a per-channel sequence, or "random" (uniform in
    [0, 1) drawn from ``random_state``).
    """

    def __init__(self, network=None, box=(3, 3), stride=(1, 1), fill=0.5, random_state=0,
                 target_class=None, n_jobs=1):
        self.network = network
        self.box = box
        self.stride = stride
        self.fill = fill
        self.random_state = random_state
        self.target_class = target_class
        self.n_jobs = n_jobs

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = check_images(X, self.network)
        if isinstance(self.fill, str) and self.fill == "random":
            fill = RandomFill(int(self.random_state))
        else:
            fill = SolidFill(self.fill)
        out = []
        for img, cls in zip(X, self._targets(X)):
            cfg = OcclusionConfig(self.box, self.stride, fill, ClassUnit(cls))
            out.append(occlusion_map(self.network, img[None], cfg, workers=self.n_jobs).values)
        return np.stack(out)


class ClassActivationMap(TransformerMixin, _NetworkEstimator):
    """CAMs at feature-map resolution, (n, fh, fw)."""

    def __init__(self, network=None, target_class=None):
        self.network = network
        self.target_class = target_class

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = check_images(X, self.network)
        return np.stack([cam(self.network, img[None], cls).values
                         for img, cls in zip(X, self._targets(X))])


def _init_from(init, random_state):
    if init == "zeros":
        return Zeros()
    if init == "random":
        return RandomUniform(int(random_state))
    return Constant(float(init))


class ActivationMaximizer(_NetworkEstimator):
    """Synthesize the image that maximizes one class score.

    After ``fit`` the result is in ``image_`` (1, c, h, w) and the negated
    objective per iterate in ``loss_history_``.
    """

    def __init__(self, network=None, target_class=0, steps=200, step_size=0.1, lambda_p=0.0,
                 p=6.0, lambda_tv=0.0, init="zeros", random_state=0):
        self.network = network
        self.target_class = target_class
        self.steps = steps
        self.step_size = step_size
        self.lambda_p = lambda_p
        self.p = p
        self.lambda_tv = lambda_tv
        self.init = init
        self.random_state = random_state

    def fit(self, X=None, y=None):
        super().fit(X, y)
        result = reconstruct(self.network, MaximizeUnit(ClassUnit(int(self.target_class))),
                             RegConfig(self.lambda_p, self.p, self.lambda_tv),
                             OptConfig(self.steps, self.step_size,
                                       _init_from(self.init, self.random_state)))
        self.image_ = result.final
        self.loss_history_ = np.asarray(result.loss_history)
        return self


class RepresentationInverter(TransformerMixin, _NetworkEstimator):
    """Reconstruct each image from its own activations at ``layer_index``."""

    def __init__(self, network=None, layer_index=0, steps=200, step_size=0.1, lambda_p=0.0,
                 p=6.0, lambda_tv=0.0, init="zeros", random_state=0):
        self.network = network
        self.layer_index = layer_index
        self.steps = steps
        self.step_size = step_size
        self.lambda_p = lambda_p
        self.p = p
        self.lambda_tv = lambda_tv
        self.init = init
        self.random_state = random_state

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = check_images(X, self.network)
        out = []
        for img in X:
            ref = forward(self.network, img[None])[self.layer_index].output
            result = reconstruct(self.network, MatchRepresentation(self.layer_index, ref),
                                 RegConfig(self.lambda_p, self.p, self.lambda_tv),
                                 OptConfig(self.steps, self.step_size,
                                           _init_from(self.init, self.random_state)))
            out.append(result.final[0])
        return np.stack(out)
