import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

import featviz as fv
from featviz.estimators import (ActivationMaximizer, ClassActivationMap, NetworkClassifier,
                                OcclusionSensitivity, RepresentationInverter, SaliencyMap,
                                check_images)
from featviz.fixtures import cross_detector, gap_classifier, planted_cross_image


@pytest.fixture
def images():
    noise = np.random.default_rng(2).uniform(0, 0.2, (1, 1, 9, 9)).astype(np.float32)
    return np.concatenate([planted_cross_image(), noise])


def test_check_images_accepts_rows_and_single(images):
    net = cross_detector()
    assert check_images(images.reshape(2, -1), net).shape == (2, 1, 9, 9)
    assert check_images(images[0], net).shape == (1, 1, 9, 9)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 80)), net)
    with pytest.raises(ValueError):
        check_images(np.full((1, 81), np.nan), net)
    with pytest.raises(TypeError):
        check_images(images, "not a network")


def test_classifier(images):
    clf = NetworkClassifier(cross_detector()).fit(images)
    np.testing.assert_array_equal(clf.predict(images), [0, 1])
    np.testing.assert_allclose(clf.predict_proba(images).sum(axis=1), 1)
    assert clf.score(images, [0, 1]) == 1.0
    with pytest.raises(NotFittedError):
        NetworkClassifier(cross_detector()).predict(images)


def test_get_params_and_clone():
    est = SaliencyMap(cross_detector(), relu_rule="guided", epsilon=0.01)
    params = est.get_params()
    assert params["relu_rule"] == "guided" and params["epsilon"] == 0.01
    copy = clone(est).set_params(relu_rule="deconvnet")
    assert copy.relu_rule == "deconvnet" and est.relu_rule == "guided"


@pytest.mark.parametrize("rule", ["backprop", "deconvnet", "guided"])
def test_saliency_matches_functional(images, rule):
    net = cross_detector()
    maps = SaliencyMap(net, relu_rule=rule, target_class=0).fit(images).transform(images)
    assert maps.shape == images.shape
    for i in range(2):
        ref = fv.attribute(net, images[i:i + 1],
                           fv.AttributionConfig(rule, fv.Gradient(), fv.ClassUnit(0))).values
        assert maps[i].tobytes() == ref[0].tobytes()


def test_saliency_lrp_and_bad_rule(images):
    net = cross_detector()
    maps = SaliencyMap(net, conv_rule="lrp").fit(images).transform(images[:1])
    assert maps.shape == (1, 1, 9, 9)
    with pytest.raises(ValueError):
        SaliencyMap(net, conv_rule="nope").fit(images).transform(images)


def test_occlusion_transformer_in_pipeline(images):
    net = cross_detector()
    pipe = make_pipeline(FunctionTransformer(lambda X: np.clip(X, 0, 1)),
                         OcclusionSensitivity(net, box=(3, 3), stride=(2, 2), target_class=0))
    maps = pipe.fit_transform(images.reshape(2, -1))
    assert maps.shape == (2, 4, 4)
    assert maps[0].max() > 0 and not maps[1].any()
    rnd = OcclusionSensitivity(net, fill="random", random_state=3, n_jobs=2).fit(images)
    assert rnd.transform(images).tobytes() == rnd.transform(images).tobytes()


def test_cam_transformer(rng):
    net = gap_classifier(rng)
    X = rng.standard_normal((3, *net.input_shape)).astype(np.float32)
    maps = ClassActivationMap(net, target_class=2).fit(X).transform(X)
    assert maps.shape == (3, 6, 6)
    np.testing.assert_array_equal(maps[1], fv.cam(net, X[1:2], 2).values)


def test_activation_maximizer():
    net = fv.Network((fv.Dense([[1.0, 0.0]]),), (1, 1, 2))
    est = ActivationMaximizer(net, target_class=0, steps=3000, step_size=0.1, lambda_p=0.5,
                              p=2).fit()
    np.testing.assert_allclose(est.image_.ravel(), [1, 0], atol=1e-3)
    assert est.loss_history_.shape == (3001,)


def test_representation_inverter(rng):
    A = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
    net = fv.Network((fv.Conv(A.reshape(2, 2, 1, 1)),), (2, 3, 3))
    X = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    rec = RepresentationInverter(net, layer_index=0, steps=2000, step_size=0.3).fit(X)
    np.testing.assert_allclose(rec.transform(X), X, atol=1e-3)
