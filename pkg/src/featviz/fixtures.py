"""Small hand-built networks with known behaviour, used by tests, docs and the CLI demo.

``cross_detector`` responds to a bright 3x3 plus-shaped cross on a dark
background: a single 3x3 template convolution (+1 on the plus, -1 on the
corners, bias -3) is followed by ReLU, a global max-pool and a two-way
dense layer.  Class 0 ("cross") scores the peak template response; class 1
("no_cross") scores ``1 - peak``.
"""

import numpy as np

from .netrunner import (Conv, Dense, Flatten, GlobalAvgPool, MaxPool, Network, ReLU)

CROSS_TEMPLATE = np.array([[-1, 1, -1],
                           [1, 1, 1],
                           [-1, 1, -1]], dtype=np.float32)
CROSS_SIZE = 9


def cross_detector(size=CROSS_SIZE):
    conv = Conv(CROSS_TEMPLATE.reshape(1, 1, 3, 3), np.array([-3.0]), stride=1, pad=1)
    dense = Dense(np.array([[1.0], [-1.0]]), np.array([0.0, 1.0]))
    layers = (conv, ReLU(), MaxPool((size, size)), Flatten(), dense)
    return Network(layers, (1, size, size), labels=("cross", "no_cross"))


def planted_cross_image(size=CROSS_SIZE, center=(5, 3), noise=0.2, seed=0):
    """Dark noise in [0, noise) with a value-1 plus sign centred at ``center``."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, noise, size=(1, 1, size, size)).astype(np.float32)
    cy, cx = center
    img[0, 0, cy, cx - 1:cx + 2] = 1.0
    img[0, 0, cy - 1:cy + 2, cx] = 1.0
    return img


def gap_classifier(rng, in_channels=2, features=3, classes=4, size=6):
    """Random Conv -> ReLU -> GlobalAvgPool -> Flatten -> Dense net (CAM topology)."""
    conv = Conv(rng.standard_normal((features, in_channels, 3, 3)),
                rng.standard_normal(features) * 0.1, pad=1)
    dense = Dense(rng.standard_normal((classes, features)), rng.standard_normal(classes))
    return Network((conv, ReLU(), GlobalAvgPool(), Flatten(), dense), (in_channels, size, size))
