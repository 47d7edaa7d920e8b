"""Feature visualization for small convolutional networks.

Occlusion sweeps, backward attribution (Deconvnet, saliency, Guided
Backpropagation, epsilon-LRP), class activation maps and regularized input
reconstruction on a self-contained numpy inference engine.
"""

from .attribgraph import (AttributionConfig, AttributionMap, Gradient, LrpEpsilon, ReluRule,
                          attribute, cam, conv_backward, propagate, relu_backward, saliency)
from .dreamer import (Constant, MatchRepresentation, MaximizeUnit, OptConfig, RandomUniform,
                      Reconstruction, RegConfig, Zeros, lp_penalty, reconstruct, tv_penalty)
from .errors import (ConfigurationError, FeatVizError, FormatError, NumericalError,
                     ShapeError)
from .heatmap import Heatmap
from .netrunner import (AvgPool, ClassUnit, Conv, Dense, Flatten, ForwardTape, GlobalAvgPool,
                        InternalUnit, LeakyReLU, MaxPool, Network, ReLU, Softmax, class_score,
                        forward, load_network, save_network)
from .perturb import (OcclusionConfig, RandomFill, SolidFill, occlusion_map,
                      occlusion_positions)
from .tensor import (avgpool, avgpool_backward, conv2d, conv2d_input_grad, load_fvt, maxpool,
                     maxunpool, save_fvt)
from .vizio import (AbsMax, Bilinear, Nearest, PercentileClip, RenderSpec, RgbImage,
                    read_image, render, write_image, write_tensor_image)

__version__ = "0.1.0"
