"""2-D importance map shared by occlusion sweeps and class activation maps."""

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import save_fvt


@dataclass(frozen=True, eq=False)
class Heatmap:
    """A (rows, cols) float32 grid plus the metadata needed to interpret it.

    ``meta`` carries geometry (box/stride/input size for occlusion, the
    input-space scale factor for CAM), the sign convention and fill spec.
    """

    values: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise ValueError(f"heatmap values must be 2-D, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def to_fvt(self):
        return save_fvt(self.values)

    def sidecar(self):
        doc = {"method": self.method, "shape": list(self.values.shape), **self.meta}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
