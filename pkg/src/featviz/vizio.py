"""Binary PPM (P6) / PGM (P5) I/O and colormap rendering of attribution maps."""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, TruncatedError
from .heatmap import Heatmap

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


@dataclass(frozen=True, eq=False)
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, 3):
            raise ShapeError(f"pixel buffer {px.shape} != {(self.height, self.width, 3)}")
        object.__setattr__(self, "pixels", px)


def read_image(blob):
    """Decode a binary PPM/PGM (maxval 255) into a 1x{3|1}xHxW tensor in [0, 1]."""
    blob = bytes(blob)
    pos, tokens = 0, []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise FormatError("truncated image header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r} (need P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed image header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"bad image size {width}x{height}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    data = blob[pos:pos + need]
    if len(data) < need:
        raise TruncatedError(f"expected {need} pixel bytes, got {len(data)}")
    px = np.frombuffer(data, np.uint8).reshape(height, width, channels)
    return (px.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255)).copy()


def _encode(magic, width, height, payload):
    return f"{magic}\n{width} {height}\n255\n".encode("ascii") + payload


def write_image(image):
    """Encode an :class:`RgbImage` as binary P6."""
    return _encode("P6", image.width, image.height, image.pixels.tobytes())


def write_tensor_image(t):
    """Encode a 1- or 3-channel tensor with values in [0, 1] as P5 or P6.

    Values are scaled by 255, rounded and clipped, so this inverts
    :func:`read_image` exactly.
    """
    a = np.asarray(t, dtype=np.float32)
    while a.ndim > 3:
        if a.shape[0] != 1:
            raise ShapeError(f"expected a single image, got shape {a.shape}")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.shape[0] not in (1, 3):
        raise ShapeError(f"need 1 or 3 channels, got {a.shape[0]}")
    px = np.clip(np.rint(a.astype(np.float64) * 255), 0, 255).astype(np.uint8)
    px = np.ascontiguousarray(px.transpose(1, 2, 0))
    magic = "P6" if a.shape[0] == 3 else "P5"
    return _encode(magic, a.shape[2], a.shape[1], px.tobytes())


# -- rendering -----------------------------------------------------------------

@dataclass(frozen=True)
class AbsMax:
    def scale(self, mag):
        return float(mag.max()) if mag.size else 0.0


@dataclass(frozen=True)
class PercentileClip:
    q: float = 99.0

    def __post_init__(self):
        if not 0 < self.q <= 100:
            raise ValueError(f"percentile must lie in (0, 100], got {self.q}")

    def scale(self, mag):
        return float(np.percentile(mag, self.q))


@dataclass(frozen=True)
class Nearest:
    factor: int = 1


@dataclass(frozen=True)
class Bilinear:
    factor: int = 1


@dataclass(frozen=True)
class RenderSpec:
    colormap: str = "signed"  # "grayscale" | "signed" | "hot"
    normalization: object = field(default_factory=AbsMax)
    upsample: object = None

    def __post_init__(self):
        if self.colormap not in ("grayscale", "signed", "hot"):
            raise ValueError(f"unknown colormap {self.colormap!r}")


def reduce_channels(values, signed):
    """Collapse (c, h, w) to (h, w) by the entry of largest magnitude per pixel.

    For unsigned colormaps the magnitude itself is returned.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        return v if signed else np.abs(v)
    if v.shape[0] == 1:
        return v[0] if signed else np.abs(v[0])
    if not signed:
        return np.abs(v).max(axis=0)
    idx = np.abs(v).argmax(axis=0)
    return np.take_along_axis(v, idx[None], axis=0)[0]


def upsample_nearest(grid, factor):
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def upsample_bilinear(grid, factor):
    """Bilinear resize by an integer factor with pixel-centre alignment, edges clamped."""
    h, w = grid.shape
    ys = np.clip((np.arange(h * factor) + 0.5) / factor - 0.5, 0, h - 1)
    xs = np.clip((np.arange(w * factor) + 0.5) / factor - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def _as_grid_source(m):
    if isinstance(m, Heatmap):
        return m.values
    values = getattr(m, "values", m)
    a = np.asarray(values)
    while a.ndim > 3:
        if a.shape[0] != 1:
            raise ShapeError(f"can only render a single map, got shape {a.shape}")
        a = a[0]
    return a


def render(m, spec=None):
    """Turn an attribution map, heatmap or tensor into an :class:`RgbImage`."""
    spec = RenderSpec() if spec is None else spec
    src = _as_grid_source(m)
    if src.size == 0:
        raise ShapeError("cannot render an empty map")
    signed = spec.colormap == "signed"
    grid = reduce_channels(src, signed)
    if isinstance(spec.upsample, Nearest) and spec.upsample.factor > 1:
        grid = upsample_nearest(grid, int(spec.upsample.factor))
    elif isinstance(spec.upsample, Bilinear) and spec.upsample.factor > 1:
        grid = upsample_bilinear(grid, int(spec.upsample.factor))
    scale = spec.normalization.scale(np.abs(grid))
    t = grid / scale if scale > 0 else np.zeros_like(grid)
    if signed:
        t = np.clip(t, -1, 1)
        pos, neg = np.clip(t, 0, 1), np.clip(-t, 0, 1)
        rgb = np.stack([1 - neg, 1 - pos - neg, 1 - pos], axis=-1)
    else:
        t = np.clip(np.abs(t), 0, 1)
        if spec.colormap == "grayscale":
            rgb = np.stack([t, t, t], axis=-1)
        else:
            rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1),
                            np.clip(3 * t - 2, 0, 1)], axis=-1)
    px = np.rint(rgb * 255).astype(np.uint8)
    return RgbImage(px.shape[1], px.shape[0], px)
