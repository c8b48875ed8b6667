"""Feature extraction: convolutional stem, SE channel gate, GAP and RoI pooling.

The stem is a deliberately small trainable stand-in for a heavy image
backbone: two stride-2 3x3 convolutions followed by one stride-2 average
pool, for a fixed total stride of 8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .nn import Linear, Module, uniform_init
from .tensor import Tensor, avg_pool2, concat, conv2d

STEM_STRIDE = 8


@dataclass(frozen=True)
class PersonBox:
    """Normalized corner-form box, x1 < x2 and y1 < y2, clamped to [0,1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    @staticmethod
    def from_floats(x1, y1, x2, y2) -> "PersonBox":
        vals = [min(1.0, max(0.0, float(v))) for v in (x1, y1, x2, y2)]
        if not (vals[0] < vals[2] and vals[1] < vals[3]):
            raise DataError(f"degenerate box after clamping: {vals}")
        return PersonBox(*vals)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, kernel=3, stride=1, padding=1):
        self.stride = stride
        self.padding = padding
        self.w = uniform_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x, weight_hook=None):
        w = self.w if weight_hook is None else weight_hook(self.w)
        b = self.b if weight_hook is None else weight_hook(self.b)
        return conv2d(x, w, b, stride=self.stride, padding=self.padding)


class Stem(Module):
    """Trainable map from a [3,H,W] image to a [C_f, H/8, W/8] feature map."""

    def __init__(self, out_channels: int, rng, dtype=np.float32, mid_channels: int = 16):
        self.out_channels = out_channels
        self.conv1 = Conv2d(3, mid_channels, rng, dtype, stride=2)
        self.conv2 = Conv2d(mid_channels, out_channels, rng, dtype, stride=2)

    def __call__(self, image: Tensor, weight_hook=None) -> Tensor:
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"stem expects a [3,H,W] image, got {image.shape}")
        _, h, w = image.shape
        if h % STEM_STRIDE or w % STEM_STRIDE:
            raise ConfigError(f"image extents {h}x{w} not divisible by stem stride {STEM_STRIDE}")
        x = self.conv1(image, weight_hook).relu()
        x = self.conv2(x, weight_hook).relu()
        return avg_pool2(x)


class SEGate(Module):
    """Channel gate: scales each feature channel by a sigmoid excitation in (0,1)."""

    def __init__(self, channels: int, rng, dtype=np.float32, reduction: int = 4):
        if channels % reduction:
            raise ConfigError(f"SE reduction {reduction} must divide channel count {channels}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = Linear(channels, channels // reduction, rng, dtype)
        self.fc2 = Linear(channels // reduction, channels, rng, dtype)

    def __call__(self, f: Tensor, weight_hook=None) -> Tensor:
        if f.data.ndim != 3 or f.shape[0] != self.channels:
            raise ShapeError(f"SE gate configured for {self.channels} channels, got map {f.shape}")
        c, h, w = f.shape
        z = gap(f).reshape(1, c)
        s = self.fc2(self.fc1(z, weight_hook).relu(), weight_hook).sigmoid()
        ones = Tensor(np.ones((1, h * w), dtype=f.data.dtype))
        scale = s.transpose_last_two().matmul(ones)
        return (f.reshape(c, h * w) * scale).reshape(c, h, w)


def gap(f: Tensor) -> Tensor:
    """Global average pooling: per-channel spatial mean of a [C,H,W] map."""
    if f.data.ndim != 3:
        raise ShapeError(f"gap expects [C,H,W], got {f.shape}")
    c, h, w = f.shape
    return f.reshape(c, h * w).mean(axis=1)


def box_to_cells(box: PersonBox, h: int, w: int):
    """Feature-grid cell range covered by a normalized box.

    Floor for the start edge, ceil for the end edge, never fewer than one
    cell per axis.
    """
    c0 = min(int(np.floor(box.x1 * w)), w - 1)
    c1 = min(int(np.ceil(box.x2 * w)), w)
    c1 = max(c1, c0 + 1)
    r0 = min(int(np.floor(box.y1 * h)), h - 1)
    r1 = min(int(np.ceil(box.y2 * h)), h)
    r1 = max(r1, r0 + 1)
    return r0, r1, c0, c1


def roi_pool(f: Tensor, box: PersonBox, grid: int = 3) -> Tensor:
    """Adaptive average pooling of a box region to a k x k grid, flattened.

    Output layout is channel-major: [C * k * k] with the grid row-major
    inside each channel.
    """
    if grid < 1:
        raise ConfigError(f"roi grid must be >= 1, got {grid}")
    c, h, w = f.shape
    r0, r1, c0, c1 = box_to_cells(box, h, w)
    rh, rw = r1 - r0, c1 - c0
    cells = []
    for a in range(grid):
        rs = r0 + (a * rh) // grid
        re = r0 + -((-(a + 1) * rh) // grid)
        for b in range(grid):
            cs = c0 + (b * rw) // grid
            ce = c0 + -((-(b + 1) * rw) // grid)
            cell = f[:, rs:re, cs:ce].reshape(c, (re - rs) * (ce - cs)).mean(axis=1)
            cells.append(cell.reshape(1, c))
    grid_rows = concat(cells, axis=0)            # [k*k, C]
    return grid_rows.transpose_last_two().reshape(c * grid * grid)
