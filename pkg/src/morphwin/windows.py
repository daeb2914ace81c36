"""3D window partitioning, cyclic shifting, and the shifted-window mask.

A feature volume [D,H,W,C] is tiled into non-overlapping (d,h,w) windows and
flattened to a sequence [N,K,C], N windows of K=d*h*w elements each. Shifted
blocks roll the volume first; positions that wrap around the volume edge get
a large negative additive mask so they cannot attend across the seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9  # finite so softmax backward stays NaN-free


@dataclass(frozen=True)
class WindowSpec:
    window: tuple[int, int, int]
    shift: tuple[int, int, int]
    feat: tuple[int, int, int]

    def __post_init__(self):
        for axis, (f, w) in enumerate(zip(self.feat, self.window)):
            if w < 1 or f < 1:
                raise ValueError(f"degenerate window/feature dims on axis {axis}: {f}, {w}")
            if f % w != 0:
                raise ValueError(
                    f"feature dim {f} on axis {axis} is not divisible by window dim {w}"
                )
        for axis, (s, w) in enumerate(zip(self.shift, self.window)):
            if not 0 <= s < w:
                raise ValueError(f"shift {s} out of range [0, {w}) on axis {axis}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(f // w for f, w in zip(self.feat, self.window))

    @property
    def n_windows(self) -> int:
        gd, gh, gw = self.grid
        return gd * gh * gw

    @property
    def elements_per_window(self) -> int:
        d, h, w = self.window
        return d * h * w

    def shifted(self) -> "WindowSpec":
        return WindowSpec(self.window, tuple(w // 2 for w in self.window), self.feat)


def window_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """[D,H,W,C] -> [N,K,C]; windows and elements ordered row-major."""
    dd, hh, ww = spec.feat
    if x.shape[:3] != (dd, hh, ww):
        raise T.ShapeError(f"feature shape {x.shape[:3]} != spec dims {spec.feat}")
    d, h, w = spec.window
    gd, gh, gw = spec.grid
    c = x.shape[3]
    x = T.reshape(x, (gd, d, gh, h, gw, w, c))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return T.reshape(x, (spec.n_windows, spec.elements_per_window, c))


def window_reverse(seq: Tensor, spec: WindowSpec) -> Tensor:
    """Inverse of window_partition; bit-exact roundtrip."""
    n, k = spec.n_windows, spec.elements_per_window
    if seq.shape[:2] != (n, k):
        raise T.ShapeError(f"sequence shape {seq.shape[:2]} != spec ({n}, {k})")
    d, h, w = spec.window
    gd, gh, gw = spec.grid
    c = seq.shape[2]
    x = T.reshape(seq, (gd, gh, gw, d, h, w, c))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5, 6))
    return T.reshape(x, (gd * d, gh * h, gw * w, c))


def cyclic_shift(x: Tensor, shifts: tuple[int, int, int], inverse: bool = False) -> Tensor:
    """Toroidal roll of the three spatial axes; inverse undoes forward exactly."""
    s = tuple(int(v) for v in shifts)
    if inverse:
        return T.roll(x, s, (0, 1, 2))
    return T.roll(x, tuple(-v for v in s), (0, 1, 2))


def _axis_regions(dim: int, win: int, shift: int) -> np.ndarray:
    """Region label per (already shifted) coordinate along one axis.

    Positions whose pre-shift source wrapped around the volume get a
    different label from unwrapped positions in the same window.
    """
    lab = np.zeros(dim, dtype=np.int64)
    if shift == 0:
        return lab
    lab[dim - win:dim - shift] = 1
    lab[dim - shift:] = 2
    return lab


def attention_mask(spec: WindowSpec, dtype=np.float32) -> np.ndarray:
    """[N,K,K] additive mask: 0 for same-region pairs, MASK_VALUE otherwise."""
    if all(s == 0 for s in spec.shift):
        return np.zeros((spec.n_windows, spec.elements_per_window,
                         spec.elements_per_window), dtype=dtype)
    zd = _axis_regions(spec.feat[0], spec.window[0], spec.shift[0])
    zh = _axis_regions(spec.feat[1], spec.window[1], spec.shift[1])
    zw = _axis_regions(spec.feat[2], spec.window[2], spec.shift[2])
    labels = (zd[:, None, None] * 9 + zh[None, :, None] * 3 + zw[None, None, :])
    seq = window_partition(Tensor(labels.astype(np.float64)[..., None]), spec)
    lab = seq.data[:, :, 0]
    same = lab[:, :, None] == lab[:, None, :]
    return np.where(same, 0.0, MASK_VALUE).astype(dtype)
