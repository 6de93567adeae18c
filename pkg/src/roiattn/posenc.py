"""Coordinate-channel positional encoding for regression-branch features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class CoordMaps:
    cx: np.ndarray  # col / W, constant down each column
    cy: np.ndarray  # row / H, constant along each row

    @property
    def H(self) -> int:
        return self.cx.shape[0]

    @property
    def W(self) -> int:
        return self.cx.shape[1]


def make_coord_maps(H: int, W: int, dtype=np.float32) -> CoordMaps:
    if H < 1 or W < 1:
        raise ValueError(f"coordinate maps need H, W >= 1, got {H}x{W}")
    cols = np.arange(W, dtype=np.float64) / W
    rows = np.arange(H, dtype=np.float64) / H
    cx = np.broadcast_to(cols[None, :], (H, W)).astype(dtype)
    cy = np.broadcast_to(rows[:, None], (H, W)).astype(dtype)
    return CoordMaps(cx, cy)


@dataclass
class PosEncoder:
    """A single 1×1 conv mapping C+2 channels back to C, shared by every feature level."""

    weight: Tensor  # C × (C+2) × 1 × 1
    bias: Tensor

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, noise: float = 0.01, dtype=np.float32) -> "PosEncoder":
        # starts as a near-identity on features with zero weight on the coordinate channels
        w = np.zeros((channels, channels + 2, 1, 1))
        w[:, :channels, 0, 0] = np.eye(channels) + rng.normal(0.0, noise, (channels, channels))
        return cls(Tensor(w, requires_grad=True, dtype=dtype), Tensor(np.zeros(channels), requires_grad=True, dtype=dtype))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str = "posenc") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def _coord_tensor(x: Tensor) -> Tensor:
    *lead, H, W = x.shape
    maps = make_coord_maps(H, W, dtype=x.dtype)
    coords = np.stack([maps.cx, maps.cy])
    if len(lead) == 2:
        coords = np.broadcast_to(coords[None], (lead[0], 2, H, W))
    return Tensor(coords, dtype=x.dtype)


def encode(x: Tensor, enc: PosEncoder) -> Tensor:
    """Append C_x and C_y as two extra channels and fuse back to C channels with the 1×1 conv.

    Accepts C×H×W or N×C×H×W.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"encode expects C×H×W or N×C×H×W, got {x.shape}")
    if x.shape[-3] != enc.channels:
        raise DimensionError(f"feature channels {x.shape[-3]} do not match encoder channels {enc.channels}")
    batched = x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
    xc = T.concat_channels([batched, _coord_tensor(batched)])
    out = T.conv2d(xc, enc.weight, enc.bias)
    return out if x.ndim == 4 else T.reshape(out, x.shape)


def encode_levels(levels: list[Tensor], enc: PosEncoder) -> list[Tensor]:
    return [encode(level, enc) for level in levels]
