"""Spatial-then-channel attention applied to the deformable C5 map."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


class SpatialAttention(Module):
    """Per-pixel gate from channel-pooled maps: sigmoid(conv7x7([avg; max])) * x."""

    def __init__(self, rng, kernel: int = 7):
        self.conv = Conv2d(rng, 2, 1, kernel, padding=kernel // 2)

    def weights(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"spatial attention expects [B, C, H, W], got {x.shape}")
        pooled = T.concat([T.pool_channel(x, "avg"), T.pool_channel(x, "max")], axis=1)
        return T.sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return self.weights(x) * x


class ChannelAttention(Module):
    """Per-channel gate: sigmoid(shared(avgpool x) + shared(maxpool x)) * x.

    ``shared`` is one bottleneck (C -> C/r -> C with a rectifier) used by both
    pooled branches.
    """

    def __init__(self, rng, channels: int, reduction: int = 16):
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.reduce = Linear(rng, channels, hidden)
        self.expand = Linear(rng, hidden, channels)

    def shared(self, v: Tensor) -> Tensor:
        return self.expand(T.relu(self.reduce(v)))

    def weights(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise T.ShapeError(f"channel attention built for {self.channels} channels, got {x.shape}")
        b, c = x.shape[:2]
        avg = T.pool_spatial(x, "avg").reshape(b, c)
        mx = T.pool_spatial(x, "max").reshape(b, c)
        return T.sigmoid(self.shared(avg) + self.shared(mx)).reshape(b, c, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.weights(x) * x


class DFAM(Module):
    def __init__(self, rng, channels: int, reduction: int = 16, kernel: int = 7):
        self.spatial = SpatialAttention(rng, kernel)
        self.channel = ChannelAttention(rng, channels, reduction)

    def forward(self, x: Tensor) -> Tensor:
        return self.channel(self.spatial(x))

    def zero_(self) -> "DFAM":
        """Zero every attention parameter, turning the block into a fixed 0.25 scaling."""
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


def spatial_attention(x: Tensor, params: SpatialAttention) -> Tensor:
    return params(x)


def channel_attention(x: Tensor, params: ChannelAttention) -> Tensor:
    return params(x)


def dfam_forward(x: Tensor, params: DFAM) -> Tensor:
    return channel_attention(spatial_attention(x, params.spatial), params.channel)
