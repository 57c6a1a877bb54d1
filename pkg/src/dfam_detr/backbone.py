"""Residual backbone with a deformable C5 stage and the four-level feature pyramid.

Stage strides relative to the input are 4 (C2), 8 (C3), 16 (C4) and 32 (C5).
The pyramid takes 1x1 projections of C3, C4 and the deformable C5 map, plus a
3x3 stride-2 convolution of the DFAM map for the stride-64 level.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .config import BackboneConfig
from .deform import DeformConv2d
from .dfam import DFAM
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

PYRAMID_STRIDES = (8, 16, 32, 64)


class BasicBlock(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int, groups: int, deformable: bool):
        conv = (lambda a, b, s: DeformConv2d(rng, a, b, 3, s, 1, bias=False)) if deformable \
            else (lambda a, b, s: Conv2d(rng, a, b, 3, s, 1, bias=False))
        self.conv1 = conv(cin, cout, stride)
        self.norm1 = GroupNorm(groups, cout)
        self.conv2 = conv(cout, cout, 1)
        self.norm2 = GroupNorm(groups, cout)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(rng, cin, cout, 1, stride, bias=False)
            self.shortcut_norm = GroupNorm(groups, cout)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x))
        return T.relu(out + skip)


class Stage(Module):
    def __init__(self, rng, cin: int, cout: int, blocks: int, stride: int, groups: int,
                 deformable: bool = False):
        self.blocks = [BasicBlock(rng, cin if i == 0 else cout, cout, stride if i == 0 else 1,
                                  groups, deformable) for i in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


@dataclass
class BackboneOutput:
    c3: Tensor
    c4: Tensor
    c5: Tensor
    dfam: Tensor | None


class Backbone(Module):
    """Stem to stride 4, then stages C2..C5; C5 uses deformable 3x3 convs when DFAM is on."""

    def __init__(self, rng, cfg: BackboneConfig):
        g = cfg.groups
        w2, w3, w4, w5 = cfg.widths
        self.cfg = cfg
        self.stem1 = Conv2d(rng, 3, cfg.stem_width, 3, 2, 1, bias=False)
        self.stem_norm1 = GroupNorm(g, cfg.stem_width)
        self.stem2 = Conv2d(rng, cfg.stem_width, w2, 3, 2, 1, bias=False)
        self.stem_norm2 = GroupNorm(g, w2)
        self.c2 = Stage(rng, w2, w2, cfg.blocks[0], 1, g)
        self.c3 = Stage(rng, w2, w3, cfg.blocks[1], 2, g)
        self.c4 = Stage(rng, w3, w4, cfg.blocks[2], 2, g)
        self.c5 = Stage(rng, w4, w5, cfg.blocks[3], 2, g, deformable=cfg.dfam)
        self.dfam = DFAM(rng, w5, cfg.reduction, cfg.attention_kernel) if cfg.dfam else None

    def forward(self, image: Tensor) -> BackboneOutput:
        if image.ndim != 4 or image.shape[2] % 64 or image.shape[3] % 64:
            raise T.ShapeError(f"backbone input must be [B, 3, H, W] with H, W divisible by 64, "
                               f"got {image.shape}")
        x = T.relu(self.stem_norm1(self.stem1(image)))
        x = T.relu(self.stem_norm2(self.stem2(x)))
        x = self.c2(x)
        c3 = self.c3(x)
        c4 = self.c4(c3)
        c5 = self.c5(c4)
        return BackboneOutput(c3, c4, c5, self.dfam(c5) if self.dfam is not None else None)


def backbone_forward(image: Tensor, backbone: Backbone):
    out = backbone(image)
    return out.c3, out.c4, out.c5, out.dfam


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    strides: tuple[int, ...] = PYRAMID_STRIDES

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lvl.shape[2:] for lvl in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]


class PyramidNeck(Module):
    def __init__(self, rng, widths, d_model: int):
        _, w3, w4, w5 = widths
        self.proj3 = Conv2d(rng, w3, d_model, 1)
        self.proj4 = Conv2d(rng, w4, d_model, 1)
        self.proj5 = Conv2d(rng, w5, d_model, 1)
        self.down = Conv2d(rng, w5, d_model, 3, 2, 1)

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor, top: Tensor) -> FeaturePyramid:
        for a, b, ratio in ((c3, c4, 2), (c4, c5, 2), (c5, top, 1)):
            if a.shape[0] != b.shape[0] or a.shape[2] != ratio * b.shape[2] \
                    or a.shape[3] != ratio * b.shape[3]:
                raise T.ShapeError(f"pyramid inputs have inconsistent strides: {a.shape} vs {b.shape}")
        return FeaturePyramid([self.proj3(c3), self.proj4(c4), self.proj5(c5), self.down(top)])


def build_pyramid(c3: Tensor, c4: Tensor, c5: Tensor, dfam_map: Tensor, neck: PyramidNeck) -> FeaturePyramid:
    return neck(c3, c4, c5, dfam_map)
