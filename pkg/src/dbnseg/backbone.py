"""Two-stream parallel-resolution backbone.

A full-resolution stream and a half-resolution stream run side by side and
exchange information after every block; the final representation upsamples
the low stream and concatenates it onto the high stream, so the output keeps
the input's spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Conv2d, Module
from .norm import DomainBatchNorm
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    low_channels: int = 32
    num_fusion_blocks: int = 3
    norm_kind: str = "DBN"
    num_domains: int = 1
    epsilon: float = 1e-5
    stats_momentum: float = 0.1

    def __post_init__(self):
        if min(self.base_channels, self.low_channels) < 1:
            raise ValueError("channel widths must be >= 1")
        if self.num_fusion_blocks < 1:
            raise ValueError("num_fusion_blocks must be >= 1")
        if self.norm_kind.upper() not in ("BN", "DBN"):
            raise ValueError(f"norm_kind must be BN or DBN, got {self.norm_kind!r}")
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.base_channels + self.low_channels

    @property
    def norm_domains(self) -> int:
        """Statistic rows per norm layer: 1 for BN, ``num_domains`` for DBN."""
        return self.num_domains if self.norm_kind.upper() == "DBN" else 1


def make_norm(config, channels: int, name: str) -> DomainBatchNorm:
    return DomainBatchNorm(channels, config.norm_domains, config.epsilon, config.stats_momentum, name=name)


class FusionBlock(Module):
    """One exchange step between the two streams.

    ``high' = relu(norm(conv(high) + conv1x1(upsample(low))))`` and
    ``low' = relu(norm(conv(low) + stride2conv(high)))``. The 1x1 exchange
    conv starts at zero so early training sees each stream on its own.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, name: str):
        ch, cl = config.base_channels, config.low_channels
        self.high_conv = Conv2d(f"{name}.high_conv", ch, ch, 3, rng=rng)
        self.up_conv = Conv2d(f"{name}.up_conv", cl, ch, 1, zero_init=True)
        self.high_norm = make_norm(config, ch, f"{name}.high_norm")
        self.low_conv = Conv2d(f"{name}.low_conv", cl, cl, 3, rng=rng)
        self.down_conv = Conv2d(f"{name}.down_conv", ch, cl, 3, stride=2, rng=rng)
        self.low_norm = make_norm(config, cl, f"{name}.low_norm")

    def __call__(self, high: Tensor, low: Tensor, domain, mode: str):
        return fuse_streams(high, low, self, domain, mode)


def fuse_streams(high: Tensor, low: Tensor, block: FusionBlock, domain, mode: str):
    n, _, h, w = high.shape
    if low.ndim != 4 or low.shape[0] != n or low.shape[2:] != (h // 2, w // 2):
        raise ShapeError(f"fuse_streams: low stream {low.shape} does not match high stream {high.shape}")
    up = block.up_conv(ops.bilinear_resize(low, h, w))
    new_high = ops.relu(block.high_norm(ops.add(block.high_conv(high), up), domain, mode))
    down = block.down_conv(high)
    new_low = ops.relu(block.low_norm(ops.add(block.low_conv(low), down), domain, mode))
    return new_high, new_low


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, name: str = "backbone"):
        self.config = config
        ch, cl = config.base_channels, config.low_channels
        self.stem = Conv2d(f"{name}.stem", 3, ch, 3, rng=rng)
        self.stem_norm = make_norm(config, ch, f"{name}.stem_norm")
        self.branch = Conv2d(f"{name}.branch", ch, cl, 3, stride=2, rng=rng)
        self.branch_norm = make_norm(config, cl, f"{name}.branch_norm")
        self.blocks = [FusionBlock(config, rng, f"{name}.block{i}") for i in range(config.num_fusion_blocks)]

    def __call__(self, image: Tensor, domain, mode: str = "train") -> Tensor:
        return backbone_forward(self, image, domain, mode)


def backbone_forward(net: Backbone, image: Tensor, domain, mode: str = "train") -> Tensor:
    """``[N, 3, H, W] -> [N, base + low, H, W]``."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects [N, 3, H, W] images, got {image.shape}")
    h, w = image.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"backbone needs even spatial dims, got {h}x{w}")
    high = ops.relu(net.stem_norm(net.stem(image), domain, mode))
    low = ops.relu(net.branch_norm(net.branch(high), domain, mode))
    for block in net.blocks:
        high, low = block(high, low, domain, mode)
    return ops.concat([high, ops.bilinear_resize(low, h, w)], axis=1)


def params_count(config: BackboneConfig) -> int:
    """Exact parameter count of :class:`Backbone` for ``config``."""
    ch, cl = config.base_channels, config.low_channels

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    stem = conv(3, ch, 3) + 2 * ch + conv(ch, cl, 3) + 2 * cl
    block = conv(ch, ch, 3) + conv(cl, ch, 1) + 2 * ch + conv(cl, cl, 3) + conv(ch, cl, 3) + 2 * cl
    return stem + config.num_fusion_blocks * block
