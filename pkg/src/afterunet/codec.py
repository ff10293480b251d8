"""Slice-wise 2D CNN encoder and decoder.

Both work on slice groups in the ``C x H x W x N_A`` layout at their public
boundary and fold the slices into a batch axis internally, so every slice in
a group sees the same weights.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, InstanceNorm, Module


@dataclass
class CodecConfig:
    channels: tuple = (16, 32, 64, 128, 256)
    num_classes: int = 2
    in_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) <= 0:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def blocks(self):
        return len(self.channels)

    @property
    def width(self):
        """C_L, the channel count handed to the transformer."""
        return self.channels[-1]

    @property
    def downsample(self):
        # B blocks joined by B-1 pools
        return 2 ** (self.blocks - 1)


def to_batch(x):
    """(C, H, W, N) -> (N, C, H, W)."""
    return T.transpose(x, (3, 0, 1, 2))


def to_group(x):
    """(N, C, H, W) -> (C, H, W, N)."""
    return T.transpose(x, (1, 2, 3, 0))


class ConvBlock(Module):
    """Two conv -> instance norm -> ReLU pairs at fixed resolution."""

    def __init__(self, cin, cout, k, rng, dtype):
        self.conv1 = Conv2d(cin, cout, k, rng, dtype)
        self.norm1 = InstanceNorm(cout, dtype)
        self.conv2 = Conv2d(cout, cout, k, rng, dtype)
        self.norm2 = InstanceNorm(cout, dtype)

    def forward(self, x):
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))


class Encoder(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        self.cfg = cfg
        cins = (cfg.in_channels,) + cfg.channels[:-1]
        self.blocks = [ConvBlock(ci, co, cfg.kernel_size, rng, dtype) for ci, co in zip(cins, cfg.channels)]

    def check_input(self, h, w):
        f = self.cfg.downsample
        if h % f or w % f:
            need_h, need_w = -h % f, -w % f
            raise ShapeError(f"H={h}, W={w} must be divisible by {f}; pad by ({need_h}, {need_w})")

    def forward(self, x):
        """Group ``x`` (C,H,W,N) -> (level-B group (C_L,H_L,W_L,N), skips)."""
        if x.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"encoder expects ({self.cfg.in_channels}, H, W, N_A), got {x.shape}")
        self.check_input(x.shape[1], x.shape[2])
        h = to_batch(x)
        skips = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.blocks) - 1:
                skips.append(h)  # pre-pool features
                h = T.maxpool2(h)
        return to_group(h), skips


class Decoder(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        self.cfg = cfg
        ch = cfg.channels
        self.blocks = [ConvBlock(ch[b + 1] + ch[b], ch[b], cfg.kernel_size, rng, dtype)
                       for b in reversed(range(len(ch) - 1))]
        self.head = Conv2d(ch[0], cfg.num_classes, 1, rng, dtype)

    def forward(self, z, skips):
        """Group ``z`` (C_L,H_L,W_L,N) plus encoder skips -> logits (C_cls,H,W,N)."""
        if len(skips) != len(self.blocks):
            raise ShapeError(f"decoder needs {len(self.blocks)} skip levels, got {len(skips)}")
        h = to_batch(z)
        for block, skip in zip(self.blocks, reversed(skips)):
            h = T.upsample2(h)
            if h.shape[0] != skip.shape[0] or h.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"skip {skip.shape} does not line up with upsampled {h.shape}")
            h = block(T.concat([h, skip], axis=1))
        return to_group(self.head(h))
