"""The assembled network: CNN encoder -> axial fusion transformer -> CNN decoder."""
from dataclasses import asdict, dataclass, field

import numpy as np

from .axial import MODES, AxialFusionTransformer
from .codec import CodecConfig, Decoder, Encoder
from .errors import ConfigError
from .nn import Module, count_parameters
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128, 256)
    num_classes: int = 2
    in_channels: int = 1
    image_size: tuple = (64, 64)
    n_a: int = 8
    n_f: int = 1
    heads: int = 8
    layers: int = 6
    attention: str = "axial"
    shared_merge: bool = False
    seed: int = 0
    dtype: str = field(default="float32")

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.codec  # validates channel/class settings
        if self.channels[-1] % self.heads:
            raise ConfigError(f"heads: C_L={self.channels[-1]} is not divisible by {self.heads}")
        if self.n_a != 1 and (self.n_a < 2 or self.n_a % 2):
            raise ConfigError(f"n_a must be even (or 1), got {self.n_a}")
        if self.n_f < 1:
            raise ConfigError(f"n_f must be >= 1, got {self.n_f}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.attention not in MODES:
            raise ConfigError(f"attention must be one of {MODES}, got {self.attention!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        f = self.codec.downsample
        if any(s % f for s in self.image_size):
            raise ConfigError(f"image_size {self.image_size} must be divisible by {f} for {self.codec.blocks} blocks")

    @property
    def codec(self):
        return CodecConfig(self.channels, self.num_classes, self.in_channels)

    @property
    def token_grid(self):
        f = self.codec.downsample
        return (self.image_size[0] // f, self.image_size[1] // f, self.n_a)

    def to_dict(self):
        return asdict(self)


class AFTerUNet(Module):
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        codec = cfg.codec
        self.encoder = Encoder(codec, rng, dtype)
        self.transformer = AxialFusionTransformer(
            codec.width, cfg.token_grid, cfg.heads, cfg.layers, rng, dtype,
            mode=cfg.attention, shared_merge=cfg.shared_merge)
        self.decoder = Decoder(codec, rng, dtype)

    def forward(self, x):
        """Slice group (C, H, W, N_A) -> logits (C_cls, H, W, N_A)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.dtype))
        g, skips = self.encoder(x)
        z = self.transformer(g)
        return self.decoder(z, skips)

    def count_parameters(self):
        return count_parameters(self, by_module=True)
