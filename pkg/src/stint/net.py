"""Two-frame-in / two-frame-out interpolation network.

A 3D-convolutional encoder-decoder over inputs laid out as (C, T=2, H, W).
There is no pooling anywhere: spatial downsampling uses stride-2 convolutions
and the temporal extent stays 2 end to end. Every level ends with a 3D
squeeze-and-excitation block, and the decoder mirrors the encoder with
transposed convolutions and skip concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class NetConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    se_reduction: int = 4
    use_batchnorm: bool = True

    def level_widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth)]

    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def validate(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")
        for width in self.level_widths():
            if width % self.se_reduction != 0:
                raise ValueError(
                    f"se_reduction {self.se_reduction} does not divide channel width {width}"
                )


# small preset used by tests and desk experiments
DESK_CONFIG = NetConfig(in_channels=1, base_width=8, depth=3, se_reduction=4)
# preset sized to the tens-of-millions parameter regime
PAPER_SCALE_CONFIG = NetConfig(in_channels=1, base_width=72, depth=4, se_reduction=8)


@dataclass
class FramePair:
    """Two frames of identical shape; the first is the temporally earlier one."""

    f1: object
    f2: object

    def __post_init__(self):
        s1, s2 = _shape_of(self.f1), _shape_of(self.f2)
        if s1 != s2:
            raise ValueError(f"frame shapes differ: {s1} vs {s2}")
        if not (_all_finite(self.f1) and _all_finite(self.f2)):
            raise ValueError("frames contain non-finite values")


def _shape_of(a):
    return tuple(a.shape)


def _all_finite(a) -> bool:
    if torch.is_tensor(a):
        return bool(torch.isfinite(a).all())
    return bool(np.isfinite(np.asarray(a)).all())


class SqueezeExcite3d(nn.Module):
    """Channel gating: global average squeeze, bottleneck excitation, sigmoid scale.

    The squeeze pools over time, height and width jointly, so the gate sees the
    whole spatiotemporal extent of each channel.
    """

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(-3, -2, -1))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(squeezed))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:  # unbatched (C, T, H, W)
            return self.forward(x.unsqueeze(0)).squeeze(0)
        g = self.gates(x)
        return x * g[:, :, None, None, None]


def se_forward(features: torch.Tensor, block: SqueezeExcite3d) -> torch.Tensor:
    """Apply ``block`` to a (C, T, H, W) or (B, C, T, H, W) feature map."""
    return block(features)


class _ConvBlock(nn.Module):
    """Two 3x3x3 convolutions (norm before each rectifier) followed by SE gating."""

    def __init__(self, in_ch: int, out_ch: int, reduction: int, batchnorm: bool):
        super().__init__()
        bias = not batchnorm
        layers = []
        for a, b in ((in_ch, out_ch), (out_ch, out_ch)):
            layers.append(nn.Conv3d(a, b, kernel_size=3, padding=1, bias=bias))
            if batchnorm:
                layers.append(nn.BatchNorm3d(b))
            layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)
        self.se = SqueezeExcite3d(out_ch, reduction)

    def forward(self, x):
        return self.se(self.body(x))


def _down(in_ch: int, out_ch: int, batchnorm: bool) -> nn.Sequential:
    # stride-2 spatial convolution; the 2-frame time axis is left untouched
    layers = [nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=(1, 2, 2), padding=1,
                        bias=not batchnorm)]
    if batchnorm:
        layers.append(nn.BatchNorm3d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def _up(in_ch: int, out_ch: int, batchnorm: bool) -> nn.Sequential:
    layers = [nn.ConvTranspose3d(in_ch, out_ch, kernel_size=(1, 2, 2), stride=(1, 2, 2),
                                 bias=not batchnorm)]
    if batchnorm:
        layers.append(nn.BatchNorm3d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class InterpolationNetwork(nn.Module):
    """Maps two frames to the two frames sitting a third and two thirds between them."""

    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.level_widths()
        bn = config.use_batchnorm
        r = config.se_reduction

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = config.in_channels
        for i, width in enumerate(widths):
            self.encoders.append(_ConvBlock(prev, width, r, bn))
            if i + 1 < len(widths):
                self.downs.append(_down(width, widths[i + 1], bn))
                prev = widths[i + 1]

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(len(widths) - 2, -1, -1):
            self.ups.append(_up(widths[i + 1], widths[i], bn))
            self.decoders.append(_ConvBlock(2 * widths[i], widths[i], r, bn))

        self.head = nn.Conv3d(widths[0], config.in_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ValueError(f"expected (B, C, 2, H, W) input, got shape {tuple(x.shape)}")
        b, c, t, h, w = x.shape
        cfg = self.config
        if c != cfg.in_channels or t != 2:
            raise ValueError(
                f"expected {cfg.in_channels} channels over 2 time steps, got C={c}, T={t}"
            )
        div = cfg.spatial_divisor()
        if h % div or w % div:
            raise ValueError(
                f"spatial dims must be divisible by {div} for depth {cfg.depth}, got {h}x{w}"
            )

        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i + 1 < len(self.encoders):
                skips.append(x)
                x = self.downs[i](x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def predict_pair(self, f1: torch.Tensor, f2: torch.Tensor):
        """Batched two-in / two-out call; frames are (B, C, H, W)."""
        y = self.forward(torch.stack([f1, f2], dim=2))
        return y[:, :, 0], y[:, :, 1]


def build_network(config: NetConfig, seed: int) -> InterpolationNetwork:
    """Construct the network with seeded, generator-local weight initialization."""
    net = InterpolationNetwork(config)
    gen = torch.Generator()
    gen.manual_seed(seed)
    for module in net.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            weight = module.weight
            if isinstance(module, nn.ConvTranspose3d):
                fan_in = weight.numel() // weight.shape[1]
            else:
                fan_in = weight.numel() // weight.shape[0]
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    b = 1.0 / math.sqrt(fan_in)
                    module.bias.uniform_(-b, b, generator=gen)
        elif isinstance(module, nn.BatchNorm3d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    return net


def interpolate(net: InterpolationNetwork, pair: FramePair) -> FramePair:
    """Predict the two intermediate frames for one unbatched frame pair."""
    f1 = torch.as_tensor(np.asarray(pair.f1))
    f2 = torch.as_tensor(np.asarray(pair.f2))
    with torch.no_grad():
        p1, p2 = net.predict_pair(f1.unsqueeze(0), f2.unsqueeze(0))
    return FramePair(p1.squeeze(0), p2.squeeze(0))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
