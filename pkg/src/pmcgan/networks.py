"""U-MAR generator, PatchGAN discriminators and the latent encoder.

Tensors are NCHW. The generator consumes the 40-channel condition stack
(43 channels from stage 2 on, with the upsampled previous-stage output
appended) plus a 16-d latent code that is masked by the pedestrian mask
and concatenated into every encoder level.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import CONDITION_CHANNELS, MASK_CHANNEL
from .errors import ShapeMismatch

LATENT_DIM = 16


@dataclass
class GeneratorSpec:
    stage: int = 1
    in_channels: int = CONDITION_CHANNELS
    latent_dim: int = LATENT_DIM
    base_width: int = 64
    n_levels: int = 4
    msrb_per_level: int = 2
    carb_per_level: int = 2
    leaky_slope: float = 0.2
    max_width: int = 256
    carb_reduction: int = 16

    @property
    def input_channels(self) -> int:
        # stages 2-3 also see the previous stage's RGB output
        return self.in_channels + (3 if self.stage > 1 else 0)

    def width(self, level: int) -> int:
        return min(self.base_width * 2**level, self.max_width)

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_channels(x: torch.Tensor, channels: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeMismatch(f"{name} expects N x {channels} x H x W input, got {tuple(x.shape)}")


class MSRB(nn.Module):
    """Multi-scale residual block.

    Two parallel 3x3 / 5x5 branches, a second pair of branches over their
    cross-concatenation, and a 1x1 fusion back to ``channels``.
    """

    def __init__(self, channels: int, slope: float = 0.2):
        super().__init__()
        c = channels
        self.channels = c
        self.conv3_1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv5_1 = nn.Conv2d(c, c, 5, padding=2)
        self.conv3_2 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.conv5_2 = nn.Conv2d(2 * c, 2 * c, 5, padding=2)
        self.fuse = nn.Conv2d(4 * c, c, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        _check_channels(x, self.channels, "MSRB")
        s1 = self.act(self.conv3_1(x))
        p1 = self.act(self.conv5_1(x))
        s2 = self.act(self.conv3_2(torch.cat([s1, p1], 1)))
        p2 = self.act(self.conv5_2(torch.cat([p1, s1], 1)))
        return x + self.fuse(torch.cat([s2, p2], 1))


class ChannelAttention(nn.Module):
    """Per-channel gate in (0, 1): global average pool, bottleneck, sigmoid."""

    def __init__(self, channels: int, reduction: int = 16, slope: float = 0.2):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.down = nn.Conv2d(channels, hidden, 1)
        self.up = nn.Conv2d(hidden, channels, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        y = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.up(self.act(self.down(y))))


class CARB(nn.Module):
    """Channel-attention residual block: ``x + a(g(x)) * g(x)``."""

    def __init__(self, channels: int, reduction: int = 16, slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.attention = ChannelAttention(channels, reduction, slope)

    def forward(self, x):
        _check_channels(x, self.channels, "CARB")
        g = self.body(x)
        return x + self.attention(g) * g


def inject_latent(z: torch.Tensor, mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Replicate ``z`` spatially, multiply by ``mask`` and nearest-downsample to ``size``."""
    n, d = z.shape
    planes = z.view(n, d, 1, 1) * mask
    if tuple(planes.shape[-2:]) != tuple(size):
        planes = F.interpolate(planes, size=size, mode="nearest")
    return planes


class UMARGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec | None = None):
        super().__init__()
        self.spec = spec = spec or GeneratorSpec()
        L, slope = spec.latent_dim, spec.leaky_slope
        self.act = nn.LeakyReLU(slope)

        self.head = nn.Conv2d(spec.input_channels + L, spec.width(0), 3, padding=1)
        self.down = nn.ModuleList()
        self.enc_blocks = nn.ModuleList([self._msrbs(spec.width(0))])
        for k in range(1, spec.n_levels + 1):
            self.down.append(nn.Conv2d(spec.width(k - 1) + L, spec.width(k), 4, stride=2, padding=1))
            self.enc_blocks.append(self._msrbs(spec.width(k)))

        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for k in range(spec.n_levels, 0, -1):
            wk, wp = spec.width(k), spec.width(k - 1)
            self.up.append(nn.ConvTranspose2d(wk, wp, 4, stride=2, padding=1))
            self.fuse.append(nn.Conv2d(2 * wp, wp, 1))
            self.dec_blocks.append(
                nn.Sequential(*[CARB(wp, spec.carb_reduction, slope) for _ in range(spec.carb_per_level)])
            )
        self.tail = nn.Conv2d(spec.width(0), 3, 3, padding=1)
        init_weights(self)

    def _msrbs(self, c):
        return nn.Sequential(*[MSRB(c, self.spec.leaky_slope) for _ in range(self.spec.msrb_per_level)])

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        _check_channels(x, spec.input_channels, "generator")
        size = x.shape[-1]
        if x.shape[-2] != size or size % 2**spec.n_levels:
            raise ShapeMismatch(f"generator needs square inputs divisible by {2**spec.n_levels}, got {tuple(x.shape)}")
        if z.dim() != 2 or z.shape[1] != spec.latent_dim or z.shape[0] != x.shape[0]:
            raise ShapeMismatch(f"latent code must be N x {spec.latent_dim}, got {tuple(z.shape)}")
        mask = x[:, MASK_CHANNEL:MASK_CHANNEL + 1]

        h = self.act(self.head(torch.cat([x, inject_latent(z, mask, x.shape[-2:])], 1)))
        h = self.enc_blocks[0](h)
        skips = [h]
        for down, blocks in zip(self.down, self.enc_blocks[1:]):
            h = torch.cat([h, inject_latent(z, mask, h.shape[-2:])], 1)
            h = blocks(self.act(down(h)))
            skips.append(h)

        skips.pop()
        for up, fuse, blocks in zip(self.up, self.fuse, self.dec_blocks):
            h = self.act(up(h))
            h = self.act(fuse(torch.cat([h, skips.pop()], 1)))
            h = blocks(h)
        return torch.tanh(self.tail(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN scoring overlapping patches; raw scores, no sigmoid.

    Normalisation layers are omitted so that a patch score depends only on
    its receptive field.
    """

    def __init__(self, in_channels: int = CONDITION_CHANNELS + 3, width: int = 64, n_layers: int = 3, slope: float = 0.2):
        super().__init__()
        self.in_channels = in_channels
        layers = [nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
        cur = width
        for i in range(1, n_layers):
            nxt = width * min(2**i, 8)
            layers += [nn.Conv2d(cur, nxt, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
            cur = nxt
        nxt = width * min(2**n_layers, 8)
        layers += [nn.Conv2d(cur, nxt, 4, stride=1, padding=1), nn.LeakyReLU(slope)]
        layers.append(nn.Conv2d(nxt, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        _check_channels(x, self.in_channels, "discriminator")
        return self.model(x)


class _EncoderBlock(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.body = nn.Sequential(
            nn.LeakyReLU(slope),
            nn.Conv2d(cin, cin, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.AvgPool2d(2),
        )
        self.shortcut = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


class LatentEncoder(nn.Module):
    """Residual encoder from a masked image to Gaussian ``(mu, logvar)``."""

    def __init__(self, in_channels: int = 3, width: int = 64, n_blocks: int = 4, latent_dim: int = LATENT_DIM, slope: float = 0.2):
        super().__init__()
        self.in_channels = in_channels
        layers = [nn.Conv2d(in_channels, width, 4, stride=2, padding=1)]
        for k in range(1, n_blocks + 1):
            layers.append(_EncoderBlock(width * min(k, 4), width * min(k + 1, 4), slope))
        layers.append(nn.LeakyReLU(slope))
        self.features = nn.Sequential(*layers)
        out = width * min(n_blocks + 1, 4)
        self.fc_mu = nn.Linear(out, latent_dim)
        self.fc_logvar = nn.Linear(out, latent_dim)
        init_weights(self)

    def forward(self, x):
        _check_channels(x, self.in_channels, "encoder")
        h = F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def build_stage_modules(spec: GeneratorSpec, d_width: int = 64, d_layers: int = 3, e_width: int = 64, e_blocks: int = 4):
    """Fresh ``(G, E, D_img, D_ped)`` for one stage."""
    G = UMARGenerator(spec)
    E = LatentEncoder(3, e_width, e_blocks, spec.latent_dim, spec.leaky_slope)
    d_in = spec.in_channels + 3
    D_img = PatchDiscriminator(d_in, d_width, d_layers, spec.leaky_slope)
    D_ped = PatchDiscriminator(d_in, d_width, d_layers, spec.leaky_slope)
    return G, E, D_img, D_ped
