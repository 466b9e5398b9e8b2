"""Content and style encoders.

The CT encoder maps a normalized attenuation volume to a content code through
stacked 3D conv layers. The style decoupling encoder carries three 2D
branches: two domain-specific style branches (disjoint parameters, tanh
codes) and one shared content branch.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigError, ContractViolation
from .ops import LEAKY_SLOPE

DOMAIN_XRAY = "xray"
DOMAIN_DRR = "drr"


def _conv3d_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1),
        nn.BatchNorm3d(c_out),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


class CTEncoder(nn.Module):
    """Input layer, three downsampling layers, latent layer; two convs per
    layer, each followed by batch norm and a 0.2-slope leaky rectifier.
    Downsampling layers halve every spatial extent. A flatten + affine head
    produces the content code."""

    N_DOWN = 3

    def __init__(self, volume_size=64, code_dim=128, channels=(8, 16, 24, 32, 32)):
        super().__init__()
        if len(channels) != 5:
            raise ConfigError("CT encoder needs 5 channel counts "
                              "(input, 3 downsampling, latent)")
        factor = 2 ** self.N_DOWN
        if volume_size % factor:
            raise ConfigError(
                f"volume size {volume_size} not divisible by {factor} "
                f"({self.N_DOWN} downsampling layers)")
        self.volume_size = volume_size
        self.code_dim = code_dim

        layers = []
        c_prev = 1
        for i, c in enumerate(channels):
            down = 1 <= i <= self.N_DOWN
            layers.append(nn.Sequential(
                _conv3d_block(c_prev, c, stride=2 if down else 1),
                _conv3d_block(c, c),
            ))
            c_prev = c
        self.layers = nn.ModuleList(layers)
        latent_extent = volume_size // factor
        self.head = nn.Linear(channels[-1] * latent_extent ** 3, code_dim)

    def forward(self, v):
        if v.dim() == 4:
            v = v.unsqueeze(1)
        if v.shape[-1] != self.volume_size:
            raise ContractViolation(
                f"encoder built for {self.volume_size}^3 volumes, got {tuple(v.shape)}")
        x = v
        for layer in self.layers:
            x = layer(x)
        return self.head(x.flatten(1))

    def spatial_extents(self):
        """Extent after each layer, for architecture conformance checks."""
        e = self.volume_size
        extents = [e]
        for _ in range(self.N_DOWN):
            e //= 2
            extents.append(e)
        extents.append(e)
        return extents


def _stride_plan(resolution, n_convs):
    """Stride-2 until the map reaches 4 pixels, then stride-1."""
    strides = []
    extent = resolution
    for _ in range(n_convs):
        if extent > 4:
            strides.append(2)
            extent //= 2
        else:
            strides.append(1)
    return strides


class StyleBranch(nn.Module):
    """Seven 2D convolutions; adaptive average pooling aggregates features
    before the final conv, whose output is tanh-activated (codes in [-1,1])."""

    def __init__(self, resolution=64, code_dim=64, channels=(16, 32, 32, 64, 64, 64)):
        super().__init__()
        strides = _stride_plan(resolution, len(channels))
        convs = []
        c_prev = 1
        for c, s in zip(channels, strides):
            convs.append(nn.Conv2d(c_prev, c, 3, stride=s, padding=1))
            c_prev = c
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.final = nn.Conv2d(c_prev, code_dim, 1)

    def forward(self, img):
        x = _as_nchw(img)
        for conv in self.convs:
            x = self.act(conv(x))
        x = self.pool(x)
        return torch.tanh(self.final(x)).flatten(1)


class ContentBranch(nn.Module):
    """Domain-shared branch: depth mirrors the style branches (seven convs)
    but ends in a flatten + affine head without tanh."""

    def __init__(self, resolution=64, code_dim=128, channels=(16, 32, 32, 64, 64, 64, 64)):
        super().__init__()
        strides = _stride_plan(resolution, len(channels))
        convs = []
        c_prev = 1
        for c, s in zip(channels, strides):
            convs.append(nn.Conv2d(c_prev, c, 3, stride=s, padding=1))
            c_prev = c
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_prev, code_dim)

    def forward(self, img):
        x = _as_nchw(img)
        for conv in self.convs:
            x = self.act(conv(x))
        return self.head(self.pool(x).flatten(1))


class StyleDecouplingEncoder(nn.Module):
    """Two domain style branches with disjoint parameters plus the shared
    content branch."""

    def __init__(self, resolution=64, style_dim=64, content_dim=128,
                 style_channels=(16, 32, 32, 64, 64, 64),
                 content_channels=(16, 32, 32, 64, 64, 64, 64)):
        super().__init__()
        self.s_x = StyleBranch(resolution, style_dim, style_channels)
        self.s_drr = StyleBranch(resolution, style_dim, style_channels)
        self.c = ContentBranch(resolution, content_dim, content_channels)

    def style(self, img, domain):
        if domain == DOMAIN_XRAY:
            return self.s_x(img)
        if domain == DOMAIN_DRR:
            return self.s_drr(img)
        raise ContractViolation(f"unknown style domain {domain!r}; "
                                f"expected {DOMAIN_XRAY!r} or {DOMAIN_DRR!r}")

    def content(self, img):
        return self.c(img)


def _as_nchw(img):
    if img.dim() == 2:
        return img.unsqueeze(0).unsqueeze(0)
    if img.dim() == 3:
        return img.unsqueeze(1)
    if img.dim() == 4:
        return img
    raise ContractViolation(f"expected a 2D image or batch, got shape {tuple(img.shape)}")
