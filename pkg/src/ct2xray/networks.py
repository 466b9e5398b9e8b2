"""AdaIN synthesis generator and the pose-conditioned discriminator.

The generator grows a learned 4x4 constant, doubling resolution every two
layers. Early layers take their AdaIN modulation from the content code, late
layers from the style code; there is no per-layer noise, so generation is
deterministic given the codes.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigError, ContractViolation
from .ops import LEAKY_SLOPE

PAPER_LAYERS = 14
PAPER_CONTENT_LAYERS = 8


def layers_for_resolution(resolution):
    """4x4 seed doubling every two layers: L = 2*log2(res) - 2."""
    log = math.log2(resolution)
    if resolution < 8 or log != int(log):
        raise ConfigError(f"resolution must be a power of two >= 8, got {resolution}")
    return 2 * int(log) - 2


def default_content_layers(n_layers):
    """Preserve the 8/14 content/style split ratio at other depths."""
    return round(n_layers * PAPER_CONTENT_LAYERS / PAPER_LAYERS)


class AdaIN(nn.Module):
    """Normalize each channel over space, then scale/shift from a code-driven
    affine. Post-modulation per-channel statistics are (shift, |scale|)."""

    def __init__(self, channels, code_dim):
        super().__init__()
        self.affine = nn.Linear(code_dim, 2 * channels)
        nn.init.normal_(self.affine.weight, std=0.02)
        with torch.no_grad():
            self.affine.bias[:channels] = 1.0  # scale path starts at identity
            self.affine.bias[channels:] = 0.0

    def forward(self, x, code):
        scale, shift = self.affine(code).chunk(2, dim=1)
        mean = x.mean(dim=(2, 3), keepdim=True)
        std = torch.sqrt(x.var(dim=(2, 3), keepdim=True, unbiased=False) + 1e-8)
        normalized = (x - mean) / std
        return scale[:, :, None, None] * normalized + shift[:, :, None, None]


class SynthesisLayer(nn.Module):
    def __init__(self, c_in, c_out, code_dim, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.adain = AdaIN(c_out, code_dim)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x, code):
        if self.upsample:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.act(self.adain(self.conv(x), code))


class Generator(nn.Module):
    """Synthesis stack of ``n_layers`` AdaIN layers; the first
    ``content_layers`` are modulated by the content code, the rest by the
    style code. Output is a single-channel image in [0,1]."""

    def __init__(self, resolution=64, content_dim=128, style_dim=64,
                 content_layers=None, fmap_base=512, fmap_max=64, fmap_min=8):
        super().__init__()
        self.resolution = resolution
        self.n_layers = layers_for_resolution(resolution)
        self.content_layers = (content_layers if content_layers is not None
                               else default_content_layers(self.n_layers))
        if not (1 <= self.content_layers < self.n_layers):
            raise ConfigError(
                f"content layer count {self.content_layers} out of range "
                f"for {self.n_layers} synthesis layers")
        self.content_dim = content_dim
        self.style_dim = style_dim

        def nf(res):
            return int(min(max(fmap_base // res, fmap_min), fmap_max))

        self.const = nn.Parameter(torch.randn(1, nf(4), 4, 4))
        layers = []
        res = 4
        c_prev = nf(4)
        for i in range(1, self.n_layers + 1):
            upsample = i > 1 and i % 2 == 1
            if upsample:
                res *= 2
            code_dim = content_dim if i <= self.content_layers else style_dim
            layers.append(SynthesisLayer(c_prev, nf(res), code_dim, upsample))
            c_prev = nf(res)
        self.layers = nn.ModuleList(layers)
        self.to_image = nn.Conv2d(c_prev, 1, 1)

    def forward(self, f_content, f_style, return_activations=False):
        if f_content.shape[-1] != self.content_dim:
            raise ContractViolation(
                f"content code length {f_content.shape[-1]} != {self.content_dim}")
        if f_style.shape[-1] != self.style_dim:
            raise ContractViolation(
                f"style code length {f_style.shape[-1]} != {self.style_dim}")
        x = self.const.expand(f_content.shape[0], -1, -1, -1)
        activations = []
        for i, layer in enumerate(self.layers, start=1):
            code = f_content if i <= self.content_layers else f_style
            x = layer(x, code)
            if return_activations:
                activations.append(x)
        img = torch.sigmoid(self.to_image(x)).squeeze(1)
        if return_activations:
            return img, activations
        return img


class Discriminator(nn.Module):
    """Conv downsampling stack to a feature vector, concatenated with a pose
    embedding, affinely reduced to one unbounded scalar per image."""

    def __init__(self, resolution=64, pose_dim=25, pose_embed=32,
                 feature_dim=128, fmap_base=512, fmap_max=64, fmap_min=8):
        super().__init__()
        self.resolution = resolution
        layers_for_resolution(resolution)  # validates the resolution
        n_down = int(math.log2(resolution)) - 2  # res -> 4

        def nf(res):
            return int(min(max(fmap_base // res, fmap_min), fmap_max))

        convs = []
        res = resolution
        c_prev = 1
        for _ in range(n_down):
            res //= 2
            convs.append(nn.Conv2d(c_prev, nf(res), 3, stride=2, padding=1))
            c_prev = nf(res)
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.feature = nn.Linear(c_prev * 4 * 4, feature_dim)
        self.pose_embed = nn.Linear(pose_dim, pose_embed)
        self.head = nn.Linear(feature_dim + pose_embed, 1)

    def forward(self, img, pose_vec):
        if img.dim() == 2:
            img = img.unsqueeze(0)
        if img.dim() == 3:
            img = img.unsqueeze(1)
        if img.shape[-1] != self.resolution or img.shape[-2] != self.resolution:
            raise ContractViolation(
                f"discriminator built for {self.resolution}^2 images, "
                f"got {tuple(img.shape)}")
        x = img
        for conv in self.convs:
            x = self.act(conv(x))
        feat = self.act(self.feature(x.flatten(1)))
        p = pose_vec / (1.0 + pose_vec.abs())
        pe = self.act(self.pose_embed(p))
        return self.head(torch.cat([feat, pe], dim=1)).squeeze(1)
