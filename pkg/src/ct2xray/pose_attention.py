"""Pose attention: re-weights the CT content code with attention over the
projection of the rotated volume at the target view.

The 1D codes get a sequence axis by reshaping into heads, (B, d) ->
(B, h, d/h), so the attention map is h x h per sample. The query mixes the
content code with an embedded camera pose; keys and values embed the
standardized maximum intensity projection.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .geometry import max_intensity_projection, rotate_volume
from .ops import LEAKY_SLOPE


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(
        nn.Linear(d_in, d_hidden),
        nn.LeakyReLU(LEAKY_SLOPE),
        nn.Linear(d_hidden, d_out),
    )


class PoseAttention(nn.Module):
    def __init__(self, code_dim=128, pose_dim=25, pose_embed=32,
                 mip_pixels=4096, heads=8, tau=None):
        super().__init__()
        if code_dim % heads:
            raise ConfigError(f"code dim {code_dim} not divisible by {heads} heads")
        self.heads = heads
        self.code_dim = code_dim
        # sqrt(d/h) keeps logits O(1); configurable because the right scale
        # for sharp vs. smooth attention is data-dependent
        self.tau = float(tau) if tau is not None else math.sqrt(code_dim / heads)
        if self.tau <= 0:
            raise ConfigError(f"attention temperature must be positive, got {self.tau}")
        self.pose_mlp = _mlp(pose_dim, pose_embed, pose_embed)
        self.merge = _mlp(code_dim + pose_embed, code_dim, code_dim)
        self.proj_mlp = _mlp(mip_pixels, code_dim, code_dim)

    def _qkv(self, f_c, pose_vec, mip):
        # squash the raw 25-vector: extrinsic translations and intrinsic
        # focal entries are in the hundreds of mm/pixels
        p = pose_vec / (1.0 + pose_vec.abs())
        q = self.merge(torch.cat([f_c, self.pose_mlp(p)], dim=1))
        flat = mip.flatten(1)
        mean = flat.mean(dim=1, keepdim=True)
        std = flat.std(dim=1, keepdim=True)
        kv = self.proj_mlp((flat - mean) / (std + 1e-6))
        b = f_c.shape[0]
        w = self.code_dim // self.heads
        return q.view(b, self.heads, w), kv.view(b, self.heads, w)

    def attention(self, f_c, pose_vec, mip, tau=None):
        q, kv = self._qkv(f_c, pose_vec, mip)
        logits = q @ kv.transpose(1, 2) / (tau if tau is not None else self.tau)
        return torch.softmax(logits, dim=-1), kv

    def forward(self, f_c, pose_vec, mip):
        attn, kv = self.attention(f_c, pose_vec, mip)
        out = attn @ kv
        return out.reshape(f_c.shape[0], self.code_dim)


def pose_projection(volume, pose):
    """MIP of the volume rotated to the target pose (the K/V input)."""
    return max_intensity_projection(rotate_volume(volume, pose))


def modify_content(pam, f_c, pose, volume, mu_max=None):
    """Single-sample convenience: computes the pose projection from the raw
    volume and runs the attention module. ``mu_max`` normalizes the volume
    the same way the encoder input was normalized."""
    mip = pose_projection(volume, pose)
    if mu_max:
        mip = mip / mu_max
    dtype = next(pam.parameters()).dtype
    mip_t = torch.as_tensor(mip, dtype=dtype).unsqueeze(0)
    pose_t = torch.as_tensor(pose.flatten(), dtype=dtype).unsqueeze(0)
    if f_c.dim() == 1:
        f_c = f_c.unsqueeze(0)
    return pam(f_c, pose_t, mip_t)


def attention_entropy(pam, f_c, pose_vec, mip, tau=None):
    """Mean Shannon entropy (nats) of the attention rows; non-decreasing in
    the temperature for fixed queries and keys."""
    with torch.no_grad():
        attn, _ = pam.attention(f_c, pose_vec, mip, tau=tau)
        p = attn.clamp_min(1e-12)
        return float(-(p * p.log()).sum(dim=-1).mean())
