"""The full network bundle and the training-graph loss computation shared by
the optimizer loop and the gradient-verification suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoders import CTEncoder, StyleDecouplingEncoder, DOMAIN_DRR, DOMAIN_XRAY
from .errors import ConfigError
from .networks import Discriminator, Generator, default_content_layers, layers_for_resolution
from .ops import ParamStore
from .pose_attention import PoseAttention, pose_projection
from . import losses as L


@dataclass
class ModelConfig:
    volume_size: int = 64
    image_size: int = 64
    content_dim: int = 128
    style_dim: int = 64
    heads: int = 8
    tau: float = 0.0            # 0 = sqrt(content_dim / heads)
    content_layers: int = 0     # 0 = keep the 8/14 split ratio
    ct_channels: tuple = (8, 16, 24, 32, 32)
    style_channels: tuple = (16, 32, 32, 64, 64, 64)
    content_channels: tuple = (16, 32, 32, 64, 64, 64, 64)
    fmap_base: int = 512
    fmap_max: int = 64
    fmap_min: int = 8
    dis_feature_dim: int = 128
    pose_embed: int = 32

    def resolved_content_layers(self):
        n = layers_for_resolution(self.image_size)
        return self.content_layers or default_content_layers(n)


def paper_config():
    """The published architecture scale: 128^3 volumes, 256^2 images,
    fourteen synthesis layers split 8/6."""
    return ModelConfig(volume_size=128, image_size=256)


class SynthesisModel(nn.Module):
    """E_CT, the style decoupling encoder, the pose attention module, the
    generator, and the discriminator, under stable parameter namespaces
    (e_ct.*, e_sty.s_x.*, e_sty.s_drr.*, e_sty.c.*, pam.*, g.*, d.*)."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.e_ct = CTEncoder(cfg.volume_size, cfg.content_dim, cfg.ct_channels)
        self.e_sty = StyleDecouplingEncoder(
            cfg.image_size, cfg.style_dim, cfg.content_dim,
            cfg.style_channels, cfg.content_channels)
        self.pam = PoseAttention(
            cfg.content_dim, pose_embed=cfg.pose_embed,
            mip_pixels=cfg.volume_size * cfg.volume_size,
            heads=cfg.heads, tau=cfg.tau or None)
        self.g = Generator(cfg.image_size, cfg.content_dim, cfg.style_dim,
                           content_layers=cfg.content_layers or None,
                           fmap_base=cfg.fmap_base, fmap_max=cfg.fmap_max,
                           fmap_min=cfg.fmap_min)
        self.d = Discriminator(cfg.image_size, pose_embed=cfg.pose_embed,
                               feature_dim=cfg.dis_feature_dim,
                               fmap_base=cfg.fmap_base, fmap_max=cfg.fmap_max,
                               fmap_min=cfg.fmap_min)

    def namespaces(self):
        return {"e_ct": self.e_ct, "e_sty": self.e_sty, "pam": self.pam,
                "g": self.g, "d": self.d}

    def generator_side_parameters(self):
        """Everything updated by the generator objective."""
        mods = [self.e_ct, self.e_sty, self.pam, self.g]
        for m in mods:
            yield from m.parameters()

    def named_generator_side_parameters(self):
        for prefix in ("e_ct", "e_sty", "pam", "g"):
            for name, p in getattr(self, prefix).named_parameters():
                yield f"{prefix}.{name}", p

    def param_store(self, seed=None):
        return ParamStore.from_modules(self.namespaces(), seed=seed)

    def load_param_store(self, store):
        store.to_modules(self.namespaces())

    def modified_content_code(self, volumes_t, pose_t, mip_t):
        return self.pam(self.e_ct(volumes_t), pose_t, mip_t)

    @torch.no_grad()
    def synthesize(self, volume, pose, style_image, domain, mu_max=1.0):
        """Inference: one volume, one pose, one style reference."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            v = torch.as_tensor(volume.voxels / mu_max, dtype=dtype)[None, None]
            mip = pose_projection_tensor(volume, pose, mu_max, dtype)
            pose_t = torch.as_tensor(pose.flatten(), dtype=dtype)[None]
            s = self.e_sty.style(torch.as_tensor(style_image, dtype=dtype)[None], domain)
            f_wp = self.pam(self.e_ct(v), pose_t, mip)
            return self.g(f_wp, s)[0].cpu().numpy()
        finally:
            self.train(was_training)


def pose_projection_tensor(volume, pose, mu_max, dtype):
    mip = pose_projection(volume, pose) / mu_max
    return torch.as_tensor(mip, dtype=dtype)[None]


def compute_generator_losses(model, batch, w, extractor=None):
    """The generator-side objective exactly as the training graph wires it.

    ``batch`` carries tensors: volume (B,1,S,S,S) normalized to [0,1],
    pose (B,25), mip (B,S,S), drr (B,R,R), xray (B,R,R).
    Returns the loss dict plus the two syntheses.
    """
    f_ct = model.e_ct(batch["volume"])
    f_wp = model.pam(f_ct, batch["pose"], batch["mip"])
    s_x = model.e_sty.style(batch["xray"], DOMAIN_XRAY)
    s_drr = model.e_sty.style(batch["drr"], DOMAIN_DRR)
    fake_x = model.g(f_wp, s_x)
    fake_drr = model.g(f_wp, s_drr)

    l_rec = L.rec_loss(fake_drr, batch["drr"], w, extractor)
    l_consis, l_cc, l_sc = L.consistency_loss(
        model.e_sty, fake_x, fake_drr, batch["xray"], batch["drr"], w,
        style_x=s_x, style_drr=s_drr)
    l_zero = L.zero_loss(model.e_sty, batch["drr"], batch["xray"])
    l_adv_g = L.adv_gen_loss(model.d(fake_x, batch["pose"]))
    total_g = w.adv * l_adv_g + l_rec + l_consis + w.zero * l_zero
    return {
        "l_rec": l_rec, "l_cc": l_cc, "l_sc": l_sc, "l_consis": l_consis,
        "l_zero": l_zero, "l_adv_g": l_adv_g, "total_g": total_g,
        "fake_x": fake_x, "fake_drr": fake_drr,
    }


def compute_discriminator_losses(model, fake_x, batch, w, r1_mode="autograd",
                                 r1_kwargs=None):
    """Discriminator objective on detached fakes plus R1 at the real DRRs."""
    fake = fake_x.detach()
    scores_fake = model.d(fake, batch["pose"])
    scores_real = model.d(batch["drr"], batch["pose"])
    r1 = L.r1_penalty(model.d, batch["drr"], batch["pose"], mode=r1_mode,
                      **(r1_kwargs or {}))
    l_adv_d = L.adv_dis_loss(scores_fake, scores_real, r1, w)
    total_d = w.adv * l_adv_d
    return {"l_adv_d": l_adv_d, "r1": r1, "total_d": total_d}
