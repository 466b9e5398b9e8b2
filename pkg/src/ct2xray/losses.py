"""Loss terms: reconstruction, consistency regularization, zero loss, the
pose-aware adversarial pair with R1, and the perceptual-distance surrogate.

The perceptual surrogate is a frozen random-weight conv pyramid with a fixed
seed; the same extractor backs the distributional metrics so there is a
single feature space to validate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import DOMAIN_DRR, DOMAIN_XRAY
from .errors import ConfigError, ContractViolation, TrainingAbort
from .ops import LEAKY_SLOPE

DEFAULT_EXTRACTOR_SEED = 1234


@dataclass
class LossWeights:
    mae: float = 1.0
    lpips: float = 1.0
    cc: float = 1.0
    sc: float = 1.0
    zero: float = 1.0
    adv: float = 0.1
    r1: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossReport:
    step: int
    l_rec: float
    l_cc: float
    l_sc: float
    l_0: float
    l_adv_g: float
    l_adv_d: float
    r1: float
    total_g: float
    total_d: float

    def finite(self):
        return all(np.isfinite(v) for v in asdict(self).values())

    def to_json_line(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json_line(cls, line):
        return cls(**json.loads(line))


# ---------------------------------------------------------------------------
# perceptual surrogate
# ---------------------------------------------------------------------------

class SurrogateFeatureExtractor(nn.Module):
    """Fixed-seed, frozen, random-weight 4-stage conv pyramid. Stage features
    drive the perceptual distance; the pooled final stage drives FID/KID."""

    def __init__(self, seed=DEFAULT_EXTRACTOR_SEED, channels=(16, 32, 64, 64),
                 dtype=torch.float32):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_prev = 1
        for c in channels:
            w = torch.randn(c, c_prev, 3, 3, generator=gen, dtype=dtype)
            w *= (2.0 / (c_prev * 9)) ** 0.5
            b = torch.zeros(c, dtype=dtype)
            conv = nn.Conv2d(c_prev, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(w)
                conv.bias.copy_(b)
            conv.weight.requires_grad_(False)
            conv.bias.requires_grad_(False)
            convs.append(conv.to(dtype))
            c_prev = c
        self.convs = nn.ModuleList(convs)
        self.out_dim = c_prev

    def stages(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            feats.append(x)
        return feats

    def pooled(self, x):
        """Final-stage feature vector, average-pooled over space."""
        return self.stages(x)[-1].mean(dim=(2, 3))


_default_extractors = {}


def default_extractor(dtype=torch.float32, seed=DEFAULT_EXTRACTOR_SEED):
    key = (dtype, seed)
    if key not in _default_extractors:
        _default_extractors[key] = SurrogateFeatureExtractor(seed=seed, dtype=dtype)
    return _default_extractors[key]


def _as_batch(img, dtype):
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img))
    img = img.to(dtype) if img.is_floating_point() else img.to(dtype)
    if img.dim() == 2:
        img = img.unsqueeze(0)
    if img.dim() == 3:
        img = img.unsqueeze(1)
    return img


def perceptual_distance(a, b, extractor=None):
    """Symmetric perceptual distance: per stage, unit-normalize the channel
    vectors, take the mean squared difference, and sum over stages. Zero iff
    the inputs are identical."""
    if extractor is None:
        extractor = default_extractor()
    dtype = next(extractor.parameters()).dtype
    xa, xb = _as_batch(a, dtype), _as_batch(b, dtype)
    if xa.shape != xb.shape:
        raise ContractViolation(
            f"perceptual distance needs matching shapes, got "
            f"{tuple(xa.shape)} vs {tuple(xb.shape)}")
    total = 0.0
    for fa, fb in zip(extractor.stages(xa), extractor.stages(xb)):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total = total + ((na - nb) ** 2).mean()
    return total


# ---------------------------------------------------------------------------
# reconstruction / consistency / zero
# ---------------------------------------------------------------------------

def rec_loss(fake_drr, real_drr, w, extractor=None):
    """lambda_mae * mean|fake - real| + lambda_lpips * perceptual distance."""
    if fake_drr.shape != real_drr.shape:
        raise ContractViolation(
            f"reconstruction loss needs matching shapes, got "
            f"{tuple(fake_drr.shape)} vs {tuple(real_drr.shape)}")
    loss = w.mae * (fake_drr - real_drr).abs().mean()
    if w.lpips:
        loss = loss + w.lpips * perceptual_distance(fake_drr, real_drr, extractor)
    return loss


def _batch_l2(a, b):
    return torch.linalg.vector_norm(a - b, dim=-1).mean()


def consistency_loss(encoder, fake_x, fake_drr, real_x, real_drr, w,
                     style_x=None, style_drr=None):
    """Content codes of the two syntheses must agree; style codes of each
    synthesis must match its reference. No stop-gradients: the terms shape
    both the encoder branches and the generator.

    ``style_x`` / ``style_drr`` reuse already-computed reference style codes.
    Returns (weighted total, content term, style term).
    """
    l_cc = _batch_l2(encoder.content(fake_x), encoder.content(fake_drr))
    if style_x is None:
        style_x = encoder.style(real_x, DOMAIN_XRAY)
    if style_drr is None:
        style_drr = encoder.style(real_drr, DOMAIN_DRR)
    l_sc = (_batch_l2(style_x, encoder.style(fake_x, DOMAIN_XRAY))
            + _batch_l2(style_drr, encoder.style(fake_drr, DOMAIN_DRR)))
    return w.cc * l_cc + w.sc * l_sc, l_cc, l_sc


def l1_code_penalty(code):
    """Per-sample L1 norm (sum of absolute entries), averaged over the batch."""
    return code.abs().sum(dim=-1).mean()


def zero_loss(encoder, real_drr, real_x):
    """Cross-domain style responses should vanish: the X-ray branch applied
    to DRRs plus the DRR branch applied to X-rays, in L1."""
    return (l1_code_penalty(encoder.style(real_drr, DOMAIN_XRAY))
            + l1_code_penalty(encoder.style(real_x, DOMAIN_DRR)))


# ---------------------------------------------------------------------------
# adversarial pair
# ---------------------------------------------------------------------------

def _check_scores(scores, who):
    if not torch.isfinite(scores).all():
        raise TrainingAbort(f"non-finite discriminator score on {who}")


def adv_gen_loss(scores_fake):
    """Generator side: mean(-D(fake))."""
    _check_scores(scores_fake, "fake batch")
    return -scores_fake.mean()


def r1_penalty(disc, real_images, pose_vec, mode="autograd", create_graph=True,
               eps=1e-3, n_dirs=None, seed=0):
    """Mean squared input-gradient norm of the discriminator at real samples.

    ``mode='autograd'`` differentiates through the score (needs double
    backward). ``mode='fd'`` is the surrogate for engines without it: squared
    directional derivatives along random orthonormal directions, scaled by
    n/k so the estimate is unbiased; with a full basis (default) it is exact
    for linear scores.
    """
    if mode == "autograd":
        x = real_images.detach().clone().requires_grad_(True)
        scores = disc(x, pose_vec)
        _check_scores(scores, "real batch")
        (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph)
        return grad.flatten(1).pow(2).sum(dim=1).mean()
    if mode != "fd":
        raise ConfigError(f"unknown R1 mode {mode!r}")

    x = real_images.detach()
    if x.dim() == 2:
        x = x.unsqueeze(0)
    b = x.shape[0]
    n = int(np.prod(x.shape[1:]))
    k = n if n_dirs is None else min(int(n_dirs), n)
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.standard_normal((n, k)))[0]  # orthonormal columns
    dirs = torch.as_tensor(basis.T, dtype=x.dtype).reshape(k, *x.shape[1:])

    base = disc(x, pose_vec)
    _check_scores(base, "real batch")
    total = torch.zeros(b, dtype=x.dtype)
    chunk = max(1, 4096 // max(n, 1))
    for start in range(0, k, chunk):
        d = dirs[start:start + chunk]
        m = d.shape[0]
        perturbed = x.unsqueeze(1) + eps * d.unsqueeze(0)   # (b, m, ...)
        flat = perturbed.reshape(b * m, *x.shape[1:])
        poses = pose_vec.repeat_interleave(m, dim=0)
        scores = disc(flat, poses).reshape(b, m)
        total = total + (((scores - base.unsqueeze(1)) / eps) ** 2).sum(dim=1)
    return ((n / k) * total).mean()


def adv_dis_loss(scores_fake, scores_real, r1_value, w):
    """Discriminator side: mean(D(fake)) - mean(D(real)) + lambda_R1 * R1."""
    _check_scores(scores_fake, "fake batch")
    _check_scores(scores_real, "real batch")
    return scores_fake.mean() - scores_real.mean() + w.r1 * r1_value


def total_losses(l_adv_g, l_adv_d, l_rec, l_consis, l_zero, w):
    """Final generator and discriminator objectives."""
    total_g = w.adv * l_adv_g + l_rec + l_consis + w.zero * l_zero
    total_d = w.adv * l_adv_d
    return total_g, total_d
