"""Image and distribution metrics: PSNR, SSIM, surrogate FID/KID on the
shared frozen feature extractor, and the multi-view sweep report."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .encoders import DOMAIN_DRR, DOMAIN_XRAY
from .errors import ContractViolation
from .geometry import pose_from_angles, render_drr
from .losses import SurrogateFeatureExtractor, DEFAULT_EXTRACTOR_SEED
from .volumes import write_pgm

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
FID_MIN_IMAGES = 16


def psnr(a, b):
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB for identical pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr needs matching shapes, got {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, window=7, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM over all dense 7x7 uniform windows (valid region)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim needs matching shapes, got {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ContractViolation(f"ssim needs images of at least {window}x{window}")
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    # identical second-moment formulation for var and cov so ssim(x,x) == 1.0
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# distribution metrics on the shared surrogate features
# ---------------------------------------------------------------------------

def extract_features(images, extractor_seed=DEFAULT_EXTRACTOR_SEED, extractor=None):
    """Pooled final-stage features of the frozen random extractor, (N, C)."""
    if extractor is None:
        extractor = SurrogateFeatureExtractor(seed=extractor_seed)
    feats = []
    with torch.no_grad():
        for img in images:
            x = torch.as_tensor(np.asarray(img, dtype=np.float32))[None, None]
            feats.append(extractor.pooled(x)[0].numpy())
    return np.stack(feats).astype(np.float64)


def frechet_from_features(feats_a, feats_b):
    """Frechet distance between Gaussian fits of two feature clouds."""
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b):
    """||mu_a-mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The matrix square root comes from eigendecompositions of symmetrized
    products with negative eigenvalues clamped at zero; the clamped magnitude
    is logged.
    """
    diff = float(((mu_a - mu_b) ** 2).sum())
    vals_b, vecs_b = np.linalg.eigh((cov_b + cov_b.T) / 2.0)
    clamped = float(-vals_b[vals_b < 0].sum())
    sqrt_b = (vecs_b * np.sqrt(np.clip(vals_b, 0, None))) @ vecs_b.T
    inner = sqrt_b @ cov_a @ sqrt_b
    vals, _ = np.linalg.eigh((inner + inner.T) / 2.0)
    clamped += float(-vals[vals < 0].sum())
    if clamped > 0:
        log.debug("frechet sqrt clamped negative eigenvalue mass %.3e", clamped)
    tr_sqrt = float(np.sqrt(np.clip(vals, 0, None)).sum())
    return diff + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt


def _check_set_sizes(images_a, images_b, what):
    na, nb = len(images_a), len(images_b)
    if na < FID_MIN_IMAGES or nb < FID_MIN_IMAGES:
        raise ContractViolation(
            f"{what} needs at least {FID_MIN_IMAGES} images per set, "
            f"got {na} and {nb}")


def fid(images_a, images_b, extractor_seed=DEFAULT_EXTRACTOR_SEED):
    _check_set_sizes(images_a, images_b, "fid")
    fa = extract_features(images_a, extractor_seed)
    fb = extract_features(images_b, extractor_seed)
    return frechet_from_features(fa, fb)


def _poly3(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid_from_features(fa, fb):
    """Unbiased polynomial-kernel (degree 3) MMD^2. With equally sized sets
    the paired U-statistic is used, which is exactly zero on identical sets;
    small negative values are expected from the unbiased estimator."""
    m, n = fa.shape[0], fb.shape[0]
    k_xx, k_yy, k_xy = _poly3(fa, fa), _poly3(fb, fb), _poly3(fa, fb)
    if m == n:
        off = ~np.eye(m, dtype=bool)
        h = k_xx + k_yy - k_xy - k_xy.T
        return float(h[off].sum() / (m * (m - 1)))
    sum_xx = k_xx.sum() - np.trace(k_xx)
    sum_yy = k_yy.sum() - np.trace(k_yy)
    return float(sum_xx / (m * (m - 1)) + sum_yy / (n * (n - 1))
                 - 2.0 * k_xy.mean())


def kid(images_a, images_b, extractor_seed=DEFAULT_EXTRACTOR_SEED):
    _check_set_sizes(images_a, images_b, "kid")
    fa = extract_features(images_a, extractor_seed)
    fb = extract_features(images_b, extractor_seed)
    return kid_from_features(fa, fb)


# ---------------------------------------------------------------------------
# model-level reports
# ---------------------------------------------------------------------------

def multiview_report(ckpt_dir, volume, angles, manifest, out_dir=None,
                     style_index=0, extractor_seed=DEFAULT_EXTRACTOR_SEED):
    """Synthesize the volume at each angle, render the matching GT DRRs, and
    report per-angle PSNR/SSIM of the DRR-styled synthesis. Angles outside
    the training sweep are annotated but still rendered. Returns
    (report dict, grid image)."""
    from .training import load_model

    model, cfg, state = load_model(ckpt_dir)
    proj = manifest.projection
    sweep = set(float(a) for a in manifest.sweep_deg)
    style = manifest.load_style_image(style_index)

    rows = [[], [], []]
    per_angle = []
    for angle in angles:
        pose = pose_from_angles(float(angle), manifest.vert_deg, proj)
        gt = render_drr(volume, pose, proj)
        fake_drr = model.synthesize(volume, pose, gt, DOMAIN_DRR, manifest.mu_max)
        fake_x = model.synthesize(volume, pose, style, DOMAIN_XRAY, manifest.mu_max)
        entry = {
            "horiz_deg": float(angle),
            "psnr": psnr(fake_drr, gt),
            "ssim": ssim(fake_drr, gt),
            "in_sweep": float(angle) in sweep,
        }
        if not entry["in_sweep"]:
            entry["warning"] = "angle outside the training sweep"
        per_angle.append(entry)
        rows[0].append(gt)
        rows[1].append(fake_drr)
        rows[2].append(fake_x)
    grid = np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)
    report = {
        "checkpoint": str(ckpt_dir),
        "angles_deg": [float(a) for a in angles],
        "extractor_seed": extractor_seed,
        "per_angle": per_angle,
        "mean_psnr": float(np.mean([e["psnr"] for e in per_angle])),
        "mean_ssim": float(np.mean([e["ssim"] for e in per_angle])),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_pgm(grid, out_dir / "multiview_grid.pgm")
        (out_dir / "multiview_report.json").write_text(json.dumps(report, indent=1))
    return report, grid


def evaluate_split(ckpt_dir, manifest, out_dir=None,
                   extractor_seed=DEFAULT_EXTRACTOR_SEED):
    """Validation metrics: reconstruction PSNR/SSIM over the val split plus
    surrogate FID/KID of the X-ray-styled syntheses against the style set."""
    from .training import load_model

    model, cfg, state = load_model(ckpt_dir)
    proj = manifest.projection
    style_images = [manifest.load_style_image(i)
                    for i in range(len(manifest.style_images))]

    psnrs, ssims = [], []
    synth_x, gt_drrs = [], []
    entries = manifest.val or manifest.train
    style_cycle = 0
    while True:
        for entry in entries:
            vol = manifest.load_volume(entry)
            for angle in manifest.sweep_deg:
                pose = pose_from_angles(angle, manifest.vert_deg, proj)
                gt = manifest.load_drr(entry, angle)
                style = style_images[style_cycle % len(style_images)]
                style_cycle += 1
                fake_x = model.synthesize(vol, pose, style, DOMAIN_XRAY, manifest.mu_max)
                synth_x.append(fake_x)
                if len(gt_drrs) < len(entries) * len(manifest.sweep_deg):
                    fake_drr = model.synthesize(vol, pose, gt, DOMAIN_DRR, manifest.mu_max)
                    psnrs.append(psnr(fake_drr, gt))
                    ssims.append(ssim(fake_drr, gt))
                    gt_drrs.append(gt)
        if len(synth_x) >= FID_MIN_IMAGES:
            break
    while len(gt_drrs) < FID_MIN_IMAGES:
        gt_drrs = gt_drrs + gt_drrs
    report = {
        "checkpoint": str(ckpt_dir),
        "extractor_seed": extractor_seed,
        "n_val_pairs": len(psnrs),
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
        "fid_synth_vs_style": fid(synth_x, style_images, extractor_seed),
        "kid_synth_vs_style": kid(synth_x, style_images, extractor_seed),
        "fid_drr_vs_style": fid(gt_drrs, style_images, extractor_seed),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(report, indent=1))
    return report
