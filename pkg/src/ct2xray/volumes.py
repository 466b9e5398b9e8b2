"""Procedural CT phantoms, attenuation volumes, the pseudo-X-ray style
transform, and raw-file volume/image I/O.

Phantoms stand in for clinical spine scans: a soft-tissue ellipsoid holds a
stack of denser bone bodies laid out along the anatomical long axis (axis 0),
air outside. Values are linear attenuation coefficients mu in 1/mm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError

MU_WATER = 0.02  # 1/mm, used for Hounsfield conversion of real scans


@dataclass
class Volume:
    voxels: np.ndarray            # (H, W, D) linear attenuation, 1/mm
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel along each axis

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ContractViolation(f"volume must be 3D, got shape {self.voxels.shape}")
        if (self.voxels < 0).any():
            raise ContractViolation("attenuation must be nonnegative everywhere")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractViolation(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape

    def extent_mm(self):
        return tuple(n * s for n, s in zip(self.voxels.shape, self.spacing))


def from_hounsfield(hu, spacing=(1.0, 1.0, 1.0)):
    """mu = mu_water * (1 + HU/1000), clamped at zero."""
    mu = MU_WATER * (1.0 + np.asarray(hu, dtype=np.float32) / 1000.0)
    return Volume(np.maximum(mu, 0.0), spacing)


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_bone_bodies: int = 6
    mu_soft: tuple = (0.016, 0.024)   # background tissue range, 1/mm
    mu_bone: tuple = (0.045, 0.075)   # bone body range, 1/mm
    texture: float = 0.1              # relative smooth variation inside tissue

    def validate(self):
        if self.n_bone_bodies < 1:
            raise ContractViolation("phantom needs at least one bone body")
        if not (self.mu_bone[0] > self.mu_soft[1] > 0):
            raise ContractViolation(
                f"mu ranges must satisfy bone > soft > air=0, got "
                f"bone={self.mu_bone} soft={self.mu_soft}")
        if any(n < 8 for n in self.shape):
            raise ContractViolation(f"phantom shape too small: {self.shape}")


def _ellipsoid_mask(shape, center, semi_axes):
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    acc = np.zeros(shape)
    for g, c, a in zip(grids, center, semi_axes):
        acc += ((g - c) / a) ** 2
    return acc <= 1.0


def _smooth_field(rng, shape, knots=4):
    """Low-frequency multiplicative texture from a trilinearly upsampled
    coarse noise grid."""
    coarse = rng.standard_normal((knots, knots, knots))
    axes = [np.linspace(0, knots - 1, n) for n in shape]
    lo = [np.minimum(np.floor(a).astype(int), knots - 2) for a in axes]
    fr = [a - l for a, l in zip(axes, lo)]
    li, lj, lk = np.ix_(lo[0], lo[1], lo[2])
    fi, fj, fk = np.ix_(fr[0], fr[1], fr[2])
    out = np.zeros(shape)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                w = ((fi if di else 1 - fi) * (fj if dj else 1 - fj)
                     * (fk if dk else 1 - fk))
                out += w * coarse[li + di, lj + dj, lk + dk]
    return out


def generate_phantom(spec, seed):
    """Deterministic phantom for a given seed: soft-tissue ellipsoid, a spine
    of bone ellipsoids fully inside the bounds, air outside."""
    spec.validate()
    rng = np.random.default_rng(seed)
    shape = tuple(spec.shape)
    dims = np.array(shape, dtype=np.float64)
    center = (dims - 1) / 2.0

    vox = np.zeros(shape, dtype=np.float64)

    body_center = center + rng.uniform(-0.02, 0.02, size=3) * dims
    body_axes = np.array([0.46, 0.38, 0.38]) * dims * rng.uniform(0.92, 1.0, size=3)
    soft_mask = _ellipsoid_mask(shape, body_center, body_axes)
    mu_soft = rng.uniform(*spec.mu_soft)
    texture = 1.0 + spec.texture * np.tanh(_smooth_field(rng, shape))
    vox[soft_mask] = (mu_soft * texture)[soft_mask]

    # bone bodies stacked along axis 0 with jitter, each fully inside bounds
    n = spec.n_bone_bodies
    xs = np.linspace(0.22, 0.78, n) * dims[0]
    bone_mask = np.zeros(shape, dtype=bool)
    for x in xs:
        radius = rng.uniform(0.05, 0.10, size=3) * dims
        c = np.array([
            x + rng.uniform(-0.02, 0.02) * dims[0],
            body_center[1] + rng.uniform(-0.10, 0.10) * dims[1],
            body_center[2] + rng.uniform(-0.10, 0.10) * dims[2],
        ])
        c = np.clip(c, radius + 1, dims - radius - 2)
        mask = _ellipsoid_mask(shape, c, radius)
        bone_mask |= mask
        vox[mask] = rng.uniform(*spec.mu_bone)

    vox = np.maximum(vox, 0.0)
    if not bone_mask.any():
        raise ContractViolation("phantom generation produced no bone voxels")
    return Volume(vox.astype(np.float32), spec.spacing)


def make_pseudo_xray(image, style_seed):
    """Fixed style family standing in for the real X-ray domain: gamma curve,
    contrast stretch, signal-dependent noise, and corner vignetting.
    Deterministic per seed; a zero image maps to a zero image."""
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ContractViolation("pseudo-xray input must lie in [0,1]")
    rng = np.random.default_rng(style_seed)

    gamma = rng.uniform(1.5, 2.5)
    out = img ** gamma

    p_lo, p_hi = rng.uniform(1, 5), rng.uniform(95, 99)
    lo, hi = np.percentile(out, [p_lo, p_hi])
    if hi - lo > 1e-6:
        out = np.clip((out - lo) / (hi - lo), 0.0, 1.0)

    h, w = out.shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    strength = rng.uniform(0.25, 0.5)
    out = out * (1.0 - strength * (xx ** 2 + yy ** 2) / 2.0)

    sigma0 = rng.uniform(0.01, 0.03)
    out = out + rng.standard_normal(out.shape) * sigma0 * np.sqrt(np.maximum(out, 0.0))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# raw-file I/O: <name>.f32 little-endian C-order plus <name>.json sidecar
# ---------------------------------------------------------------------------

def _paths(path):
    path = Path(path)
    if path.suffix == ".f32":
        base = path.with_suffix("")
    else:
        base = path
    return base.with_suffix(".f32"), base.with_suffix(".json")


def save_volume(volume, path):
    raw_path, sidecar_path = _paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(volume.voxels.astype("<f4"))
    raw_path.write_bytes(raw.tobytes())
    sidecar_path.write_text(json.dumps({
        "shape": list(volume.voxels.shape),
        "spacing_mm": list(volume.spacing),
        "dtype": "f32",
    }, indent=1))
    return raw_path


def load_volume(path):
    raw_path, sidecar_path = _paths(path)
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {meta.get('dtype')} in {sidecar_path}")
    shape = tuple(meta["shape"])
    blob = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise FormatError(
            f"{raw_path} holds {len(blob)} bytes but sidecar shape {shape} "
            f"needs {expected}")
    vox = np.frombuffer(blob, dtype="<f4").reshape(shape)
    return Volume(vox.copy(), tuple(meta["spacing_mm"]))


def save_image(image, path):
    raw_path, sidecar_path = _paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    img = np.ascontiguousarray(np.asarray(image, dtype="<f4"))
    if img.ndim != 2:
        raise ContractViolation(f"image must be 2D, got shape {img.shape}")
    raw_path.write_bytes(img.tobytes())
    sidecar_path.write_text(json.dumps({
        "shape": list(img.shape), "dtype": "f32",
    }, indent=1))
    return raw_path


def load_image(path):
    raw_path, sidecar_path = _paths(path)
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    shape = tuple(meta["shape"])
    blob = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise FormatError(
            f"{raw_path} holds {len(blob)} bytes but sidecar shape {shape} "
            f"needs {expected}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).copy()


def write_pgm(image, path, maxval=65535):
    """16-bit binary PGM preview (P5, big-endian sample order)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * maxval).astype(">u2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + data.tobytes())
    return path
