"""Camera pose algebra, volume rotation, MIP, and the cone-beam DRR renderer.

Conventions
-----------
World frame: origin at the volume center, axes aligned with the voxel index
axes. Voxel (i, j, k) sits at ``((i, j, k) - (shape - 1) / 2) * spacing`` mm.
Axis 0 is the anatomical long axis (detector rows), axis 1 maps to detector
columns, axis 2 is the canonical viewing depth.

Camera: pinhole looking down its own +z. At (horiz, vert) = (0, 0) the camera
frame coincides with the world frame, so rays run along world +z and the
extrinsic rotation block is the identity. The horizontal angle orbits the
source about the world x axis (the long axis, matching a C-arm sweep); the
vertical angle tilts about the camera y axis before that orbit is applied.

Geometry note: the stored defaults keep SOD > SDD as published. The renderer
treats SOD as source-to-isocenter and SDD as isocenter-to-detector distance,
so the focal distance is SOD + SDD and rays stay well posed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, ConfigError
from .volumes import Volume

POSE_LEN = 25  # 16 row-major extrinsic scalars then 9 row-major intrinsic


@dataclass
class ProjectionConfig:
    sod_mm: float = 1020.0
    sdd_mm: float = 530.0
    det_px: int = 64
    det_pitch_mm: float = 1.6
    step: float = 0.1            # sampling step, in voxel units
    intensity_scale: float = 4.0  # path integral mapped to [0,1] by this scale

    def __post_init__(self):
        if not (0 < self.sod_mm and 0 < self.sdd_mm):
            raise ConfigError(f"SOD/SDD must be positive, got {self.sod_mm}/{self.sdd_mm}")
        if self.step <= 0:
            raise ConfigError(f"sampling step must be positive, got {self.step}")
        if self.det_px < 1 or self.det_pitch_mm <= 0:
            raise ConfigError("detector needs det_px >= 1 and positive pitch")

    @property
    def focal_mm(self):
        return self.sod_mm + self.sdd_mm

    def to_dict(self):
        return {"sod_mm": self.sod_mm, "sdd_mm": self.sdd_mm, "det_px": self.det_px,
                "det_pitch_mm": self.det_pitch_mm, "step": self.step,
                "intensity_scale": self.intensity_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_pitch(volume_extent_mm, config, margin=1.4):
    """Detector pitch that keeps the magnified volume inside the detector."""
    magnification = config.focal_mm / config.sod_mm
    return volume_extent_mm * magnification * margin / config.det_px


@dataclass
class CameraPose:
    extrinsic: np.ndarray  # 4x4 world-to-camera rigid transform
    intrinsic: np.ndarray  # 3x3 pinhole matrix
    horiz_deg: float = 0.0
    vert_deg: float = 0.0

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        rot = self.extrinsic[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-5:
            raise ContractViolation(
                f"extrinsic rotation block must have det +1, got {np.linalg.det(rot):.6f}")

    @property
    def rotation_world_from_camera(self):
        return self.extrinsic[:3, :3].T

    def flatten(self):
        """25-vector: row-major extrinsic (16) then row-major intrinsic (9)."""
        return np.concatenate([self.extrinsic.ravel(), self.intrinsic.ravel()])

    @classmethod
    def unflatten(cls, vec, horiz_deg=0.0, vert_deg=0.0):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (POSE_LEN,):
            raise ContractViolation(f"pose vector must have {POSE_LEN} entries, got {vec.shape}")
        return cls(vec[:16].reshape(4, 4), vec[16:].reshape(3, 3), horiz_deg, vert_deg)

    def to_json(self):
        return {"horiz_deg": self.horiz_deg, "vert_deg": self.vert_deg,
                "extrinsic": self.extrinsic.ravel().tolist(),
                "intrinsic": self.intrinsic.ravel().tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["extrinsic"]).reshape(4, 4),
                   np.array(d["intrinsic"]).reshape(3, 3),
                   d["horiz_deg"], d["vert_deg"])


def _rot_x(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_y(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def pose_from_angles(horiz_deg, vert_deg, config):
    """Camera orbiting the volume center at radius SOD, optical axis through
    the center. Horizontal orbit about world x, vertical tilt about camera y."""
    if not (math.isfinite(horiz_deg) and math.isfinite(vert_deg)):
        raise ContractViolation("pose angles must be finite")
    r_cam = _rot_x(horiz_deg) @ _rot_y(vert_deg)   # world-from-camera
    axis = r_cam @ np.array([0.0, 0.0, 1.0])       # optical axis, source -> center
    source = -config.sod_mm * axis
    r_wc = r_cam.T
    t = -r_wc @ source
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = r_wc
    extrinsic[:3, 3] = t
    f_pix = config.focal_mm / config.det_pitch_mm
    c = (config.det_px - 1) / 2.0
    intrinsic = np.array([[f_pix, 0, c], [0, f_pix, c], [0, 0, 1.0]])
    return CameraPose(extrinsic, intrinsic, horiz_deg, vert_deg)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _trilinear(vox, idx, outside_zero=True):
    """Sample ``vox`` at fractional index coordinates ``idx`` (..., 3).

    ``outside_zero`` zero-fills beyond the voxel-center lattice; otherwise
    coordinates are clamped (nearest-cell extension inside the half-voxel
    border, callers must pre-mask points outside the physical box).
    """
    shape = np.array(vox.shape)
    if (shape < 2).any():
        raise ContractViolation(f"trilinear sampling needs extents >= 2, got {vox.shape}")
    pts = np.asarray(idx, dtype=np.float64)
    if outside_zero:
        inside = np.all((pts >= 0.0) & (pts <= shape - 1), axis=-1)
    else:
        inside = None
    pts = np.clip(pts, 0.0, shape - 1)
    lo = np.minimum(np.floor(pts).astype(np.int64), shape - 2)
    frac = pts - lo
    i, j, k = lo[..., 0], lo[..., 1], lo[..., 2]
    fi, fj, fk = frac[..., 0], frac[..., 1], frac[..., 2]

    c000 = vox[i, j, k]
    c100 = vox[i + 1, j, k]
    c010 = vox[i, j + 1, k]
    c110 = vox[i + 1, j + 1, k]
    c001 = vox[i, j, k + 1]
    c101 = vox[i + 1, j, k + 1]
    c011 = vox[i, j + 1, k + 1]
    c111 = vox[i + 1, j + 1, k + 1]
    c00 = c000 * (1 - fi) + c100 * fi
    c10 = c010 * (1 - fi) + c110 * fi
    c01 = c001 * (1 - fi) + c101 * fi
    c11 = c011 * (1 - fi) + c111 * fi
    c0 = c00 * (1 - fj) + c10 * fj
    c1 = c01 * (1 - fj) + c11 * fj
    out = c0 * (1 - fk) + c1 * fk
    if inside is not None:
        out = np.where(inside, out, 0.0)
    return out


def rotate_volume(volume, pose):
    """Trilinear resampling of the volume under the inverse extrinsic rotation
    about the volume center, zero-filled outside. Output shape equals input."""
    vox = volume.voxels.astype(np.float64)
    shape = np.array(vox.shape)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    center = (shape - 1) / 2.0
    r = pose.rotation_world_from_camera

    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    world = (grid - center) * spacing
    sample_world = world @ r.T          # output voxel pulls from R_cam @ r
    sample_idx = sample_world / spacing + center
    out = _trilinear(vox, sample_idx, outside_zero=True)
    return Volume(out.astype(np.float32), tuple(volume.spacing))


def max_intensity_projection(volume):
    """Per-pixel maximum along the canonical depth axis; output H x W."""
    return volume.voxels.max(axis=2)


# ---------------------------------------------------------------------------
# DRR renderer
# ---------------------------------------------------------------------------

def path_integral_image(volume, pose, config, chunk_px=1024):
    """Radiological path A = integral of mu along each cone-beam ray, by
    composite midpoint sampling with trilinear interpolation.

    Per detector pixel the ray runs from the source through the pixel center;
    sampling is restricted to the physical volume box, with a partial final
    interval so homogeneous media integrate exactly.
    """
    vox = volume.voxels.astype(np.float64)
    shape = np.array(vox.shape)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    half = shape * spacing / 2.0

    r_cam = pose.rotation_world_from_camera
    axis = r_cam @ np.array([0.0, 0.0, 1.0])
    row_dir = r_cam @ np.array([1.0, 0.0, 0.0])
    col_dir = r_cam @ np.array([0.0, 1.0, 0.0])
    source = -config.sod_mm * axis
    det_center = config.sdd_mm * axis

    n = config.det_px
    offsets = (np.arange(n) - (n - 1) / 2.0) * config.det_pitch_mm
    pix = (det_center[None, None, :]
           + offsets[:, None, None] * row_dir[None, None, :]
           + offsets[None, :, None] * col_dir[None, None, :])
    pix = pix.reshape(-1, 3)
    rays = pix - source[None, :]
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    # slab intersection with the physical box [-half, half]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
    t_lo = (-half[None, :] - source[None, :]) * inv
    t_hi = (half[None, :] - source[None, :]) * inv
    parallel = ~np.isfinite(inv)
    inside_slab = np.abs(source[None, :]) <= half[None, :]
    t_near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf),
                      np.minimum(t_lo, t_hi))
    t_far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf),
                     np.maximum(t_lo, t_hi))
    t0 = np.maximum(t_near.max(axis=1), 0.0)
    t1 = t_far.min(axis=1)
    span = np.maximum(t1 - t0, 0.0)

    step_mm = config.step * float(spacing.min())
    center = (shape - 1) / 2.0
    out = np.zeros(rays.shape[0])
    for start in range(0, rays.shape[0], chunk_px):
        sl = slice(start, min(start + chunk_px, rays.shape[0]))
        sp, d, tt0 = span[sl], rays[sl], t0[sl]
        n_steps = np.maximum(np.ceil(sp / step_mm).astype(np.int64), 0)
        n_max = int(n_steps.max()) if n_steps.size else 0
        if n_max == 0:
            continue
        k = np.arange(n_max)[None, :]
        widths = np.where(k < n_steps[:, None] - 1, step_mm, 0.0)
        last = sp - (n_steps - 1) * step_mm  # partial final interval
        widths = np.where(k == n_steps[:, None] - 1, last[:, None], widths)
        t_mid = tt0[:, None] + np.where(
            k == n_steps[:, None] - 1,
            (n_steps[:, None] - 1) * step_mm + last[:, None] / 2.0,
            (k + 0.5) * step_mm)
        pts = source[None, None, :] + t_mid[..., None] * d[:, None, :]
        idx = pts / spacing + center
        mu = _trilinear(vox, idx, outside_zero=False)
        out[sl] = (mu * widths).sum(axis=1)
    return out.reshape(n, n)


def render_drr(volume, pose, config):
    """DRR as a normalized path integral (bone-bright), clipped to [0,1]."""
    a = path_integral_image(volume, pose, config)
    return np.clip(a / config.intensity_scale, 0.0, 1.0).astype(np.float32)
