"""Dataset construction: phantom cohorts, precomputed DRR sweeps, the unpaired
pseudo-X-ray style domain, and the manifest tying them together."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation, FormatError
from .geometry import ProjectionConfig, default_pitch, path_integral_image, pose_from_angles
from .volumes import PhantomSpec, Volume, generate_phantom, load_image, load_volume, \
    make_pseudo_xray, save_image, save_volume

DEFAULT_SWEEP = (-60.0, -30.0, 0.0, 30.0, 60.0)


@dataclass
class DatasetConfig:
    seed: int = 0
    n_train: int = 8
    n_val: int = 2
    n_style_volumes: int = 4
    volume_shape: tuple = (64, 64, 64)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    sweep_deg: tuple = DEFAULT_SWEEP
    vert_deg: float = 0.0
    n_bone_bodies: int = 6
    mu_soft: tuple = (0.016, 0.024)
    mu_bone: tuple = (0.045, 0.075)
    texture: float = 0.1
    sod_mm: float = 1020.0
    sdd_mm: float = 530.0
    det_px: int = 64
    det_pitch_mm: float = 0.0      # 0 = derive from volume extent
    step: float = 0.1
    intensity_scale: float = 0.0   # 0 = calibrate to the max path integral
    style_seed_offset: int = 500   # style phantom seeds start here

    def phantom_spec(self):
        return PhantomSpec(shape=tuple(self.volume_shape),
                           spacing=tuple(self.spacing_mm),
                           n_bone_bodies=self.n_bone_bodies,
                           mu_soft=tuple(self.mu_soft),
                           mu_bone=tuple(self.mu_bone),
                           texture=self.texture)


@dataclass
class VolumeEntry:
    id: str
    volume: str       # path relative to the dataset root
    seed: int
    drrs: list = field(default_factory=list)  # [{"horiz_deg", "path"}]


@dataclass
class StyleImageEntry:
    path: str
    volume_id: str
    horiz_deg: float
    style_seed: int


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    volume_shape: tuple
    spacing_mm: tuple
    mu_max: float
    projection: ProjectionConfig
    sweep_deg: tuple
    vert_deg: float
    train: list
    val: list
    style_volumes: list   # [{"id", "seed", "volume"}]
    style_images: list

    def save(self):
        payload = {
            "seed": self.seed,
            "volume_shape": list(self.volume_shape),
            "spacing_mm": list(self.spacing_mm),
            "mu_max": self.mu_max,
            "projection": self.projection.to_dict(),
            "pose_sweep_deg": list(self.sweep_deg),
            "vert_deg": self.vert_deg,
            "train": [asdict(e) for e in self.train],
            "val": [asdict(e) for e in self.val],
            "style_volumes": self.style_volumes,
            "style_images": [asdict(e) for e in self.style_images],
        }
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise FormatError(f"no manifest at {path}")
        d = json.loads(path.read_text())
        def entries(key):
            return [VolumeEntry(e["id"], e["volume"], e["seed"], e["drrs"])
                    for e in d[key]]
        return cls(
            root=path.parent, seed=d["seed"],
            volume_shape=tuple(d["volume_shape"]),
            spacing_mm=tuple(d["spacing_mm"]), mu_max=d["mu_max"],
            projection=ProjectionConfig.from_dict(d["projection"]),
            sweep_deg=tuple(d["pose_sweep_deg"]), vert_deg=d["vert_deg"],
            train=entries("train"), val=entries("val"),
            style_volumes=d["style_volumes"],
            style_images=[StyleImageEntry(**e) for e in d["style_images"]],
        )

    def validate_files(self):
        """Referential integrity: every listed path exists and parses."""
        for entry in self.train + self.val:
            load_volume(Path(self.root) / entry.volume)
            for drr in entry.drrs:
                load_image(Path(self.root) / drr["path"])
        for sv in self.style_volumes:
            load_volume(Path(self.root) / sv["volume"])
        for img in self.style_images:
            load_image(Path(self.root) / img.path)

    def load_volume(self, entry):
        return load_volume(Path(self.root) / entry.volume)

    def load_drr(self, entry, horiz_deg):
        for drr in entry.drrs:
            if drr["horiz_deg"] == horiz_deg:
                return load_image(Path(self.root) / drr["path"])
        raise FormatError(f"no DRR at {horiz_deg} deg for {entry.id}")

    def load_style_image(self, i):
        return load_image(Path(self.root) / self.style_images[i].path)


def _angle_tag(deg):
    return f"h{int(round(deg)):+04d}"


def build_dataset(config, out_dir):
    """Generate phantoms, render the DRR pose sweep, fabricate the unpaired
    pseudo-X-ray style domain, and write the manifest.

    The style domain comes from held-out phantoms so it shares no volume with
    the content domain. Intensity normalization (mu_max, intensity_scale) is
    calibrated on the content data and recorded in the manifest. On failure
    the partially written output directory is removed.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigError(f"output directory {out_dir} exists and is not empty")

    content_seeds = [config.seed * 1000 + i for i in range(config.n_train + config.n_val)]
    style_seeds = [config.seed * 1000 + config.style_seed_offset + j
                   for j in range(config.n_style_volumes)]
    overlap = set(content_seeds) & set(style_seeds)
    if overlap:
        raise ContractViolation(
            f"style-domain and content-domain volume sets intersect "
            f"(shared seeds {sorted(overlap)}); the style domain must be unpaired")

    created = out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return _build(config, out_dir, content_seeds, style_seeds)
    except BaseException:
        shutil.rmtree(out_dir, ignore_errors=True)
        if created:
            out_dir.mkdir(parents=True, exist_ok=True)
        raise


def _build(config, out_dir, content_seeds, style_seeds):
    spec = config.phantom_spec()
    sweep = tuple(float(a) for a in config.sweep_deg)

    volumes = {}
    mu_max = 0.0
    splits = {"train": [], "val": []}
    for i, seed in enumerate(content_seeds):
        split = "train" if i < config.n_train else "val"
        idx = i if split == "train" else i - config.n_train
        vid = f"{split}_{idx:02d}"
        vol = generate_phantom(spec, seed)
        rel = f"volumes/{vid}"
        save_volume(vol, out_dir / rel)
        volumes[vid] = vol
        mu_max = max(mu_max, float(vol.voxels.max()))
        splits[split].append(VolumeEntry(vid, rel + ".f32", seed))

    extent = max(float(s) * n for s, n in zip(config.spacing_mm, config.volume_shape))
    proj_kwargs = dict(sod_mm=config.sod_mm, sdd_mm=config.sdd_mm,
                       det_px=config.det_px, step=config.step,
                       det_pitch_mm=config.det_pitch_mm or 1.0,
                       intensity_scale=config.intensity_scale or 1.0)
    proj = ProjectionConfig(**proj_kwargs)
    if not config.det_pitch_mm:
        proj.det_pitch_mm = default_pitch(extent, proj, margin=1.3)

    # raw path integrals first; the normalization scale is their maximum
    raws = {}
    for split in ("train", "val"):
        for entry in splits[split]:
            for deg in sweep:
                pose = pose_from_angles(deg, config.vert_deg, proj)
                raws[(entry.id, deg)] = path_integral_image(volumes[entry.id], pose, proj)
    if not config.intensity_scale:
        proj.intensity_scale = float(max(r.max() for r in raws.values()))

    for split in ("train", "val"):
        for entry in splits[split]:
            for deg in sweep:
                img = np.clip(raws[(entry.id, deg)] / proj.intensity_scale,
                              0.0, 1.0).astype(np.float32)
                rel = f"drr/{entry.id}_{_angle_tag(deg)}"
                save_image(img, out_dir / rel)
                entry.drrs.append({"horiz_deg": deg, "path": rel + ".f32"})

    style_volumes = []
    style_images = []
    img_counter = 0
    for j, seed in enumerate(style_seeds):
        vid = f"style_{j:02d}"
        vol = generate_phantom(spec, seed)
        rel = f"volumes/{vid}"
        save_volume(vol, out_dir / rel)
        style_volumes.append({"id": vid, "seed": seed, "volume": rel + ".f32"})
        for deg in sweep:
            pose = pose_from_angles(deg, config.vert_deg, proj)
            drr = np.clip(path_integral_image(vol, pose, proj) / proj.intensity_scale,
                          0.0, 1.0)
            style_seed = config.seed * 10000 + 7000 + img_counter
            styled = make_pseudo_xray(drr, style_seed)
            mad = float(np.abs(styled.astype(np.float64) - drr).mean())
            if mad <= 0.02:
                raise ContractViolation(
                    f"pseudo-xray transform too close to identity "
                    f"(MAD {mad:.4f}) for {vid} at {deg} deg")
            rel_img = f"style/{vid}_{_angle_tag(deg)}"
            save_image(styled, out_dir / rel_img)
            style_images.append(StyleImageEntry(rel_img + ".f32", vid, deg, style_seed))
            img_counter += 1

    manifest = DatasetManifest(
        root=out_dir, seed=config.seed,
        volume_shape=tuple(config.volume_shape),
        spacing_mm=tuple(config.spacing_mm),
        mu_max=mu_max, projection=proj, sweep_deg=sweep,
        vert_deg=config.vert_deg,
        train=splits["train"], val=splits["val"],
        style_volumes=style_volumes, style_images=style_images)
    manifest.save()
    return manifest
