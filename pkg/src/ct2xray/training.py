"""Alternating G/D optimization with seeded determinism, checkpointing, and
bit-exact resume."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest
from .errors import ConfigError, TrainingAbort
from .geometry import pose_from_angles
from .losses import LossReport, LossWeights, SurrogateFeatureExtractor, DEFAULT_EXTRACTOR_SEED
from .model import ModelConfig, SynthesisModel, compute_discriminator_losses, \
    compute_generator_losses
from .ops import ParamStore
from .pose_attention import pose_projection
from .volumes import write_pgm

CHECKPOINT_PREFIX = "ckpt"
STATE_NAME = "state.json"
LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 4
    lr: float = 0.0025
    beta1: float = 0.0
    beta2: float = 0.99
    epochs: int = 100
    steps: int = 0              # 0 = derive from epochs
    checkpoint_every: int = 100
    preview_every: int = 0      # 0 = previews only at checkpoints
    r1_mode: str = "autograd"
    threads: int = 0            # 0 = leave torch's default
    extractor_seed: int = DEFAULT_EXTRACTOR_SEED
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            model = dict(d["model"])
            for key in ("ct_channels", "style_channels", "content_channels"):
                if key in model:
                    model[key] = tuple(model[key])
            d["model"] = ModelConfig(**model)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class TrainingData:
    """Manifest contents loaded into memory: normalized volumes, pose
    vectors, precomputed DRRs and pose projections, and the unpaired style
    images."""

    def __init__(self, manifest, cfg, dtype=torch.float32):
        self.manifest = manifest
        self.dtype = dtype
        self.mu_max = manifest.mu_max
        self.sweep = list(manifest.sweep_deg)
        self.poses = [pose_from_angles(a, manifest.vert_deg, manifest.projection)
                      for a in self.sweep]
        self.pose_vecs = torch.stack([
            torch.as_tensor(p.flatten(), dtype=dtype) for p in self.poses])

        self.volumes = []       # raw Volume objects (train split)
        self.volume_tensors = []
        self.drrs = {}
        self.mips = {}
        for vi, entry in enumerate(manifest.train):
            vol = manifest.load_volume(entry)
            self.volumes.append(vol)
            self.volume_tensors.append(
                torch.as_tensor(vol.voxels / self.mu_max, dtype=dtype))
            for ai, angle in enumerate(self.sweep):
                drr = manifest.load_drr(entry, angle)
                self.drrs[(vi, ai)] = torch.as_tensor(drr, dtype=dtype)
                mip = pose_projection(vol, self.poses[ai]) / self.mu_max
                self.mips[(vi, ai)] = torch.as_tensor(mip, dtype=dtype)
        self.style_images = [
            torch.as_tensor(manifest.load_style_image(i), dtype=dtype)
            for i in range(len(manifest.style_images))]
        if not self.volumes:
            raise ConfigError("manifest has no training volumes")
        if not self.style_images:
            raise ConfigError("manifest has no style images")

    @property
    def n_pairs(self):
        return len(self.volumes) * len(self.sweep)

    def sample_batch(self, rng, batch_size):
        vi = rng.integers(0, len(self.volumes), size=batch_size)
        ai = rng.integers(0, len(self.sweep), size=batch_size)
        si = rng.integers(0, len(self.style_images), size=batch_size)
        return self.make_batch(vi, ai, si)

    def make_batch(self, vi, ai, si):
        return {
            "volume": torch.stack([self.volume_tensors[v] for v in vi]).unsqueeze(1),
            "pose": torch.stack([self.pose_vecs[a] for a in ai]),
            "mip": torch.stack([self.mips[(v, a)] for v, a in zip(vi, ai)]),
            "drr": torch.stack([self.drrs[(v, a)] for v, a in zip(vi, ai)]),
            "xray": torch.stack([self.style_images[s] for s in si]),
        }


def _param_hash(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    def __init__(self, cfg, manifest, out_dir):
        if cfg.threads > 0:
            torch.set_num_threads(cfg.threads)
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest
        self.data = TrainingData(manifest, cfg)

        torch.manual_seed(cfg.seed)
        self.model = SynthesisModel(cfg.model)
        self.extractor = SurrogateFeatureExtractor(seed=cfg.extractor_seed)
        self.opt_g = torch.optim.Adam(
            list(self.model.generator_side_parameters()),
            lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(
            list(self.model.d.parameters()),
            lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.step = 0
        self._log_path = self.out_dir / LOG_NAME
        (self.out_dir / "config_resolved.json").write_text(
            json.dumps(cfg.to_dict(), indent=1, sort_keys=True))

    # -- one optimization step -------------------------------------------

    def train_step(self, batch):
        cfg = self.cfg
        self.model.train()

        self.opt_g.zero_grad(set_to_none=True)
        gen = compute_generator_losses(self.model, batch, cfg.weights, self.extractor)
        gen["total_g"].backward()
        self.opt_g.step()

        self.opt_d.zero_grad(set_to_none=True)
        dis = compute_discriminator_losses(
            self.model, gen["fake_x"], batch, cfg.weights, r1_mode=cfg.r1_mode)
        dis["total_d"].backward()
        self.opt_d.step()

        def val(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        report = LossReport(
            step=self.step,
            l_rec=val(gen["l_rec"]), l_cc=val(gen["l_cc"]),
            l_sc=val(gen["l_sc"]), l_0=val(gen["l_zero"]),
            l_adv_g=val(gen["l_adv_g"]), l_adv_d=val(dis["l_adv_d"]),
            r1=val(dis["r1"]),
            total_g=val(gen["total_g"]), total_d=val(dis["total_d"]))
        if not report.finite():
            self.save_checkpoint(tag="abort")
            raise TrainingAbort(
                f"non-finite loss at step {self.step}: {report.to_json_line()}")
        return report

    def run(self, steps=None):
        cfg = self.cfg
        total = steps if steps is not None else self.total_steps()
        if self.step == 0:
            self.save_checkpoint()  # initialization snapshot for comparisons
        with open(self._log_path, "a") as log:
            while self.step < total:
                batch = self.data.sample_batch(self.rng, cfg.batch_size)
                report = self.train_step(batch)
                log.write(report.to_json_line() + "\n")
                self.step += 1
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save_checkpoint()
                    self.write_preview()
        final = self.save_checkpoint()
        return final

    def total_steps(self):
        if self.cfg.steps:
            return self.cfg.steps
        per_epoch = max(1, self.data.n_pairs // self.cfg.batch_size)
        return self.cfg.epochs * per_epoch

    # -- persistence -------------------------------------------------------

    def save_checkpoint(self, tag=None):
        name = tag or f"{self.step:06d}"
        ckpt_dir = self.out_dir / f"{CHECKPOINT_PREFIX}_{name}"
        store = self.model.param_store(seed=self.cfg.seed)
        g_step = _moment_entries(store, self.opt_g, "opt_g",
                                 [n for n, _ in self.model.named_generator_side_parameters()])
        d_step = _moment_entries(store, self.opt_d, "opt_d",
                                 [f"d.{n}" for n, _ in self.model.d.named_parameters()])
        store.save(ckpt_dir)
        state = {
            "step": self.step,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "opt_step_g": g_step,
            "opt_step_d": d_step,
            "rng_state": self.rng.bit_generator.state,
        }
        (ckpt_dir / STATE_NAME).write_text(json.dumps(state, indent=1))
        return ckpt_dir

    @classmethod
    def resume(cls, ckpt_dir, manifest, out_dir):
        ckpt_dir = Path(ckpt_dir)
        state = json.loads((ckpt_dir / STATE_NAME).read_text())
        cfg = TrainConfig.from_dict(state["config"])
        if cfg.hash() != state["config_hash"]:
            raise ConfigError(
                f"checkpoint config hash {state['config_hash']} does not match "
                f"its stored config; refusing to resume")
        trainer = cls(cfg, manifest, out_dir)
        store = ParamStore.load(ckpt_dir)
        trainer.model.load_param_store(store)
        _load_moments(store, trainer.opt_g, "opt_g",
                      [n for n, _ in trainer.model.named_generator_side_parameters()],
                      state["opt_step_g"])
        _load_moments(store, trainer.opt_d, "opt_d",
                      [f"d.{n}" for n, _ in trainer.model.d.named_parameters()],
                      state["opt_step_d"])
        trainer.rng.bit_generator.state = state["rng_state"]
        trainer.step = state["step"]
        return trainer

    def write_preview(self):
        """Side-by-side grid over the sweep for the first training volume:
        GT DRR row, reconstructed DRR row, X-ray-styled row."""
        from .encoders import DOMAIN_DRR, DOMAIN_XRAY

        vol = self.data.volumes[0]
        style = self.data.style_images[0].numpy()
        rows = [[], [], []]
        for ai, angle in enumerate(self.data.sweep):
            drr = self.data.drrs[(0, ai)].numpy()
            pose = self.data.poses[ai]
            fake_drr = self.model.synthesize(vol, pose, drr, DOMAIN_DRR, self.data.mu_max)
            fake_x = self.model.synthesize(vol, pose, style, DOMAIN_XRAY, self.data.mu_max)
            rows[0].append(drr)
            rows[1].append(fake_drr)
            rows[2].append(fake_x)
        grid = np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)
        path = self.out_dir / f"preview_{self.step:06d}.pgm"
        write_pgm(grid, path)
        return path


def _moment_entries(store, optimizer, prefix, names):
    """Serialize Adam moments into the store; returns the shared step count."""
    params = optimizer.param_groups[0]["params"]
    assert len(params) == len(names)
    step_value = 0
    for name, p in zip(names, params):
        state = optimizer.state.get(p, {})
        exp_avg = state.get("exp_avg", torch.zeros_like(p))
        exp_avg_sq = state.get("exp_avg_sq", torch.zeros_like(p))
        if "step" in state:
            step_value = int(state["step"])
        store.put(f"{prefix}.{name}.exp_avg", exp_avg)
        store.put(f"{prefix}.{name}.exp_avg_sq", exp_avg_sq)
    return step_value


def _load_moments(store, optimizer, prefix, names, step_value):
    if step_value == 0:
        return
    params = optimizer.param_groups[0]["params"]
    sd = optimizer.state_dict()
    state = {}
    for idx, (name, p) in enumerate(zip(names, params)):
        state[idx] = {
            "step": torch.tensor(float(step_value)),
            "exp_avg": store.get(f"{prefix}.{name}.exp_avg").clone(),
            "exp_avg_sq": store.get(f"{prefix}.{name}.exp_avg_sq").clone(),
        }
    optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def train(cfg, manifest, out_dir):
    """Build a trainer and run it to completion; returns the final checkpoint
    directory."""
    trainer = Trainer(cfg, manifest, out_dir)
    return trainer.run()


def load_model(ckpt_dir, dtype=torch.float32):
    """Rebuild a SynthesisModel (and its TrainConfig) from a checkpoint."""
    ckpt_dir = Path(ckpt_dir)
    state = json.loads((ckpt_dir / STATE_NAME).read_text())
    cfg = TrainConfig.from_dict(state["config"])
    model = SynthesisModel(cfg.model)
    model.load_param_store(ParamStore.load(ckpt_dir))
    if dtype != torch.float32:
        model = model.to(dtype)
    model.eval()
    return model, cfg, state
