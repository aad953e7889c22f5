"""Object-conditioned latent DDPM with ancestral and deterministic DDIM samplers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import nn_core, persistence
from .autoencoder import TrainingDiverged, _max_grad, encoder_inputs, make_targets

STAGE = "diffusion"


@dataclass(frozen=True)
class DiffusionSchedule:
    """beta/alpha/alpha_bar tables indexed 0..T. Index 0 is the clean state (beta=0, alpha_bar=1)."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.T)])
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if not np.all(np.diff(alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Evenly spaced sub-schedule tau_1 < ... < tau_N = T (tau_0 = 0 is implicit)."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"DDIM steps must lie in [1, {self.T}], got {steps}")
        return [int(round(i * self.T / steps)) for i in range(1, steps + 1)]


def _gather(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    vals = torch.as_tensor(table, dtype=like.dtype)[torch.as_tensor(t)]
    return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; ``t`` is an int or a (B,) tensor."""
    ab = _gather(schedule.alpha_bar, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_dim: int = 128
    hidden: tuple[int, ...] = (1024, 512)
    object_widths: tuple[int, ...] = (3, 64, 128, 256)
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 50000
    seed: int = 0
    object_points: int = 3000
    object_scale: float = 10.0
    lr_schedule: str = "constant"  # or "cosine", as for the autoencoder

    def __post_init__(self):
        if self.lr_schedule not in nn_core.LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {nn_core.LR_SCHEDULES}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.object_widths = tuple(int(w) for w in self.object_widths)
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be >= 1")

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)

    @classmethod
    def paper(cls, **overrides) -> "DiffusionConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "DiffusionConfig":
        base = cls(time_dim=64, hidden=(256, 128), object_widths=(3, 64, 128), lr=1e-3, batch_size=32,
                   steps=3000, object_points=512)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown diffusion config keys: {sorted(unknown)}")
        return cls(**d)


class Denoiser(nn.Module):
    """Noise predictor over the flat latent.

    Down blocks narrow through ``hidden``; up blocks widen back, each taking the
    previous activation concatenated with the mirrored down block's output. The
    output layer also sees the raw input so identity-like maps are easy to learn.
    """

    def __init__(self, latent_dim: int, cond_dim: int, time_dim: int, hidden, seed: int = 0):
        super().__init__()
        self.latent_dim, self.cond_dim, self.time_dim = latent_dim, cond_dim, time_dim
        gen = torch.Generator().manual_seed(seed)
        in_dim = latent_dim + cond_dim + time_dim
        self.down = nn.ModuleList()
        prev = in_dim
        for h in hidden:
            self.down.append(nn.Linear(prev, h))
            prev = h
        self.up = nn.ModuleList()
        for h in reversed(hidden):
            self.up.append(nn.Linear(prev + h, h))
            prev = h
        self.out = nn.Linear(prev + in_dim, latent_dim)
        for layer in list(self.down) + list(self.up):
            nn_core.init_linear(layer, "relu", gen)
        # small output so the initial prediction is ~0 and the loss starts near 1 per dimension
        nn_core.init_linear(self.out, "identity", gen, scale=0.01)

    def forward(self, z_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        temb = nn_core.time_embedding(t, self.time_dim).to(z_t.dtype)
        if temb.dim() < z_t.dim():
            temb = temb.expand(*z_t.shape[:-1], self.time_dim)
        x = torch.cat([z_t, cond.expand(*z_t.shape[:-1], self.cond_dim), temb], -1)
        skips, h = [], x
        for layer in self.down:
            h = torch.relu(layer(h))
            skips.append(h)
        for layer, skip in zip(self.up, reversed(skips)):
            h = torch.relu(layer(torch.cat([h, skip], -1)))
        return self.out(torch.cat([h, x], -1))


class LatentDiffusion(nn.Module):
    """Object point encoder plus denoiser, trained together."""

    def __init__(self, config: DiffusionConfig, latent_dim: int):
        super().__init__()
        self.config = config
        self.latent_dim = latent_dim
        self.object_encoder = nn_core.PointNet(config.object_widths, seed=config.seed + 10,
                                               input_scale=config.object_scale)
        self.denoiser = Denoiser(latent_dim, self.object_encoder.out_dim, config.time_dim, config.hidden,
                                 seed=config.seed + 11)

    def embed(self, points: torch.Tensor) -> torch.Tensor:
        return self.object_encoder(points)


def denoise_predict(model: Denoiser, z_t, obj_embedding, t) -> torch.Tensor:
    return model(z_t, obj_embedding, t)


def diffusion_loss(model: LatentDiffusion, z0: torch.Tensor, points: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor) -> torch.Tensor:
    """Per-dimension mean squared error of the noise prediction."""
    cond = model.embed(points)
    z_t = q_sample(z0, t, eps, model.config.schedule)
    return ((eps - model.denoiser(z_t, cond, t)) ** 2).mean()


def _draws(gen: torch.Generator, n: int, dim: int, T: int):
    t = torch.randint(1, T + 1, (n,), generator=gen)
    eps = torch.randn((n, dim), generator=gen)
    return t, eps


def standardize(z: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    return (z - mean) / std


def destandardize(z: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    return z * std + mean


@dataclass
class DiffusionTrainResult:
    model: LatentDiffusion
    history: list[dict]


def encode_scenes(ae, scenes) -> torch.Tensor:
    """Standardized z0 for every scene under a frozen autoencoder."""
    targets = make_targets(ae.template, scenes)
    with torch.no_grad():
        z = ae.model.encode(encoder_inputs(ae.model, targets))
    return standardize(z, ae.z_mean, ae.z_std)


def train_diffusion(ae, scenes, config: DiffusionConfig, log_path=None) -> DiffusionTrainResult:
    """Fit the noise predictor on frozen-encoder latents with t uniform on 1..T."""
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    z0 = encode_scenes(ae, scenes)
    points = torch.stack([torch.as_tensor(s.points, dtype=torch.float32) for s in scenes])
    model = LatentDiffusion(config, z0.shape[-1])
    opt = nn_core.make_adam(model.parameters(), config.lr)
    sched = nn_core.lr_scheduler(opt, config.lr_schedule, config.steps)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    n = len(scenes)
    history = []
    logf = open(log_path, "w") if log_path else None
    try:
        for step in range(config.steps):
            # sample with replacement so a tiny set still fills the batch with fresh (t, eps) draws
            idx = torch.as_tensor(np.sort(rng.integers(0, n, config.batch_size)))
            t, eps = _draws(gen, config.batch_size, z0.shape[-1], config.T)
            opt.zero_grad()
            loss = diffusion_loss(model, z0[idx], points[idx], t, eps)
            if not torch.isfinite(loss).item():
                loss.backward()
                raise TrainingDiverged(f"non-finite diffusion loss at step {step}; "
                                       f"max |grad| {_max_grad(model):.3e}")
            loss.backward()
            nn_core.adam_step(opt)
            sched.step()
            rec = {"step": step, "loss": float(loss.detach())}
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
    finally:
        if logf:
            logf.close()
    return DiffusionTrainResult(model, history)


def evaluate_loss(model: LatentDiffusion, z0: torch.Tensor, points: torch.Tensor, draws: int = 4096,
                  seed: int = 12345) -> float:
    """Noise-prediction loss over a fixed set of (sample, t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(0, len(z0), (draws,), generator=gen)
    t, eps = _draws(gen, draws, z0.shape[-1], model.config.T)
    with torch.no_grad():
        return float(diffusion_loss(model, z0[idx], points[idx], t, eps))


# ---------------------------------------------------------------- samplers


def initial_noise(dim: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(dim, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def ddpm_sample(denoiser, obj_embedding, schedule: DiffusionSchedule, seed: int, z_T=None,
                noise_scale: float = 1.0) -> torch.Tensor:
    """Ancestral sampling from t=T down to 1 with sigma_t^2 = beta_t.

    ``noise_scale=0`` gives the noiseless recursion. Latent dimension comes from
    ``z_T`` or ``denoiser.latent_dim``.
    """
    gen = torch.Generator().manual_seed(seed)
    z = z_T if z_T is not None else torch.randn(denoiser.latent_dim, generator=gen)
    for t in range(schedule.T, 0, -1):
        eps = denoiser(z, obj_embedding, t)
        a, ab, b = schedule.alphas[t], schedule.alpha_bar[t], schedule.betas[t]
        z = (z - (b / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a)
        if t > 1 and noise_scale:
            z = z + noise_scale * math.sqrt(b) * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z


def ddim_sample(denoiser, obj_embedding, schedule: DiffusionSchedule, steps: int, seed: int,
                z_T=None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) over ``schedule.ddim_timesteps(steps)``."""
    taus = schedule.ddim_timesteps(steps)
    z = z_T if z_T is not None else initial_noise(denoiser.latent_dim, seed)
    prev = [0] + taus[:-1]
    for t, s in zip(reversed(taus), reversed(prev)):
        eps = denoiser(z, obj_embedding, t)
        ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
        x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        z = math.sqrt(ab_s) * x0 + math.sqrt(1.0 - ab_s) * eps
    return z


# ---------------------------------------------------------------- checkpoints


def save_diffusion(result: DiffusionTrainResult, out_dir, lineage: dict, seeds: dict | None = None) -> Path:
    m = result.model
    tensors = nn_core.module_tensors(m, "diffusion.")
    manifest = {"stage": STAGE, "config": m.config.to_dict(), "latent_dim": m.latent_dim,
                "schedule": m.config.schedule.to_dict(), "seeds": seeds or {"train": m.config.seed},
                "lineage": lineage,
                "final_loss": result.history[-1] if result.history else None}
    return persistence.write_checkpoint(manifest, tensors, out_dir)


@dataclass
class LoadedDiffusion:
    model: LatentDiffusion
    manifest: dict
    path: Path

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.model.config.schedule


def load_diffusion(ckpt_dir, ae_dir=None) -> LoadedDiffusion:
    manifest, tensors = persistence.read_checkpoint(ckpt_dir, {"autoencoder": ae_dir} if ae_dir else None)
    if manifest.get("stage") != STAGE:
        raise persistence.CheckpointError(f"{ckpt_dir} is a {manifest.get('stage')!r} checkpoint, not {STAGE!r}")
    config = DiffusionConfig.from_dict(manifest["config"])
    model = LatentDiffusion(config, int(manifest["latent_dim"]))
    nn_core.load_module_tensors(model, tensors, "diffusion.")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return LoadedDiffusion(model, manifest, Path(ckpt_dir))
