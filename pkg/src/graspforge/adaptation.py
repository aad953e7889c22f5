"""Residual latent refiner trained on sampler outputs with the autoencoder and diffusion model frozen."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses, nn_core, persistence
from .autoencoder import TrainingDiverged, _batch_schedule, _max_grad, batch_loss, check_prediction, make_targets
from .diffusion import ddim_sample, destandardize
from .hand_model import keypoints, lbs_forward

STAGE = "adaptation"


@dataclass
class AdaptConfig:
    hidden: tuple[int, ...] | None = None  # None: one hidden layer as wide as the latent
    weights: tuple[float, ...] = losses.ADAPT_WEIGHTS.as_tuple()
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 5000
    seed: int = 0
    ddim_steps: int = 50

    def __post_init__(self):
        if self.hidden is not None:
            self.hidden = tuple(int(h) for h in self.hidden)
        self.weights = tuple(float(w) for w in self.weights)
        losses.LossWeights.from_sequence(self.weights)
        if self.batch_size < 1 or self.ddim_steps < 1:
            raise ValueError("batch_size and ddim_steps must be >= 1")

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights.from_sequence(self.weights)

    @classmethod
    def paper(cls, **overrides) -> "AdaptConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "AdaptConfig":
        return replace(cls(lr=1e-3, batch_size=32, steps=300), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown adaptation config keys: {sorted(unknown)}")
        return cls(**d)


class Adapter(nn.Module):
    """z2 = f(z1); the last layer starts at zero so a fresh adapter is the identity refinement."""

    def __init__(self, latent_dim: int, hidden=None, seed: int = 0):
        super().__init__()
        hidden = tuple(hidden) if hidden is not None else (latent_dim,)
        self.mlp = nn_core.Mlp(nn_core.MlpSpec.relu_stack((latent_dim,) + hidden + (latent_dim,), seed=seed,
                                                          final_scale=0.0))

    def forward(self, z1: torch.Tensor) -> torch.Tensor:
        return self.mlp(z1)


def adapt(adapter: Adapter, z1: torch.Tensor) -> torch.Tensor:
    return adapter(z1)


def refine_and_decode(ae, z1: torch.Tensor, adapter: Adapter | None):
    """Parameters decode(z1 + f(z1)) and their LBS vertices; ``adapter=None`` skips refinement."""
    z = z1 if adapter is None else z1 + adapter(z1)
    params = ae.model.decode(z)
    return params, lbs_forward(ae.template, params)


def tensor_digest(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def sample_latents(ae, diff, points: torch.Tensor, steps: int, seeds) -> torch.Tensor:
    """De-standardized DDIM latents, one per (cloud, seed) row; batched through the denoiser."""
    with torch.no_grad():
        cond = diff.model.embed(points)
        z_T = torch.stack([torch.randn(diff.model.latent_dim, generator=torch.Generator().manual_seed(int(s)))
                           for s in seeds])
        z = ddim_sample(diff.model.denoiser, cond, diff.schedule, steps, 0, z_T=z_T)
    return destandardize(z, ae.z_mean, ae.z_std)


def pair_with_gt(template, decoded_verts: torch.Tensor, candidates: list[int], targets) -> int:
    """The candidate GT grasp whose keypoints are closest (summed distance) to the decoded hand."""
    kp = keypoints(template, decoded_verts.detach().double())
    best, best_d = candidates[0], np.inf
    for c in candidates:
        d = float((keypoints(template, targets[c].gt_verts.double()) - kp).norm(dim=-1).sum())
        if d < best_d:
            best, best_d = c, d
    return best


@dataclass
class AdaptTrainResult:
    adapter: Adapter
    history: list[dict]
    frozen_digest_before: str
    frozen_digest_after: str


def train_adaptation(ae, diff, scenes, config: AdaptConfig, log_path=None) -> AdaptTrainResult:
    """Only the adapter learns. Each step draws fresh DDIM latents for a batch of scenes,
    pairs each with that object's nearest GT grasp, and minimizes the weighted total loss."""
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    frozen = nn.ModuleList([ae.model, diff.model])
    for p in frozen.parameters():
        p.requires_grad_(False)
    before = tensor_digest(frozen)
    targets = make_targets(ae.template, scenes)
    by_object: dict[str, list[int]] = {}
    for i, s in enumerate(scenes):
        by_object.setdefault(s.name, []).append(i)
    points = torch.stack([torch.as_tensor(s.points, dtype=torch.float32) for s in scenes])
    adapter = Adapter(ae.model.config.latent_dim, config.hidden, seed=config.seed + 20)
    opt = nn_core.make_adam(adapter.parameters(), config.lr)
    weights = config.loss_weights
    rng = np.random.default_rng(config.seed)
    history = []
    logf = open(log_path, "w") if log_path else None
    try:
        for step, idx in enumerate(_batch_schedule(len(scenes), config.batch_size, config.steps, rng)):
            noise_seeds = rng.integers(0, 2**31, len(idx))
            z1 = sample_latents(ae, diff, points[torch.as_tensor(idx)], config.ddim_steps, noise_seeds)
            with torch.no_grad():
                _, unrefined = refine_and_decode(ae, z1, None)
            paired = [targets[pair_with_gt(ae.template, unrefined[k], by_object[scenes[i].name], targets)]
                      for k, i in enumerate(idx)]
            opt.zero_grad()
            params = ae.model.decode(z1 + adapter(z1))
            verts = lbs_forward(ae.template, params)
            check_prediction(params, verts, step, adapter)
            total, parts = batch_loss(ae.template, params, paired, weights, verts)
            if not torch.isfinite(total).item():
                total.backward()
                raise TrainingDiverged(f"non-finite adaptation loss at step {step}; "
                                       f"max |grad| {_max_grad(adapter):.3e}")
            total.backward()
            nn_core.adam_step(opt)
            rec = {"step": step, "total": float(total.detach()), **parts}
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if logf:
            logf.close()
    after = tensor_digest(frozen)
    if after != before:
        raise RuntimeError("frozen autoencoder/diffusion tensors changed during adaptation training")
    return AdaptTrainResult(adapter, history, before, after)


def save_adapter(result: AdaptTrainResult, config: AdaptConfig, latent_dim: int, out_dir, lineage: dict,
                 seeds: dict | None = None) -> Path:
    tensors = nn_core.module_tensors(result.adapter, "adapter.")
    manifest = {"stage": STAGE, "config": config.to_dict(), "latent_dim": latent_dim,
                "seeds": seeds or {"train": config.seed}, "lineage": lineage,
                "frozen_digest": result.frozen_digest_after,
                "final_loss": result.history[-1] if result.history else None}
    return persistence.write_checkpoint(manifest, tensors, out_dir)


@dataclass
class LoadedAdapter:
    adapter: Adapter
    manifest: dict
    path: Path


def load_adapter(ckpt_dir, upstream: dict | None = None) -> LoadedAdapter:
    manifest, tensors = persistence.read_checkpoint(ckpt_dir, upstream)
    if manifest.get("stage") != STAGE:
        raise persistence.CheckpointError(f"{ckpt_dir} is a {manifest.get('stage')!r} checkpoint, not {STAGE!r}")
    config = AdaptConfig.from_dict(manifest["config"])
    adapter = Adapter(int(manifest["latent_dim"]), config.hidden, seed=config.seed + 20)
    nn_core.load_module_tensors(adapter, tensors, "adapter.")
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    return LoadedAdapter(adapter, manifest, Path(ckpt_dir))
