"""Asymmetric hand autoencoder: posed vertices -> latent -> 61 hand parameters -> LBS mesh."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import geometry, losses, metrics, nn_core, persistence
from .hand_model import N_PARAMS, POSE, SHAPE, SHAPE_LIMIT, TRANSLATION, HandTemplate, lbs_forward

log = logging.getLogger(__name__)

STAGE = "autoencoder"
INPUT_MODES = ("vertices", "params")


@dataclass
class AeConfig:
    latent_dim: int = 768
    encoder_widths: tuple[int, ...] = (3, 64, 128, 256)
    decoder_hidden: tuple[int, ...] = (512, 256)
    weights: tuple[float, ...] = losses.AE_WEIGHTS.as_tuple()
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 20000
    seed: int = 0
    object_points: int = 3000
    input_mode: str = "vertices"
    vertex_scale: float = 10.0  # encoder sees decimetres so activations start O(1)
    translation_scale: float = 0.1  # decoder translation output in decimetres
    lr_schedule: str = "constant"  # or "cosine": decays to 5% of lr by the last step
    physical_warmup: int = 0  # steps over which the physical weights ramp linearly from 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)
        self.weights = tuple(float(w) for w in self.weights)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.lr_schedule not in nn_core.LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {nn_core.LR_SCHEDULES}")
        if self.encoder_widths[0] != 3:
            raise ValueError("the point encoder's first width must be 3")
        losses.LossWeights.from_sequence(self.weights)

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights.from_sequence(self.weights)

    @classmethod
    def paper(cls, **overrides) -> "AeConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "AeConfig":
        base = cls(latent_dim=64, encoder_widths=(3, 32, 64, 128), decoder_hidden=(256, 256), lr=1e-3,
                   batch_size=32, steps=1000, object_points=512, lr_schedule="cosine", physical_warmup=600)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown autoencoder config keys: {sorted(unknown)}")
        return cls(**d)


class HandAutoencoder(nn.Module):
    def __init__(self, config: AeConfig):
        super().__init__()
        self.config = config
        c = config
        if c.input_mode == "vertices":
            self.point_net = nn_core.PointNet(c.encoder_widths, seed=c.seed, input_scale=c.vertex_scale)
            self.encoder_head = nn_core.Mlp(nn_core.MlpSpec.relu_stack((c.encoder_widths[-1], c.latent_dim),
                                                                       seed=c.seed + 1))
        else:
            widths = (N_PARAMS,) + c.encoder_widths[1:] + (c.latent_dim,)
            self.point_net = None
            self.encoder_head = nn_core.Mlp(nn_core.MlpSpec.relu_stack(widths, seed=c.seed + 1))
        self.decoder = nn_core.Mlp(nn_core.MlpSpec.relu_stack(
            (c.latent_dim,) + c.decoder_hidden + (N_PARAMS,), seed=c.seed + 2, final_scale=0.0))

    def encode(self, hand) -> torch.Tensor:
        """Latent for posed hand vertices (..., V, 3), or for parameters (..., 61) in param-input mode."""
        if self.point_net is None:
            if hand.shape[-1] != N_PARAMS:
                raise ValueError("param-input encoder expects 61 hand parameters")
            return self.encoder_head(hand)
        return self.encoder_head(self.point_net(hand))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raw = self.decoder(z)
        return torch.cat([raw[..., TRANSLATION] * self.config.translation_scale, raw[..., POSE],
                          SHAPE_LIMIT * torch.tanh(raw[..., SHAPE])], -1)

    def forward(self, hand) -> torch.Tensor:
        return self.decode(self.encode(hand))


class TrainingDiverged(RuntimeError):
    pass


def _batch_schedule(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Index batches drawn epoch by epoch from seeded permutations."""
    if batch >= n:
        for _ in range(steps):
            yield np.arange(n)
        return
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch > n:
            perm, pos = rng.permutation(n), 0
        yield np.sort(perm[pos:pos + batch])
        pos += batch


def _max_grad(module: nn.Module) -> float:
    g = [p.grad.abs().max().item() for p in module.parameters() if p.grad is not None]
    return max(g) if g else 0.0


def check_prediction(pred: torch.Tensor, verts: torch.Tensor, step: int, module: nn.Module) -> None:
    """Abort before the losses see non-finite params or vertices (the nearest-neighbour trees reject them)."""
    if not (torch.isfinite(pred).all() and torch.isfinite(verts).all()).item():
        raise TrainingDiverged(f"non-finite loss at step {step} (term decoder_output); "
                               f"max |grad| {_max_grad(module):.3e}")


def _check_finite(total: torch.Tensor, breakdown: dict, step: int, module: nn.Module) -> None:
    if torch.isfinite(total).item():
        return
    bad = [k for k, v in breakdown.items() if not math.isfinite(v)] or ["total"]
    raise TrainingDiverged(f"non-finite loss at step {step} (term {bad[0]}); max |grad| {_max_grad(module):.3e}")


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def batch_loss(template: HandTemplate, pred_params: torch.Tensor, targets, weights: losses.LossWeights,
               verts: torch.Tensor | None = None):
    """Mean ``pair_loss`` over a batch; returns the total and the mean per-term breakdown."""
    if verts is None:
        verts = lbs_forward(template, pred_params)
    total = pred_params.sum() * 0.0
    sums = dict.fromkeys(losses.TERMS, 0.0)
    for i, t in enumerate(targets):
        loss, parts = losses.pair_loss(pred_params[i], verts[i], t, weights)
        total = total + loss
        for k, v in parts.items():
            sums[k] += v
    n = len(targets)
    return total / n, {k: v / n for k, v in sums.items()}


def ramped_weights(weights: losses.LossWeights, step: int, warmup: int) -> losses.LossWeights:
    if warmup <= 0 or step >= warmup:
        return weights
    f = step / warmup
    return replace(weights, cmap=weights.cmap * f, penetr=weights.penetr * f, consist=weights.consist * f)


def make_targets(template: HandTemplate, scenes, dtype=torch.float32) -> list[losses.PairTarget]:
    out = []
    for s in scenes:
        gt = torch.tensor(np.array(s.params.vector), dtype=torch.float64)
        with torch.no_grad():
            gv = lbs_forward(template, gt)
        out.append(losses.PairTarget(gt, gv, s.mesh, s.points, dtype))
    return out


def encoder_inputs(model: HandAutoencoder, targets) -> torch.Tensor:
    if model.config.input_mode == "params":
        return torch.stack([t.gt_params for t in targets])
    return torch.stack([t.gt_verts for t in targets])


def train_ae(template: HandTemplate, scenes, config: AeConfig, log_path=None) -> TrainResult:
    """Minimize the weighted reconstruction and physical losses with Adam; deterministic per seed."""
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)  # nothing should draw from it; pinned in case a library does
    model = HandAutoencoder(config)
    weights = config.loss_weights
    targets = make_targets(template, scenes)
    inputs = encoder_inputs(model, targets)
    opt = nn_core.make_adam(model.parameters(), config.lr)
    sched = nn_core.lr_scheduler(opt, config.lr_schedule, config.steps)
    rng = np.random.default_rng(config.seed)
    history = []
    logf = open(log_path, "w") if log_path else None
    try:
        for step, idx in enumerate(_batch_schedule(len(targets), config.batch_size, config.steps, rng)):
            opt.zero_grad()
            pred = model(inputs[torch.as_tensor(idx)])
            verts = lbs_forward(template, pred)
            check_prediction(pred, verts, step, model)
            total, parts = batch_loss(template, pred, [targets[i] for i in idx],
                                      ramped_weights(weights, step, config.physical_warmup), verts)
            _check_finite(total, parts, step, model)
            total.backward()
            nn_core.adam_step(opt)
            sched.step()
            rec = {"step": step, "total": float(total.detach()), **parts}
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if logf:
            logf.close()
    with torch.no_grad():
        z = model.encode(inputs)
    stats = latent_stats(z)
    return TrainResult(model, history, stats)


def latent_stats(z: torch.Tensor) -> dict:
    z = z.detach().double()
    std = z.std(0, unbiased=False) if len(z) > 1 else torch.ones(z.shape[-1], dtype=torch.float64)
    # guard dimensions that never vary (dead units) against division by zero
    std = torch.where(std > 1e-6, std, torch.ones_like(std))
    return {"z_mean": z.mean(0).float(), "z_std": std.float()}


def evaluate_reconstruction(template: HandTemplate, model: HandAutoencoder, scenes) -> dict:
    """Mean parameter MSE and chamfer of decode(encode(x)) against each scene's GT."""
    targets = make_targets(template, scenes)
    with torch.no_grad():
        pred = model(encoder_inputs(model, targets))
        verts = lbs_forward(template, pred)
    lp = [float(losses.loss_param(pred[i], t.gt_params)) for i, t in enumerate(targets)]
    lm = [float(losses.loss_mesh(verts[i].double(), t.gt_verts.double())) for i, t in enumerate(targets)]
    return {"loss_param": float(np.mean(lp)), "loss_mesh": float(np.mean(lm)), "params": pred, "verts": verts}


def reconstruction_penetration(template: HandTemplate, model: HandAutoencoder, scenes) -> list[float]:
    """Penetration volume (cm^3) of each scene's reconstructed hand against its object."""
    verts = evaluate_reconstruction(template, model, scenes)["verts"]
    return [metrics.penetration_volume(geometry.TriMesh(verts[i].double().numpy(), template.faces), s.mesh)
            for i, s in enumerate(scenes)]


# ---------------------------------------------------------------- checkpoints


def template_tensors(template: HandTemplate) -> dict[str, np.ndarray]:
    return {
        "template.rest_vertices": template.rest_vertices.astype(np.float32),
        "template.faces": template.faces.astype(np.float32),
        "template.joints": template.joints.astype(np.float32),
        "template.weights": template.weights.astype(np.float32),
        "template.shape_basis": template.shape_basis.astype(np.float32),
        "template.parents": template.parents.astype(np.float32),
        "template.regressor": template.regressor.astype(np.float32),
    }


def template_from_tensors(t: dict) -> HandTemplate:
    w = t["template.weights"].astype(np.float64)
    r = t["template.regressor"].astype(np.float64)
    return HandTemplate(
        rest_vertices=t["template.rest_vertices"].astype(np.float64),
        faces=t["template.faces"].astype(np.int64),
        joints=t["template.joints"].astype(np.float64),
        weights=w / w.sum(1, keepdims=True),  # renormalize after the fp32 round trip
        shape_basis=t["template.shape_basis"].astype(np.float64),
        parents=t["template.parents"].astype(np.int64),
        regressor=r / r.sum(1, keepdims=True),
    )


def save_ae(result: TrainResult, template: HandTemplate, out_dir, seeds: dict | None = None,
            lineage: dict | None = None) -> Path:
    model = result.model
    tensors = nn_core.module_tensors(model, "ae.")
    tensors["stats.z_mean"] = result.extra["z_mean"].numpy()
    tensors["stats.z_std"] = result.extra["z_std"].numpy()
    tensors.update(template_tensors(template))
    manifest = {"stage": STAGE, "config": model.config.to_dict(), "seeds": seeds or {"train": model.config.seed},
                "lineage": lineage or {},
                "final_loss": result.history[-1] if result.history else None}
    return persistence.write_checkpoint(manifest, tensors, out_dir)


@dataclass
class LoadedAe:
    model: HandAutoencoder
    template: HandTemplate
    z_mean: torch.Tensor
    z_std: torch.Tensor
    manifest: dict
    path: Path


def load_ae(ckpt_dir) -> LoadedAe:
    manifest, tensors = persistence.read_checkpoint(ckpt_dir)
    if manifest.get("stage") != STAGE:
        raise persistence.CheckpointError(f"{ckpt_dir} is a {manifest.get('stage')!r} checkpoint, not {STAGE!r}")
    config = AeConfig.from_dict(manifest["config"])
    model = HandAutoencoder(config)
    nn_core.load_module_tensors(model, tensors, "ae.")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    z_mean = torch.as_tensor(tensors["stats.z_mean"])
    z_std = torch.as_tensor(tensors["stats.z_std"])
    if z_mean.shape != (config.latent_dim,):
        raise persistence.CheckpointError(f"tensor 'stats.z_mean' has shape {tuple(z_mean.shape)}, "
                                          f"expected ({config.latent_dim},)")
    return LoadedAe(model, template_from_tensors(tensors), z_mean, z_std, manifest, Path(ckpt_dir))
