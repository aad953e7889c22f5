"""Small neural building blocks on top of torch autograd.

Everything is seeded through explicit ``torch.Generator`` objects; nothing
here touches the global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int = 0
    final_scale: float = 1.0  # multiplies the last layer's initial weights (0 -> zero init)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need exactly one activation per layer")
        for a in self.activations:
            if a not in ("relu", "identity"):
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def relu_stack(cls, widths, seed=0, final_scale=1.0, final_activation="identity"):
        widths = tuple(int(w) for w in widths)
        acts = ("relu",) * (len(widths) - 2) + (final_activation,)
        return cls(widths, acts, seed, final_scale)


def init_linear(layer: nn.Linear, activation: str, generator: torch.Generator, scale: float = 1.0):
    """Kaiming-uniform (fan-in) for relu layers, Xavier-uniform otherwise; zero bias."""
    with torch.no_grad():
        if activation == "relu":
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu", generator=generator)
        else:
            nn.init.xavier_uniform_(layer.weight, generator=generator)
        layer.weight.mul_(scale)
        layer.bias.zero_()


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(spec.seed)
        self.layers = nn.ModuleList()
        n = len(spec.activations)
        for i, act in enumerate(spec.activations):
            layer = nn.Linear(spec.widths[i], spec.widths[i + 1])
            init_linear(layer, act, gen, spec.final_scale if i == n - 1 else 1.0)
            self.layers.append(layer)

    def forward(self, x):
        if x.shape[-1] != self.spec.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match first layer {self.spec.widths[0]}")
        for layer, act in zip(self.layers, self.spec.activations):
            x = layer(x)
            if act == "relu":
                x = torch.relu(x)
        return x


def mlp_forward(spec: MlpSpec, params: dict | None, x):
    """Functional form: build the MLP for ``spec``, optionally load ``params`` (a state dict), apply."""
    m = Mlp(spec).to(x.dtype)
    if params is not None:
        m.load_state_dict(params)
    return m(x)


class PointNet(nn.Module):
    """Shared per-point MLP followed by a coordinate-wise max over points.

    ``widths`` starts with the point dimension (3). All point-MLP layers use relu.
    Input is (..., N, 3); output is (..., widths[-1]).
    """

    def __init__(self, widths, seed: int = 0, input_scale: float = 1.0):
        super().__init__()
        self.point_mlp = Mlp(MlpSpec.relu_stack(widths, seed=seed, final_activation="relu"))
        self.input_scale = input_scale

    @property
    def out_dim(self) -> int:
        return self.point_mlp.spec.widths[-1]

    def forward(self, points):
        if points.shape[-2] < 1:
            raise ValueError("PointNet needs at least one point")
        return self.point_mlp(points * self.input_scale).amax(dim=-2)


def pointnet_encode(net: PointNet, cloud):
    return net(cloud)


def time_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding, interleaved (sin, cos) at geometrically spaced frequencies.

    ``t`` may be a python int or an integer tensor of shape (B,). Returns (dim,) or (B, dim).
    """
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    freqs = torch.exp(-math.log(max_period) * torch.arange(dim // 2, dtype=torch.float64) / (dim // 2))
    ang = tt * freqs
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], -1).reshape(len(tt), dim)
    return emb[0] if scalar else emb


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


LR_SCHEDULES = ("constant", "cosine")
COSINE_FLOOR = 0.05


def lr_scheduler(optimizer, kind: str, total_steps: int):
    """Per-step multiplier on the base rate: 1 throughout, or cosine from 1 down to 5%."""
    if kind == "constant":
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: 1.0)
    if kind == "cosine":
        span = max(total_steps - 1, 1)

        def factor(step):
            frac = min(step, span) / span
            return COSINE_FLOOR + (1 - COSINE_FLOOR) * 0.5 * (1 + math.cos(math.pi * frac))

        return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    raise ValueError(f"unknown lr schedule {kind!r}")


def adam_step(optimizer: torch.optim.Adam, grads=None) -> None:
    """One bias-corrected Adam update. ``grads`` (optional) overrides the stored .grad tensors."""
    if grads is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        if len(params) != len(grads):
            raise ValueError("gradient count does not match parameter count")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            p.grad = g.detach().clone()
    optimizer.step()


def adam_state(optimizer: torch.optim.Adam) -> list[dict]:
    """Step count and moment tensors per parameter (copies)."""
    out = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p, {})
            out.append({
                "step": int(st["step"]) if "step" in st else 0,
                "exp_avg": st.get("exp_avg", torch.zeros_like(p)).detach().clone(),
                "exp_avg_sq": st.get("exp_avg_sq", torch.zeros_like(p)).detach().clone(),
            })
    return out


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict, prefix: str = "") -> None:
    state = module.state_dict()
    new = {}
    for k, v in state.items():
        name = prefix + k
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(v.shape):
            raise ValueError(f"checkpoint tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                             f"model expects {tuple(v.shape)}")
        new[k] = torch.as_tensor(tensors[name], dtype=v.dtype)
    module.load_state_dict(new)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor * max|n|) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(n).max(initial=0.0), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def finite_difference_check(fn, x: torch.Tensor, h: float = 1e-5, max_coords: int | None = None,
                            seed: int = 0) -> float:
    """Compare reverse-mode gradient of scalar ``fn(x)`` with central differences (fp64).

    ``max_coords`` limits the check to a seeded random subset of coordinates.
    Returns the max relative error.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    g = g.reshape(-1).numpy()
    flat = x.detach().reshape(-1)
    coords = np.arange(flat.numel())
    if max_coords is not None and len(coords) > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(coords, max_coords, replace=False))
    num = np.empty(len(coords))
    with torch.no_grad():
        for i, c in enumerate(coords):
            xp, xm = flat.clone(), flat.clone()
            xp[c] += h
            xm[c] -= h
            num[i] = (float(fn(xp.reshape(x.shape))) - float(fn(xm.reshape(x.shape)))) / (2 * h)
    return max_relative_error(g[coords], num)
