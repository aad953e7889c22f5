"""One-pass inference: noise + object cloud -> DDIM -> adapter -> decoder -> LBS mesh."""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry, meshio, persistence
from .adaptation import LoadedAdapter, load_adapter, refine_and_decode
from .autoencoder import LoadedAe, load_ae
from .dataset import object_points
from .diffusion import LoadedDiffusion, ddim_sample, destandardize, initial_noise, load_diffusion
from .hand_model import HandParams


@dataclass
class Bundle:
    """Frozen checkpoint set. ``adapter`` may be None for a stage-one-only pipeline."""

    ae: LoadedAe
    diffusion: LoadedDiffusion
    adapter: LoadedAdapter | None
    object_points: int
    denoiser_calls: int = field(default=0, init=False)
    _hook: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.diffusion.model.latent_dim != self.ae.model.config.latent_dim:
            raise persistence.CheckpointError(
                f"diffusion tensor 'diffusion.denoiser.out.weight' has latent size {self.diffusion.model.latent_dim}, "
                f"autoencoder latent is {self.ae.model.config.latent_dim}")
        if self.adapter is not None:
            w = self.adapter.adapter.mlp.layers[0].weight
            if w.shape[1] != self.ae.model.config.latent_dim:
                raise persistence.CheckpointError(
                    f"adapter tensor 'adapter.mlp.layers.0.weight' has input size {w.shape[1]}, "
                    f"autoencoder latent is {self.ae.model.config.latent_dim}")

        def count(*_):
            self.denoiser_calls += 1

        self._hook = self.diffusion.model.denoiser.register_forward_hook(count)

    @property
    def template(self):
        return self.ae.template


def load_bundle(ae_dir, diffusion_dir, adapter_dir=None, object_point_count: int | None = None) -> Bundle:
    ae = load_ae(ae_dir)
    diff = load_diffusion(diffusion_dir, ae_dir)
    adapter = None
    if adapter_dir is not None:
        adapter = load_adapter(adapter_dir, {"autoencoder": ae_dir, "diffusion": diffusion_dir})
    n = object_point_count or int(diff.manifest["config"]["object_points"])
    return Bundle(ae, diff, adapter, n)


def load_bundle_dir(bundle_dir, use_adapter: bool = True) -> Bundle:
    """A directory holding ae/, diffusion/ and (optionally) adapter/ checkpoints."""
    d = Path(bundle_dir)
    for sub in ("ae", "diffusion"):
        if not (d / sub).is_dir():
            raise FileNotFoundError(f"bundle {d} has no {sub}/ checkpoint")
    adapter = d / "adapter" if use_adapter and (d / "adapter").is_dir() else None
    return load_bundle(d / "ae", d / "diffusion", adapter)


@dataclass
class Generated:
    params: HandParams
    mesh: geometry.TriMesh
    seed: int
    latency: float


def sample_seed(seed: int, index: int) -> int:
    """Noise seed for the ``index``-th grasp of a request; independent of the request's count."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate(bundle: Bundle, obj: geometry.TriMesh, count: int, ddim_steps: int = 50, seed: int = 0,
             use_adapter: bool = True) -> list[Generated]:
    """``count`` grasps for ``obj``. The object cloud is centred for the networks and the hands
    are shifted back, so outputs are in the object's own frame."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not obj.is_watertight:
        raise ValueError("object mesh must be watertight")
    pts, offset = object_points(obj, bundle.object_points, seed)
    adapter = bundle.adapter.adapter if (use_adapter and bundle.adapter is not None) else None
    out = []
    with torch.no_grad():
        cond = bundle.diffusion.model.embed(torch.as_tensor(pts, dtype=torch.float32))
        for i in range(count):
            s = sample_seed(seed, i)
            start = time.perf_counter()
            z_T = initial_noise(bundle.diffusion.model.latent_dim, s)
            z = ddim_sample(bundle.diffusion.model.denoiser, cond, bundle.diffusion.schedule, ddim_steps, s, z_T=z_T)
            z1 = destandardize(z, bundle.ae.z_mean, bundle.ae.z_std)
            params, verts = refine_and_decode(bundle.ae, z1, adapter)
            latency = time.perf_counter() - start
            vec = params.double().numpy().copy()
            vec[:3] += offset
            v = verts.double().numpy() + offset
            if not (np.all(np.isfinite(vec)) and np.all(np.isfinite(v))):
                raise FloatingPointError(f"non-finite grasp for sample {i} (seed {s})")
            out.append(Generated(HandParams(vec), geometry.TriMesh(v, bundle.template.faces), s, latency))
    return out


def write_generated(results: list[Generated], out_dir, extra: dict | None = None) -> list[Path]:
    """One OBJ per grasp plus a JSON sidecar with params and seed; latency goes to timing.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, timing = [], {}
    for i, r in enumerate(results):
        p = out / f"grasp_{i:03d}.obj"
        meshio.write_obj(r.mesh, p)
        side = {"index": i, "seed": r.seed, "params": [float(x) for x in r.params.vector], **(extra or {})}
        (out / f"grasp_{i:03d}.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        timing[p.name] = r.latency
        paths.append(p)
    # wall-clock numbers vary run to run; kept apart so the grasp files stay byte-identical
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return paths


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}; {platform.system()} {platform.release()}; " \
           f"torch {torch.__version__}; {torch.get_num_threads()} thread(s)"


def benchmark(bundle: Bundle, objects, per_object_count: int = 1, ddim_steps: int = 50, seed: int = 0) -> dict:
    """Mean and median wall-clock seconds per generated grasp."""
    objects = list(objects)
    if not objects:
        raise ValueError("empty benchmark set")
    times = []
    for k, obj in enumerate(objects):
        mesh = obj[1] if isinstance(obj, tuple) else obj
        times += [g.latency for g in generate(bundle, mesh, per_object_count, ddim_steps, seed + k)]
    return {"mean_latency": statistics.fmean(times), "median_latency": statistics.median(times),
            "grasps": len(times), "objects": len(objects), "ddim_steps": ddim_steps,
            "hardware": hardware_descriptor()}


def count_denoiser_calls(bundle: Bundle, fn, *args, **kwargs):
    """Run ``fn`` and return (result, number of denoiser forward passes it made)."""
    before = bundle.denoiser_calls
    result = fn(*args, **kwargs)
    return result, bundle.denoiser_calls - before

