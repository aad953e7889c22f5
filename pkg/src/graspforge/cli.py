"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing inputs).
Config files are JSON objects; see README for the schema. Precedence, lowest first:
profile defaults, GRASPFORGE_SEED, config file, command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, persistence

log = logging.getLogger("graspforge")

SEED_ENV = "GRASPFORGE_SEED"
ABLATION_MODES = ("no-adapt", "no-physical-loss", "param-input")


class UsageError(Exception):
    """Bad invocation: exits with status 2."""


# ---------------------------------------------------------------- config handling


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve_seed(flag: int | None, default: int = 0) -> int:
    if flag is not None:
        return flag
    env = env_seed()
    return default if env is None else env


def read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return data


def parse_weights(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be five comma-separated numbers, got {text!r}") from None
    if len(values) != 5:
        raise argparse.ArgumentTypeError("weights must be five comma-separated numbers")
    return values


def build_config(cls, args, file_cfg: dict):
    """Profile defaults < env seed < file < flags. Unknown file keys are a usage error."""
    file_cfg = dict(file_cfg)
    profile = getattr(args, "profile", None) or file_cfg.pop("profile", "toy")
    file_cfg.pop("profile", None)
    if profile not in ("toy", "paper"):
        raise UsageError(f"unknown profile {profile!r}; expected 'toy' or 'paper'")
    unknown = set(file_cfg) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    overrides: dict = {}
    env = env_seed()
    if env is not None:
        overrides["seed"] = env
    overrides.update(file_cfg)
    for flag, field_name in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size"),
                             ("weights", "weights"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None and field_name in cls.__dataclass_fields__:
            overrides[field_name] = v
    try:
        return getattr(cls, profile)(**overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {cls.__name__} settings: {e}") from None


def require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def write_json(path, payload: dict) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_make_dataset(args) -> int:
    from .dataset import make_dataset

    if args.objects < 1 or args.grasps_per_object < 1:
        raise UsageError("--objects and --grasps-per-object must be >= 1")
    seed = resolve_seed(args.seed)
    manifest = make_dataset(args.out, args.objects, args.grasps_per_object, seed,
                            template_seed=args.template_seed, steps=args.fit_steps)
    print(f"wrote {len(manifest['entries'])} grasps for {args.objects} objects to {args.out}"
          f" ({len(manifest['ungraspable'])} without an accepted fit)")
    return 0


def _scenes(data_dir, n_points: int, seed: int):
    from .dataset import load_dataset, prepare_scenes

    data = load_dataset(require_dir(data_dir, "dataset directory"))
    return data, prepare_scenes(data, n_points, seed)


def cmd_train_ae(args) -> int:
    from .autoencoder import AeConfig, save_ae, train_ae

    cfg = build_config(AeConfig, args, read_config_file(args.config))
    data, scenes = _scenes(args.data, cfg.object_points, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_ae(data.template, scenes, cfg, log_path=out.parent / f"{out.name}.log.jsonl")
    save_ae(res, data.template, out, seeds={"train": cfg.seed, "object_points": cfg.seed})
    print(f"autoencoder saved to {out}; final loss {res.history[-1]['total']:.6g}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .autoencoder import load_ae
    from .diffusion import DiffusionConfig, save_diffusion, train_diffusion

    ae_dir = require_dir(args.ae, "autoencoder checkpoint")
    ae = load_ae(ae_dir)
    cfg = build_config(DiffusionConfig, args, read_config_file(args.config))
    _, scenes = _scenes(args.data, cfg.object_points, cfg.seed)
    out = Path(args.out)
    res = train_diffusion(ae, scenes, cfg, log_path=None)
    save_diffusion(res, out, {"autoencoder": persistence.content_hash(ae_dir)},
                   seeds={"train": cfg.seed, "object_points": cfg.seed})
    print(f"diffusion model saved to {out}; final loss {res.history[-1]['loss']:.6g}")
    return 0


def cmd_train_adapt(args) -> int:
    from .adaptation import AdaptConfig, save_adapter, train_adaptation
    from .autoencoder import load_ae
    from .diffusion import load_diffusion

    ae_dir = require_dir(args.ae, "autoencoder checkpoint")
    diff_dir = require_dir(args.diffusion, "diffusion checkpoint")
    ae = load_ae(ae_dir)
    diff = load_diffusion(diff_dir, ae_dir)
    if diff.model.latent_dim != ae.model.config.latent_dim:
        raise persistence.CheckpointError(f"diffusion latent size {diff.model.latent_dim} does not match "
                                          f"autoencoder latent size {ae.model.config.latent_dim}")
    cfg = build_config(AdaptConfig, args, read_config_file(args.config))
    n_points = int(diff.manifest["config"]["object_points"])
    _, scenes = _scenes(args.data, n_points, cfg.seed)
    res = train_adaptation(ae, diff, scenes, cfg)
    lineage = {"autoencoder": persistence.content_hash(ae_dir), "diffusion": persistence.content_hash(diff_dir)}
    save_adapter(res, cfg, ae.model.config.latent_dim, args.out, lineage,
                 seeds={"train": cfg.seed, "object_points": cfg.seed})
    print(f"adapter saved to {args.out}; final loss {res.history[-1]['total']:.6g}")
    return 0


def _bundle(args, use_adapter: bool = True):
    from .pipeline import load_bundle_dir

    return load_bundle_dir(require_dir(args.bundle, "bundle directory"), use_adapter=use_adapter)


def cmd_generate(args) -> int:
    from . import meshio
    from .pipeline import generate, write_generated

    path = Path(args.object)
    if not path.is_file():
        raise UsageError(f"object mesh not found: {path}")
    if args.count < 1 or args.ddim_steps < 1:
        raise UsageError("--count and --ddim-steps must be >= 1")
    bundle = _bundle(args, use_adapter=not args.no_adapter)
    seed = resolve_seed(args.seed)
    results = generate(bundle, meshio.read_mesh(path), args.count, args.ddim_steps, seed,
                       use_adapter=not args.no_adapter)
    write_generated(results, args.out, extra={"object": path.name, "ddim_steps": args.ddim_steps,
                                              "request_seed": seed, "adapter": not args.no_adapter})
    print(f"wrote {len(results)} grasps to {args.out}")
    return 0


def _objects(path):
    from .dataset import load_objects

    objects = load_objects(require_dir(path, "object directory"))
    if not objects:
        raise UsageError(f"no objects found in {path}")
    return objects


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_set

    objects = _objects(args.objects)
    bundle = _bundle(args, use_adapter=not args.no_adapter)
    seed = resolve_seed(args.seed)
    report = evaluate_set(bundle, objects, args.per_object, args.ddim_steps, seed,
                          use_adapter=not args.no_adapter)
    report.config.update({"bundle": Path(args.bundle).name, "seeds": {"request": seed}})
    report.write_json(args.report)
    if args.csv:
        report.write_csv(args.csv)
    print(f"penetration {report.mean_penetration_volume:.4g} cm^3, displacement {report.mean_displacement:.4g} cm, "
          f"contact {report.contact_ratio:.4g}%, entropy {report.entropy}, cluster size {report.cluster_size}")
    return 0


def cmd_benchmark(args) -> int:
    from .dataset import make_objects
    from .pipeline import benchmark

    if args.objects < 1:
        raise UsageError("--objects must be >= 1")
    seed = resolve_seed(args.seed)
    bundle = _bundle(args)
    result = benchmark(bundle, make_objects(args.objects, seed), args.per_object, args.ddim_steps, seed)
    result["seeds"] = {"objects": seed, "request": seed}
    write_json(args.report, result)
    print(f"mean latency {result['mean_latency']:.4f} s over {result['grasps']} grasps ({result['hardware']})")
    return 0


def _ablate_no_adapt(args, seed: int) -> dict:
    from .metrics import evaluate_set

    objects = _objects(args.objects)
    out = {}
    for label, use in (("full", True), ("no-adapt", False)):
        bundle = _bundle(args, use_adapter=use)
        rep = evaluate_set(bundle, objects, args.per_object, args.ddim_steps, seed, use_adapter=use)
        out[label] = {k: v for k, v in rep.to_dict(include_latency=False).items() if k != "grasps"}
    return out


def _ablate_ae(args, seed: int, variants: dict) -> dict:
    from .autoencoder import AeConfig, evaluate_reconstruction, reconstruction_penetration, train_ae

    if args.test_data is None:
        raise UsageError(f"--mode {args.mode} needs --test-data")
    base = build_config(AeConfig, args, read_config_file(args.config))
    data, scenes = _scenes(args.data, base.object_points, base.seed)
    _, test_scenes = _scenes(args.test_data, base.object_points, base.seed)
    out = {}
    for label, overrides in variants.items():
        cfg = replace(base, **overrides)
        res = train_ae(data.template, scenes, cfg)
        ev = evaluate_reconstruction(data.template, res.model, test_scenes)
        pv = reconstruction_penetration(data.template, res.model, test_scenes)
        out[label] = {"config": cfg.to_dict(), "test_loss_param": ev["loss_param"], "test_loss_mesh": ev["loss_mesh"],
                      "test_mean_penetration_volume": float(np.mean(pv))}
        log.info("%s: %s", label, out[label])
    return out


def cmd_ablate(args) -> int:
    seed = resolve_seed(args.seed)
    if args.mode == "no-adapt":
        if args.bundle is None or args.objects is None:
            raise UsageError("--mode no-adapt needs --bundle and --objects")
        result = _ablate_no_adapt(args, seed)
    else:
        if args.data is None:
            raise UsageError(f"--mode {args.mode} needs --data")
        if args.mode == "no-physical-loss":
            variants = {"full": {}, "no-physical-loss": {"weights": (0.1, 1.0, 0.0, 0.0, 0.0)}}
        else:
            variants = {"vertices": {"input_mode": "vertices"}, "param-input": {"input_mode": "params"}}
        result = _ablate_ae(args, seed, variants)
    write_json(args.report, {"mode": args.mode, "seeds": {"request": seed}, "results": result})
    for label, r in result.items():
        key = "mean_penetration_volume" if "mean_penetration_volume" in r else "test_mean_penetration_volume"
        print(f"{label}: mean penetration {r[key]:.4g} cm^3")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on torch intra-op threads")
    common.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    common.add_argument("-v", "--verbose", action="store_true")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--config", default=None, help="JSON config; flags below override it")
    train.add_argument("--profile", choices=("toy", "paper"), default=None)
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--out", required=True)

    p = argparse.ArgumentParser(prog="graspforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", parents=[common], help="procedural objects with fitted grasps")
    s.add_argument("--out", required=True)
    s.add_argument("--objects", type=int, required=True)
    s.add_argument("--grasps-per-object", type=int, default=1)
    s.add_argument("--template-seed", type=int, default=0)
    s.add_argument("--fit-steps", type=int, default=500)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("train-ae", parents=[common, train], help="train the hand autoencoder")
    s.add_argument("--data", required=True)
    s.add_argument("--weights", type=parse_weights, default=None, help="five loss weights, comma-separated")
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("train-diffusion", parents=[common, train], help="train the latent noise predictor")
    s.add_argument("--ae", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("train-adapt", parents=[common, train], help="train the residual latent refiner")
    s.add_argument("--ae", required=True)
    s.add_argument("--diffusion", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--weights", type=parse_weights, default=None)
    s.set_defaults(func=cmd_train_adapt)

    s = sub.add_parser("generate", parents=[common], help="sample grasps for one object mesh")
    s.add_argument("--bundle", required=True)
    s.add_argument("--object", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--no-adapter", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="generate and score grasps for a directory of meshes")
    s.add_argument("--bundle", required=True)
    s.add_argument("--objects", required=True)
    s.add_argument("--per-object", type=int, default=4)
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--no-adapter", action="store_true")
    s.add_argument("--report", required=True)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", parents=[common], help="per-grasp latency on procedural objects")
    s.add_argument("--bundle", required=True)
    s.add_argument("--objects", type=int, default=128)
    s.add_argument("--per-object", type=int, default=1)
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("ablate", parents=[common], help="paired runs for one ablation")
    s.add_argument("--mode", choices=ABLATION_MODES, required=True)
    s.add_argument("--bundle", default=None, help="no-adapt: trained bundle")
    s.add_argument("--objects", default=None, help="no-adapt: object directory")
    s.add_argument("--per-object", type=int, default=4)
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--data", default=None, help="AE ablations: training set")
    s.add_argument("--test-data", default=None, help="AE ablations: held-out set")
    s.add_argument("--config", default=None)
    s.add_argument("--profile", choices=("toy", "paper"), default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1 with its message
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
