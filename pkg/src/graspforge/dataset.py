"""Synthetic hand-object data: procedural objects, fitted GT grasps, manifests and loaders."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from . import geometry, losses, meshio, metrics, persistence
from .hand_model import (FINGERS, N_PARAMS, POSE, SHAPE, TRANSLATION, HandParams, HandTemplate,
                         build_procedural_template, hand_mesh, lbs_forward)

log = logging.getLogger(__name__)

EXTENT_RANGE = (0.04, 0.12)  # m, per axis of the axis-aligned bounding box
KINDS = ("sphere", "box", "cylinder", "capsule", "union")
FIT_STEPS = 500
FIT_RETRIES = 8
MAX_PENETRATION_CM3 = 2.0
MANIFEST_VERSION = 1
# contact pull as in autoencoder training; a stiffer penetration term keeps fitted grasps shallow
FIT_WEIGHTS = losses.LossWeights(0.0, 0.0, 1000.0, 100.0, 0.0)


# ---------------------------------------------------------------- objects


def _primitive(kind: str, rng: np.random.Generator) -> geometry.TriMesh:
    if kind == "sphere":
        return geometry.icosphere(2, rng.uniform(0.02, 0.055))
    if kind == "box":
        return geometry.box(rng.uniform(0.03, 0.1, 3))
    if kind == "cylinder":
        return geometry.cylinder(rng.uniform(0.018, 0.045), rng.uniform(0.05, 0.11), segments=20)
    if kind == "capsule":
        return geometry.capsule(rng.uniform(0.015, 0.035), rng.uniform(0.02, 0.06), segments=16, cap_rings=3)
    raise ValueError(f"unknown primitive kind {kind!r}")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()


def _one_object(kind: str, rng: np.random.Generator) -> geometry.TriMesh:
    if kind == "union":
        a_kind, b_kind = rng.choice(["sphere", "box", "cylinder", "capsule"], 2)
        a = _primitive(str(a_kind), rng).transformed(_random_rotation(rng))
        b = _primitive(str(b_kind), rng).transformed(_random_rotation(rng))
        # shift b so the two parts overlap by a fraction of the smaller half-extent
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        half = min(np.ptp(a.vertices, 0).min(), np.ptp(b.vertices, 0).min()) / 2
        mesh = geometry.merge_meshes([a, b.transformed(translation=d * half * rng.uniform(0.6, 1.2))])
    else:
        mesh = _primitive(kind, rng).transformed(_random_rotation(rng))
    lo, hi = mesh.bounds
    return mesh.transformed(translation=-(lo + hi) / 2)


def make_objects(count: int, seed: int) -> list[geometry.TriMesh]:
    """Watertight primitives and two-part unions, bounding-box centred, every extent in [4, 12] cm.

    Kinds cycle in a fixed order; sizes and orientations are drawn per object and
    redrawn until the extent constraint holds.
    """
    if count < 0:
        raise ValueError("object count must be >= 0")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        kind = KINDS[i % len(KINDS)]
        for _ in range(1000):
            mesh = _one_object(kind, rng)
            ext = np.ptp(mesh.vertices, axis=0)
            if np.all(ext >= EXTENT_RANGE[0]) and np.all(ext <= EXTENT_RANGE[1]):
                break
        else:  # pragma: no cover - the size ranges above make this practically unreachable
            raise RuntimeError(f"could not draw a {kind} within the extent range")
        assert mesh.is_watertight
        out.append(mesh)
    return out


def object_points(mesh: geometry.TriMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface samples centred at their centroid, plus the centroid offset."""
    pts = geometry.sample_surface(mesh, n, seed).points
    offset = pts.mean(0)
    return pts - offset, offset


# ---------------------------------------------------------------- GT grasp fitting


def _flex_pose(amount: float) -> np.ndarray:
    """Joint rotations curling every finger toward the palm side (-z) by ``amount`` rad per joint."""
    pose = np.zeros((16, 3))
    for f_idx, name in enumerate(FINGERS):
        j0 = 1 + 3 * f_idx
        if name == "thumb":
            # thumb curls about the in-plane axis perpendicular to its direction
            axis = np.array([0.62, -0.75, 0.0]) / np.hypot(0.62, 0.75)
            pose[j0:j0 + 3] = -0.6 * amount * axis
        else:
            pose[j0:j0 + 3] = [-amount, 0.0, 0.0]
    return pose


def initial_grasp(template: HandTemplate, obj: geometry.TriMesh, rng: np.random.Generator) -> np.ndarray:
    """Palm facing the object along a random approach direction, fingers half-curled."""
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    # rotation taking the palm normal (-z) onto -u, with a random roll about u
    base = Rotation.align_vectors([-u], [[0.0, 0.0, -1.0]])[0]
    roll = Rotation.from_rotvec(u * rng.uniform(-np.pi, np.pi))
    rot = roll * base
    support = float((obj.vertices @ u).max())
    palm = template.rest_vertices[:288].mean(0)  # palm ellipsoid vertices come first
    palm_target = u * (support + 0.008)
    v = np.zeros(N_PARAMS)
    v[TRANSLATION] = palm_target - rot.apply(palm)
    pose = _flex_pose(rng.uniform(0.5, 0.8))
    pose[0] = rot.as_rotvec()
    v[POSE] = pose.reshape(-1)
    v[SHAPE] = np.clip(rng.normal(size=10), -2.0, 2.0)
    return v


@dataclass
class FitResult:
    params: HandParams | None
    penetration_volume: float
    in_contact: bool
    seed: int
    accepted: bool


CLOSING_CURL = 1.2  # rad per joint the finger prior pulls toward
CLOSING_WEIGHT = 0.5
WRIST_WEIGHT = 10.0


def fit_energy(template, params: torch.Tensor, obj: geometry.TriMesh, obj_pts: torch.Tensor,
               anchor: torch.Tensor, weights: losses.LossWeights, closing: torch.Tensor):
    verts = lbs_forward(template, params)
    cmap = losses.loss_cmap(verts, obj_pts)
    pen = losses.loss_penetr(verts, obj)
    # keeps the wrist from drifting off along the surface
    wrist = ((params[TRANSLATION] - anchor[TRANSLATION]) ** 2).sum()
    # fingers close toward a fist until the penetration term stops them
    fingers = ((params[POSE][3:] - closing) ** 2).sum()
    return weights.cmap * cmap + weights.penetr * pen + WRIST_WEIGHT * wrist + CLOSING_WEIGHT * fingers, verts


def fit_gt_grasp(template: HandTemplate, obj: geometry.TriMesh, seed: int, steps: int = FIT_STEPS,
                 retries: int = FIT_RETRIES, n_points: int = 512, lr: float = 2e-3) -> FitResult:
    """Optimize a grasp onto ``obj`` with the contact and penetration losses, retrying on rejection.

    Acceptance needs a penetration volume below 2 cm^3 and a hand vertex within 5 mm of
    the surface. Shape coefficients are drawn per attempt and held fixed.
    """
    obj_pts = torch.tensor(geometry.sample_surface(obj, n_points, seed).points)
    weights = FIT_WEIGHTS
    last = None
    for attempt in range(retries):
        s = seed * 1000 + attempt
        rng = np.random.default_rng(s)
        init = torch.as_tensor(initial_grasp(template, obj, rng))
        free = init.clone().requires_grad_(True)
        opt = torch.optim.Adam([free], lr=lr)
        mask = torch.ones(N_PARAMS, dtype=torch.float64)
        mask[SHAPE] = 0.0
        closing = torch.as_tensor(_flex_pose(CLOSING_CURL)[1:].reshape(-1))
        for _ in range(steps):
            opt.zero_grad()
            params = init + (free - init) * mask
            energy, _ = fit_energy(template, params, obj, obj_pts, init, weights, closing)
            energy.backward()
            opt.step()
        with torch.no_grad():
            final = init + (free - init) * mask
        # judge the fp32 values that get stored, so the on-load recheck sees the same grasp
        hp = HandParams(final.numpy().astype(np.float32).astype(np.float64))
        mesh = hand_mesh(template, hp)
        pv = metrics.penetration_volume(mesh, obj)
        contact = metrics.in_contact(mesh, obj)
        last = FitResult(hp, pv, contact, s, pv < MAX_PENETRATION_CM3 and contact)
        if last.accepted:
            return last
        log.info("grasp attempt %d rejected (penetration %.2f cm3, contact %s)", attempt, pv, contact)
    return FitResult(None, last.penetration_volume, last.in_contact, last.seed, False)


# ---------------------------------------------------------------- records and manifests


@dataclass(frozen=True)
class GraspRecord:
    name: str
    mesh: geometry.TriMesh
    params: HandParams


@dataclass
class Dataset:
    template: HandTemplate
    records: list[GraspRecord]
    template_seed: int | None = None

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.template, [self.records[i] for i in indices], self.template_seed)

    def object_names(self) -> list[str]:
        return sorted({r.name for r in self.records})


def make_dataset(out_dir, n_objects: int, grasps_per_object: int, seed: int, template_seed: int = 0,
                 steps: int = FIT_STEPS) -> dict:
    """Generate objects and fitted grasps, write them under ``out_dir`` with a manifest."""
    out = Path(out_dir)
    template = build_procedural_template(template_seed)
    objects = make_objects(n_objects, seed)
    entries, ungraspable = [], []
    for i, mesh in enumerate(objects):
        name = f"obj_{i:03d}"
        obj_path = out / "objects" / f"{name}.obj"
        meshio.write_obj(mesh, obj_path)
        mesh = meshio.read_obj(obj_path)  # fit against exactly what loaders will see
        for g in range(grasps_per_object):
            res = fit_gt_grasp(template, mesh, seed=(seed * 7919 + i) * 97 + g, steps=steps)
            if not res.accepted:
                ungraspable.append(f"{name}#{g}")
                log.warning("%s grasp %d: no accepted fit", name, g)
                continue
            gpath = out / "grasps" / f"{name}_g{g}.gftb"
            persistence.write_blob({"params": res.params.vector.astype(np.float32)}, gpath)
            entries.append({"name": name, "object": f"objects/{name}.obj", "grasp": f"grasps/{name}_g{g}.gftb",
                            "penetration_volume": round(res.penetration_volume, 6)})
    manifest = {"format_version": MANIFEST_VERSION, "template": {"procedural_seed": template_seed},
                "seed": seed, "objects": n_objects, "grasps_per_object": grasps_per_object,
                "entries": entries, "ungraspable": ungraspable}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class DatasetError(ValueError):
    pass


def load_dataset(path, recheck: bool = True) -> Dataset:
    """Load a manifest (file or its directory) and validate every record.

    ``recheck`` re-runs the grasp acceptance predicate (about 0.2 s per record).
    """
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.exists():
        raise DatasetError(f"dataset manifest not found: {mpath}")
    root = mpath.parent
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported dataset manifest version {manifest.get('format_version')}")
    tcfg = manifest.get("template", {})
    if "external" in tcfg:
        from .hand_model import load_external_template
        template = load_external_template(root / tcfg["external"])
        tseed = None
    else:
        tseed = int(tcfg.get("procedural_seed", 0))
        template = build_procedural_template(tseed)
    meshes: dict[str, geometry.TriMesh] = {}
    records = []
    for e in manifest["entries"]:
        opath, gpath = root / e["object"], root / e["grasp"]
        for p in (opath, gpath):
            if not p.exists():
                raise DatasetError(f"missing file listed in manifest: {p}")
        if e["object"] not in meshes:
            mesh = meshio.read_mesh(opath)
            if not mesh.is_watertight:
                raise DatasetError(f"object mesh is not watertight: {opath}")
            meshes[e["object"]] = mesh
        blob = persistence.read_blob(gpath)
        if "params" not in blob:
            raise DatasetError(f"grasp blob has no 'params' tensor: {gpath}")
        vec = blob["params"].reshape(-1)
        if vec.shape != (N_PARAMS,):
            raise DatasetError(f"grasp params in {gpath} have length {vec.size}, expected {N_PARAMS}")
        if not np.all(np.isfinite(vec)):
            raise DatasetError(f"grasp params in {gpath} are not finite")
        params = HandParams(vec.astype(np.float64))
        if recheck:
            hm = hand_mesh(template, params)
            mesh = meshes[e["object"]]
            if metrics.penetration_volume(hm, mesh) >= MAX_PENETRATION_CM3 or not metrics.in_contact(hm, mesh):
                raise DatasetError(f"grasp {gpath} fails the acceptance predicate")
        records.append(GraspRecord(e["name"], meshes[e["object"]], params))
    if not records:
        raise DatasetError(f"dataset {mpath} has no records")
    return Dataset(template, records, tseed)


def load_objects(directory) -> list[tuple[str, geometry.TriMesh]]:
    """All .obj/.ply meshes in a directory (or a dataset's objects/ folder), sorted by name."""
    d = Path(directory)
    if (d / "objects").is_dir():
        d = d / "objects"
    if not d.is_dir():
        raise FileNotFoundError(f"object directory not found: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".obj", ".ply"))
    return [(p.stem, meshio.read_mesh(p)) for p in files]


def grasp_diagnostics(template, params: HandParams, obj) -> dict:
    mesh = hand_mesh(template, params)
    return {"penetration_volume": metrics.penetration_volume(mesh, obj),
            "min_distance": metrics.min_surface_distance(mesh, obj),
            "max_pose": float(np.abs(params.pose[1:]).max())}



@dataclass(frozen=True)
class Scene:
    """A record in the object-centred frame used for training and inference."""

    name: str
    mesh: geometry.TriMesh
    points: np.ndarray  # N_o x 3, centroid at the origin
    params: HandParams
    offset: np.ndarray  # world = centred + offset


def prepare_scenes(data: Dataset, n_points: int, seed: int) -> list[Scene]:
    """Centre every record at its sampled cloud's centroid; the hand translation shifts with it."""
    scenes = []
    names = data.object_names()
    for rec in data.records:
        # one cloud per object so every grasp of an object shares its frame
        pts, offset = object_points(rec.mesh, n_points, seed * 100003 + names.index(rec.name))
        vec = rec.params.vector.copy()
        vec[TRANSLATION] -= offset
        scenes.append(Scene(rec.name, rec.mesh.transformed(translation=-offset), pts, HandParams(vec), offset))
    return scenes
