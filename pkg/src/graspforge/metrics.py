"""Grasp evaluation: penetration volume, contact, simulated stability, diversity, latency."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .losses import CONTACT_THRESHOLD

VOXEL_RESOLUTION = 0.001  # m
REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    stiffness: float = 1e4  # N/m, total over the active contact patch
    damping: float = 5.0  # N s/m, total over the active contact patch
    friction: float = 0.8
    dt: float = 0.004
    steps: int = 250
    gravity: float = 9.81  # along -z
    density: float = 1000.0  # kg/m^3
    min_mass: float = 0.1  # kg
    inertia_resolution: float = 0.002  # m


def _vertices(x) -> np.ndarray:
    if isinstance(x, geometry.TriMesh):
        return x.vertices
    return geometry._as_points(x)


def penetration_volume(hand: geometry.TriMesh, obj: geometry.TriMesh) -> float:
    """Shared interior volume in cm^3, voxelized at 1 mm."""
    return geometry.intersection_volume(hand, obj, VOXEL_RESOLUTION)


def min_surface_distance(hand, obj: geometry.TriMesh) -> float:
    """Smallest unsigned distance from a hand vertex to the object surface (m)."""
    v = _vertices(hand)
    lo, hi = obj.bounds
    near = np.all((v >= lo - CONTACT_THRESHOLD) & (v <= hi + CONTACT_THRESHOLD), axis=1)
    if not near.any():
        # every vertex is outside the padded box, so none is within the threshold
        gap = np.maximum(np.maximum(lo - v, v - hi), 0.0)
        return float(np.sqrt((gap * gap).sum(-1)).min())
    _, d2, _ = geometry.closest_points(obj, v[near])
    return float(np.sqrt(d2.min()))


def in_contact(hand, obj: geometry.TriMesh) -> bool:
    return min_surface_distance(hand, obj) < CONTACT_THRESHOLD


def contact_ratio(grasps, obj: geometry.TriMesh) -> float:
    """Percentage of grasps whose closest vertex is within 5 mm of the object surface."""
    grasps = list(grasps)
    if not grasps:
        raise ValueError("contact_ratio needs at least one grasp")
    return 100.0 * sum(in_contact(g, obj) for g in grasps) / len(grasps)


# ---------------------------------------------------------------- simulator


def _mass_properties(obj: geometry.TriMesh, cfg: SimConfig):
    """Mass, centre of mass and body inertia tensor from a voxelized solid."""
    grid = geometry.voxelize_solid(obj, cfg.inertia_resolution)
    idx = np.argwhere(grid.occupancy)
    if len(idx) == 0:
        # thinner than one voxel: fall back to the vertex mean and a point-like body
        com = obj.vertices.mean(0)
        pts = obj.vertices
    else:
        pts = grid.centers(idx)
        com = pts.mean(0)
    volume = max(obj.volume, 0.0)
    mass = max(cfg.density * volume, cfg.min_mass)
    r = pts - com
    inertia = (mass / len(pts)) * ((r * r).sum() * np.eye(3) - r.T @ r)
    # floor keeps the angular update stable for slender or tiny bodies
    floor = mass * (0.01 ** 2) * 0.4
    inertia = inertia + floor * np.eye(3)
    return mass, com, inertia


def _rotation_update(R, w, dt):
    return geometry.rotation_matrix(w * dt) @ R


def simulation_displacement(hand, obj: geometry.TriMesh, config: SimConfig | None = None) -> float:
    """Centre-of-mass drift (cm) of the object after 1 s under gravity, the hand held static.

    Hand vertices act as fixed contact points. A vertex inside the object produces a
    penalty force along the surface normal at its closest point. Spring and damper
    constants are split evenly across the active contacts so the patch as a whole
    has the configured stiffness. Friction opposes tangential slip, clamped by mu*f_n.
    Integration is semi-implicit Euler.
    """
    cfg = config or SimConfig()
    if not obj.is_watertight:
        raise ValueError("simulation needs a watertight object mesh")
    pts = _vertices(hand) if hand is not None else np.zeros((0, 3))
    mass, com0, inertia_body = _mass_properties(obj, cfg)
    body = obj.transformed(translation=-com0)  # body frame centred at the COM
    radius = float(np.linalg.norm(body.vertices, axis=1).max())
    inv_inertia_body = np.linalg.inv(inertia_body)

    x = com0.copy()
    v = np.zeros(3)
    R = np.eye(3)
    w = np.zeros(3)
    g = np.array([0.0, 0.0, -cfg.gravity])
    for _ in range(cfg.steps):
        force = mass * g
        torque = np.zeros(3)
        if len(pts):
            rel = pts - x
            near = (rel * rel).sum(-1) <= radius * radius
            if near.any():
                local = rel[near] @ R  # into body frame
                inner = geometry.inside(body, local)
                if inner.any():
                    lp = local[inner]
                    cp, _, _ = geometry.closest_points(body, lp)
                    depth_vec = cp - lp  # from the hand point out to the surface
                    depth = np.linalg.norm(depth_vec, axis=1)
                    ok = depth > 1e-12
                    if ok.any():
                        n_body = -depth_vec[ok] / depth[ok, None]  # push object away from the point
                        n = n_body @ R.T
                        arm = lp[ok] @ R.T
                        count = int(ok.sum())
                        k, c = cfg.stiffness / count, cfg.damping / count
                        vel = v + np.cross(w, arm)
                        vn = (vel * n).sum(-1)
                        fn = np.maximum(k * depth[ok] - c * vn, 0.0)
                        vt = vel - vn[:, None] * n
                        speed_t = np.linalg.norm(vt, axis=1)
                        # friction just large enough to stop slip within a step, capped by mu*f_n
                        ft_mag = np.minimum(cfg.friction * fn, (mass / count) * speed_t / cfg.dt)
                        ft = -np.where(speed_t[:, None] > 1e-12, vt / np.maximum(speed_t, 1e-12)[:, None], 0.0)
                        f = fn[:, None] * n + ft_mag[:, None] * ft
                        force = force + f.sum(0)
                        torque = torque + np.cross(arm, f).sum(0)
        v = v + cfg.dt * force / mass
        inv_inertia = R @ inv_inertia_body @ R.T
        w = w + cfg.dt * (inv_inertia @ torque)
        x = x + cfg.dt * v
        R = _rotation_update(R, w, cfg.dt)
    return float(np.linalg.norm(x - com0) * 100.0)


# ---------------------------------------------------------------- diversity


def _centroid(points: np.ndarray) -> np.ndarray:
    # exact for coincident members, where a float mean can be off by an ulp
    if np.all(points == points[0]):
        return points[0].copy()
    return points.mean(0)


def kmeans(data: np.ndarray, k: int, seed: int, iterations: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ seeding. Empty clusters keep their previous centroid."""
    x = np.asarray(data, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"need at least {k} samples for {k} clusters, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(-1)
    for i in range(1, k):
        total = d2.sum()
        j = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[i] = x[j]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(-1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = np.argmin(dist, axis=1)
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = _centroid(x[members])
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(dist, axis=1)
    return labels, centers


def diversity(keypoint_sets, k: int = 20, seed: int = 0) -> tuple[float, float]:
    """(entropy in nats, cluster size in cm) of k-means assignments over flattened keypoints."""
    x = np.asarray([np.asarray(kp, dtype=np.float64).ravel() for kp in keypoint_sets])
    if len(x) < k:
        raise ValueError(f"diversity needs at least {k} grasps, got {len(x)}")
    labels, centers = kmeans(x, k, seed)
    counts = np.bincount(labels, minlength=k)
    p = counts[counts > 0] / len(x)
    entropy = float(-(p * np.log(p)).sum())
    spreads = []
    for c in np.flatnonzero(counts):
        members = x[labels == c]
        spreads.append(np.linalg.norm(members - centers[c], axis=1).mean())
    cluster_size = float(np.mean(spreads) * 100.0)
    # float round-off can push a perfectly balanced split a hair above ln k
    entropy = min(max(entropy, 0.0), math.log(k))
    return entropy, cluster_size


# ---------------------------------------------------------------- reports


@dataclass
class GraspRecord:
    object_name: str
    index: int
    seed: int
    penetration_volume: float
    displacement: float
    in_contact: bool


@dataclass
class GraspReport:
    grasps: list[GraspRecord]
    mean_penetration_volume: float
    mean_displacement: float
    contact_ratio: float
    entropy: float | None
    cluster_size: float | None
    mean_latency: float | None = None
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        if not 0.0 <= self.contact_ratio <= 100.0:
            raise ValueError("contact ratio must lie in [0, 100]")
        for name in ("mean_penetration_volume", "mean_displacement"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self, include_latency: bool = True) -> dict:
        d = asdict(self)
        if not include_latency:
            d.pop("mean_latency")
        return d

    def write_json(self, path, include_latency: bool = False) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(include_latency), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["object", "index", "seed", "penetration_volume_cm3", "displacement_cm", "in_contact"])
            for g in self.grasps:
                w.writerow([g.object_name, g.index, g.seed, f"{g.penetration_volume:.6f}",
                            f"{g.displacement:.6f}", int(g.in_contact)])


def summarize(records: list[GraspRecord], keypoint_sets, diversity_k: int = 20, seed: int = 0,
              mean_latency: float | None = None, config: dict | None = None) -> GraspReport:
    if not records:
        raise ValueError("no grasps to summarize")
    ent = size = None
    if len(keypoint_sets) >= diversity_k:
        ent, size = diversity(keypoint_sets, diversity_k, seed)
    return GraspReport(
        grasps=records,
        mean_penetration_volume=float(np.mean([r.penetration_volume for r in records])),
        mean_displacement=float(np.mean([r.displacement for r in records])),
        contact_ratio=100.0 * sum(r.in_contact for r in records) / len(records),
        entropy=ent,
        cluster_size=size,
        mean_latency=mean_latency,
        config=dict(config or {}),
    )


def evaluate_grasp(hand: geometry.TriMesh, obj: geometry.TriMesh, name: str, index: int, seed: int,
                   sim: SimConfig | None = None) -> GraspRecord:
    return GraspRecord(
        object_name=name,
        index=index,
        seed=seed,
        penetration_volume=penetration_volume(hand, obj),
        displacement=simulation_displacement(hand, obj, sim),
        in_contact=in_contact(hand, obj),
    )


def evaluate_set(bundle, objects, per_object_count: int, ddim_steps: int = 50, seed: int = 0,
                 use_adapter: bool = True, diversity_k: int = 20, sim: SimConfig | None = None) -> GraspReport:
    """Generate ``per_object_count`` grasps for each (name, mesh) pair and aggregate every metric."""
    from . import pipeline
    from .hand_model import keypoints

    objects = list(objects)
    if not objects:
        raise ValueError("no objects found")
    records, kps, latencies = [], [], []
    for name, mesh in objects:
        results = pipeline.generate(bundle, mesh, per_object_count, ddim_steps, seed, use_adapter=use_adapter)
        for i, res in enumerate(results):
            records.append(evaluate_grasp(res.mesh, mesh, name, i, res.seed, sim))
            kps.append(keypoints(bundle.template, res.mesh.vertices))
            latencies.append(res.latency)
    cfg = {"per_object_count": per_object_count, "ddim_steps": ddim_steps, "seed": seed,
           "use_adapter": use_adapter, "diversity_k": diversity_k, "objects": [n for n, _ in objects]}
    return summarize(records, kps, diversity_k, seed, float(np.mean(latencies)), cfg)
