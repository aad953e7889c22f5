"""Differentiable parametric hand.

A 61-vector of hand parameters (3 translation, 16x3 axis-angle joint
rotations with joint 0 as the global/wrist rotation, 10 shape coefficients)
is turned into a posed 778-vertex mesh by linear blend skinning over a
16-joint kinematic tree. The procedural template below stands in for
licensed MANO assets; a MANO-compatible template can be loaded from disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .persistence import read_blob, write_blob

N_PARAMS = 61
N_JOINTS = 16
N_SHAPE = 10
N_KEYPOINTS = 21
N_VERTS = 778
SHAPE_LIMIT = 5.0

TRANSLATION = slice(0, 3)
POSE = slice(3, 51)
SHAPE = slice(51, 61)

# joint order: wrist, index(1-3), middle(4-6), pinky(7-9), ring(10-12), thumb(13-15)
FINGERS = ("index", "middle", "pinky", "ring", "thumb")
PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
# keypoint rows 16..20 are fingertips in the order thumb, index, middle, ring, pinky
TIP_ORDER = ("thumb", "index", "middle", "ring", "pinky")


@dataclass(frozen=True)
class HandParams:
    """61 hand parameters. Shape coefficients are clamped to +-5 at construction."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"hand parameters must have length {N_PARAMS}, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("hand parameters must be finite")
        v[SHAPE] = np.clip(v[SHAPE], -SHAPE_LIMIT, SHAPE_LIMIT)
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def zeros(cls) -> "HandParams":
        return cls(np.zeros(N_PARAMS))

    @classmethod
    def from_parts(cls, translation=None, pose=None, shape=None) -> "HandParams":
        v = np.zeros(N_PARAMS)
        if translation is not None:
            v[TRANSLATION] = translation
        if pose is not None:
            v[POSE] = np.asarray(pose, dtype=np.float64).reshape(-1)
        if shape is not None:
            v[SHAPE] = shape
        return cls(v)

    @property
    def translation(self) -> np.ndarray:
        return self.vector[TRANSLATION]

    @property
    def pose(self) -> np.ndarray:
        return self.vector[POSE].reshape(N_JOINTS, 3)

    @property
    def global_rotation(self) -> np.ndarray:
        return self.pose[0]

    @property
    def shape(self) -> np.ndarray:
        return self.vector[SHAPE]


@dataclass(frozen=True, eq=False)
class HandTemplate:
    rest_vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3
    joints: np.ndarray  # 16 x 3
    weights: np.ndarray  # V x 16, rows sum to 1
    shape_basis: np.ndarray  # 10 x V x 3
    parents: np.ndarray  # 16, parents[0] == -1
    regressor: np.ndarray  # 21 x V, rows sum to 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate_template(self)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def mesh(self) -> geometry.TriMesh:
        return geometry.TriMesh(self.rest_vertices, self.faces)

    def buffers(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        """Torch copies of the template arrays, cached per dtype."""
        if dtype not in self._cache:
            self._cache[dtype] = {
                "rest": torch.as_tensor(self.rest_vertices, dtype=dtype),
                "joints": torch.as_tensor(self.joints, dtype=dtype),
                "weights": torch.as_tensor(self.weights, dtype=dtype),
                "basis": torch.as_tensor(self.shape_basis, dtype=dtype),
                "regressor": torch.as_tensor(self.regressor, dtype=dtype),
            }
        return self._cache[dtype]


def validate_template(t: HandTemplate) -> None:
    v = t.rest_vertices
    nv = len(v)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"rest vertices must be V x 3, got {v.shape}")
    if t.joints.shape != (N_JOINTS, 3):
        raise ValueError(f"joints must be {N_JOINTS} x 3, got {t.joints.shape}")
    if t.weights.shape != (nv, N_JOINTS):
        raise ValueError(f"skinning weights must be {nv} x {N_JOINTS}, got {t.weights.shape}")
    if t.shape_basis.shape != (N_SHAPE, nv, 3):
        raise ValueError(f"shape basis must be {N_SHAPE} x {nv} x 3, got {t.shape_basis.shape}")
    if t.regressor.shape != (N_KEYPOINTS, nv):
        raise ValueError(f"keypoint regressor must be {N_KEYPOINTS} x {nv}, got {t.regressor.shape}")
    if t.parents.shape != (N_JOINTS,):
        raise ValueError(f"parent table must have {N_JOINTS} entries")
    if t.faces.ndim != 2 or t.faces.shape[1] != 3 or t.faces.min() < 0 or t.faces.max() >= nv:
        raise ValueError("faces must be F x 3 indices into the vertex array")
    if np.abs(t.weights.sum(1) - 1).max() > 1e-6 or t.weights.min() < 0:
        raise ValueError("skinning weight rows must be non-negative and sum to 1")
    if np.abs(t.regressor.sum(1) - 1).max() > 1e-6:
        raise ValueError("keypoint regressor rows must sum to 1")
    check_kinematic_tree(t.parents)


def check_kinematic_tree(parents) -> None:
    """Raise unless ``parents`` is a tree rooted at joint 0 listed parents-first."""
    parents = np.asarray(parents)
    if parents[0] != -1:
        raise ValueError("joint 0 must be the root (parent -1)")
    for j in range(1, len(parents)):
        seen, k = set(), j
        while k != 0:
            if k in seen or not 0 <= parents[k] < len(parents):
                raise ValueError(f"parent table is not a tree: cycle or bad index at joint {j}")
            seen.add(k)
            k = int(parents[k])
        if parents[j] >= j:
            raise ValueError(f"joint {j} listed before its parent {parents[j]}")


# ---------------------------------------------------------------- kinematics


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """(..., 3) axis-angle -> (..., 3, 3) rotation; series expansion below 1e-8 rad."""
    r = axis_angle
    theta2 = (r * r).sum(-1, keepdim=True)
    small = theta2 < 1e-16
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe2)
    zero = torch.zeros_like(r[..., 0])
    K = torch.stack([
        torch.stack([zero, -r[..., 2], r[..., 1]], -1),
        torch.stack([r[..., 2], zero, -r[..., 0]], -1),
        torch.stack([-r[..., 1], r[..., 0], zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=r.dtype).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def lbs_forward(template: HandTemplate, params) -> torch.Tensor:
    """Posed vertices (..., V, 3) for parameters (..., 61).

    Each joint transform is a rotation about its rest position composed down the
    tree. Skinning is written as rest + sum_j w_j (A_j v - v) so that the zero
    pose reproduces the rest mesh bit for bit.
    """
    p = params if torch.is_tensor(params) else torch.tensor(
        np.array(params.vector if isinstance(params, HandParams) else params), dtype=torch.float64)
    buf = template.buffers(p.dtype)
    batch = p.shape[:-1]
    pose = p[..., POSE].reshape(*batch, N_JOINTS, 3)
    shape = p[..., SHAPE]
    v = buf["rest"] + torch.einsum("...k,kvc->...vc", shape, buf["basis"])
    R = rodrigues(pose)
    J = buf["joints"]
    rots, trans = [], []
    for j in range(N_JOINTS):
        local_t = J[j] - (R[..., j, :, :] @ J[j].unsqueeze(-1)).squeeze(-1)
        par = int(template.parents[j])
        if par < 0:
            rots.append(R[..., j, :, :])
            trans.append(local_t)
        else:
            rots.append(rots[par] @ R[..., j, :, :])
            trans.append((rots[par] @ local_t.unsqueeze(-1)).squeeze(-1) + trans[par])
    A_R = torch.stack(rots, -3)  # (..., 16, 3, 3)
    A_t = torch.stack(trans, -2)  # (..., 16, 3)
    eye = torch.eye(3, dtype=p.dtype)
    W = buf["weights"]
    blend_R = torch.einsum("vj,...jab->...vab", W, A_R - eye)
    blend_t = torch.einsum("vj,...ja->...va", W, A_t)
    posed = v + (blend_R @ v.unsqueeze(-1)).squeeze(-1) + blend_t
    return posed + p[..., TRANSLATION].unsqueeze(-2)


def hand_mesh(template: HandTemplate, params) -> geometry.TriMesh:
    with torch.no_grad():
        v = lbs_forward(template, params)
    return geometry.TriMesh(v.detach().double().numpy(), template.faces)


def keypoints(template: HandTemplate, vertices):
    """21 keypoints as regressor-weighted vertex averages; works on arrays and tensors."""
    if torch.is_tensor(vertices):
        return template.buffers(vertices.dtype)["regressor"] @ vertices
    return template.regressor @ np.asarray(vertices, dtype=np.float64)


# ---------------------------------------------------------------- procedural template

_FINGER_SPECS = {
    # name: (base, direction, segment lengths, radius)
    "index": ((0.026, 0.086, 0.0), (0.08, 1.0, 0.0), (0.040, 0.024, 0.019), 0.0086),
    "middle": ((0.008, 0.090, 0.0), (0.0, 1.0, 0.0), (0.044, 0.028, 0.021), 0.0088),
    "ring": ((-0.010, 0.086, 0.0), (-0.06, 1.0, 0.0), (0.041, 0.026, 0.020), 0.0082),
    "pinky": ((-0.027, 0.078, 0.0), (-0.15, 1.0, 0.0), (0.032, 0.019, 0.017), 0.0072),
    "thumb": ((0.024, 0.018, -0.008), (0.75, 0.62, -0.25), (0.036, 0.030, 0.024), 0.0095),
}
_PALM_CENTER = np.array([0.0, 0.045, 0.0])
_PALM_AXES = np.array([0.042, 0.048, 0.014])
_PALM_RINGS, _PALM_AROUND = 13, 22
_FINGER_AROUND = 8
_SKIN_SIGMA = 0.006
_PALM_SKIN_SIGMA = 0.012


def _perpendicular_frame(d):
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def _finger_capsule(base, direction, lengths, radius):
    """8 x 12 ring capsule with two poles (98 vertices); also per-vertex axial coordinate."""
    d, u, w = _perpendicular_frame(np.asarray(direction, dtype=np.float64))
    l1, l2, l3 = lengths
    total = l1 + l2 + l3
    c30, s30 = np.cos(np.pi / 6), 0.5
    rings = [(-radius * c30, radius * s30), (-radius * s30, radius * c30)]
    for s in (0, l1 / 2, l1, l1 + l2 / 2, l1 + l2, l1 + l2 + l3 / 3, l1 + l2 + 2 * l3 / 3, total):
        rings.append((s, radius))
    rings += [(total + radius * s30, radius * c30), (total + radius * c30, radius * s30)]
    phi = 2 * np.pi * np.arange(_FINGER_AROUND) / _FINGER_AROUND
    verts, axial = [np.asarray(base) - radius * d], [-radius]
    ring_start = []
    for s, r in rings:
        ring_start.append(len(verts))
        for ph in phi:
            verts.append(base + s * d + r * (np.cos(ph) * u + np.sin(ph) * w))
            axial.append(s)
    verts.append(base + (total + radius) * d)
    axial.append(total + radius)
    n = _FINGER_AROUND
    # faces oriented outward for the right-handed frame (d, u, w)
    faces = [(0, ring_start[0] + (k + 1) % n, ring_start[0] + k) for k in range(n)]
    for ra, rb in zip(ring_start[:-1], ring_start[1:]):
        faces += geometry._ring_faces(ra, rb, n)
    top = len(verts) - 1
    faces += [(ring_start[-1] + k, ring_start[-1] + (k + 1) % n, top) for k in range(n)]
    return np.array(verts), np.array(faces), np.array(axial), ring_start


def _palm_ellipsoid(center, axes):
    theta = np.pi * (np.arange(_PALM_RINGS) + 1) / (_PALM_RINGS + 1)
    phi = 2 * np.pi * np.arange(_PALM_AROUND) / _PALM_AROUND
    verts = [center + np.array([0.0, -axes[1], 0.0])]
    ring_start = []
    for th in theta:
        ring_start.append(len(verts))
        for ph in phi:
            verts.append(center + np.array([axes[0] * np.sin(th) * np.cos(ph),
                                            -axes[1] * np.cos(th),
                                            axes[2] * np.sin(th) * np.sin(ph)]))
    verts.append(center + np.array([0.0, axes[1], 0.0]))
    n = _PALM_AROUND
    faces = [(0, ring_start[0] + (k + 1) % n, ring_start[0] + k) for k in range(n)]
    for ra, rb in zip(ring_start[:-1], ring_start[1:]):
        faces += geometry._ring_faces(ra, rb, n)
    top = len(verts) - 1
    faces += [(ring_start[-1] + k, ring_start[-1] + (k + 1) % n, top) for k in range(n)]
    return np.array(verts), np.array(faces), ring_start


def _orient_outward(verts, faces):
    t = verts[faces]
    vol = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum()
    return faces if vol > 0 else faces[:, ::-1].copy()


def _bone_distance(s, lo, hi):
    return np.maximum(np.maximum(lo - s, 0.0), s - hi)


def build_procedural_template(seed: int = 0) -> HandTemplate:
    """Palm ellipsoid plus five closed finger capsules (778 vertices, 16 joints).

    Each part is a closed surface; overlaps between parts are resolved by the
    winding-number containment used everywhere else, so the merged mesh is
    watertight. ``seed`` perturbs proportions and draws the shape basis.
    """
    rng = np.random.default_rng(seed)
    palm_axes = _PALM_AXES * (1 + 0.03 * rng.standard_normal(3))
    pv, pf, palm_rings = _palm_ellipsoid(_PALM_CENTER, palm_axes)
    pf = _orient_outward(pv - _PALM_CENTER, pf)
    verts, faces = [pv], [pf]
    offset = len(pv)
    joints = np.zeros((N_JOINTS, 3))
    regressor = np.zeros((N_KEYPOINTS, N_VERTS))
    weights_parts = []
    regressor[0, palm_rings[0]:palm_rings[0] + _PALM_AROUND] = 1.0 / _PALM_AROUND
    finger_info = []
    for f_idx, name in enumerate(FINGERS):
        base, direction, lengths, radius = _FINGER_SPECS[name]
        lengths = np.asarray(lengths) * (1 + 0.04 * rng.standard_normal())
        radius = radius * (1 + 0.04 * rng.standard_normal())
        base = np.asarray(base, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        fv, ff, axial, rings = _finger_capsule(base, d, lengths, radius)
        ff = _orient_outward(fv - fv.mean(0), ff)
        j0 = 1 + 3 * f_idx
        bounds = np.cumsum(np.concatenate([[0.0], lengths]))
        joints[j0:j0 + 3] = base + bounds[:3, None] * d
        for k, ring in enumerate((rings[2], rings[4], rings[6])):
            regressor[j0 + k, offset + ring:offset + ring + _FINGER_AROUND] = 1.0 / _FINGER_AROUND
        regressor[16 + TIP_ORDER.index(name), offset + len(fv) - 1] = 1.0
        # axial distance to each bone: wrist (-inf, 0], then the three phalanges
        w = np.zeros((len(fv), N_JOINTS))
        spans = [(-np.inf, 0.0), (0.0, bounds[1]), (bounds[1], bounds[2]), (bounds[2], np.inf)]
        for jj, (lo, hi) in zip([0, j0, j0 + 1, j0 + 2], spans):
            w[:, jj] = np.exp(-(_bone_distance(axial, lo, hi) / _SKIN_SIGMA) ** 2)
        weights_parts.append(w)
        verts.append(fv)
        faces.append(ff + offset)
        offset += len(fv)
        finger_info.append(j0)
    wp = np.zeros((len(pv), N_JOINTS))
    wp[:, 0] = 1.0
    for j0 in finger_info:
        wp[:, j0] = np.exp(-(np.linalg.norm(pv - joints[j0], axis=1) / _PALM_SKIN_SIGMA) ** 2)
    weights = np.concatenate([wp] + weights_parts)
    weights /= weights.sum(1, keepdims=True)
    rest = np.concatenate(verts)
    faces = np.concatenate(faces)
    assert len(rest) == N_VERTS
    # smooth random displacement fields, orthogonalized, each scaled to a 3 mm max displacement
    centered = (rest - rest.mean(0)) / 0.1
    fields = []
    for _ in range(N_SHAPE):
        A = rng.standard_normal((3, 3))
        k = rng.standard_normal((3, 3)) * 3.0
        ph = rng.uniform(0, 2 * np.pi, 3)
        fields.append(centered @ A.T + np.sin(centered @ k.T + ph))
    Q, _ = np.linalg.qr(np.stack([f.reshape(-1) for f in fields], 1))
    basis = Q.T.reshape(N_SHAPE, N_VERTS, 3)
    basis = basis * (0.003 / np.linalg.norm(basis, axis=2).max(axis=1))[:, None, None]
    return HandTemplate(rest, faces, joints, weights, basis, PARENTS.copy(), regressor)


# ---------------------------------------------------------------- external templates


def save_template(template: HandTemplate, path) -> None:
    """Write ``path`` (manifest JSON) and a sibling ``.gftb`` blob."""
    path = Path(path)
    blob = path.with_suffix(".gftb")
    write_blob({
        "rest_vertices": template.rest_vertices,
        "faces": template.faces,
        "joints": template.joints,
        "weights": template.weights,
        "shape_basis": template.shape_basis,
        "regressor": template.regressor,
    }, blob)
    manifest = {
        "format": "graspforge-hand-template",
        "version": 1,
        "n_vertices": template.n_vertices,
        "n_faces": int(len(template.faces)),
        "n_joints": N_JOINTS,
        "n_shape": N_SHAPE,
        "n_keypoints": N_KEYPOINTS,
        "parents": [int(p) for p in template.parents],
        "blob": blob.name,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_external_template(path) -> HandTemplate:
    """Load a template manifest + blob, validating dimensions, weights and the kinematic tree."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    tensors = read_blob(path.parent / manifest["blob"])
    nv = int(manifest["n_vertices"])
    expected = {
        "rest_vertices": (nv, 3),
        "faces": (int(manifest["n_faces"]), 3),
        "joints": (N_JOINTS, 3),
        "weights": (nv, N_JOINTS),
        "shape_basis": (N_SHAPE, nv, 3),
        "regressor": (N_KEYPOINTS, nv),
    }
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"template blob is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ValueError(f"dimension mismatch for {name}: expected {shape}, got {tensors[name].shape}")
    if int(manifest.get("n_joints", N_JOINTS)) != N_JOINTS or len(manifest["parents"]) != N_JOINTS:
        raise ValueError(f"dimension mismatch: template must have {N_JOINTS} joints")
    weights = tensors["weights"].astype(np.float64)
    if np.abs(weights.sum(1) - 1).max() > 1e-6:
        raise ValueError("skinning weight rows are not stochastic (must sum to 1 within 1e-6)")
    regressor = tensors["regressor"].astype(np.float64)
    if np.abs(regressor.sum(1) - 1).max() > 1e-6:
        raise ValueError("keypoint regressor rows must sum to 1 within 1e-6")
    parents = np.array(manifest["parents"], dtype=np.int64)
    check_kinematic_tree(parents)
    faces = tensors["faces"].astype(np.int64)
    # renormalize in float64 so fp32 storage error does not leak into skinning
    return HandTemplate(
        tensors["rest_vertices"].astype(np.float64), faces, tensors["joints"].astype(np.float64),
        weights / weights.sum(1, keepdims=True), tensors["shape_basis"].astype(np.float64),
        parents, regressor / regressor.sum(1, keepdims=True))
