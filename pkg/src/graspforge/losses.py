"""Training objectives: parameter and mesh reconstruction plus contact, penetration
and contact-consistency terms, and their weighted total.

Geometric selections (nearest vertex, closest surface point, inside test) are made
without gradients on detached copies; the selected distances are then recomputed in
torch. Away from ties and surface crossings this gives exact gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import geometry
from .hand_model import N_PARAMS

CONTACT_THRESHOLD = 0.005  # m; also the in-contact threshold for metrics
CONTACT_SHARPNESS = 0.001  # m
CMAP_CLIP = 0.02  # m
NEAREST_FRACTION = 0.05  # fallback candidate share when no GT contact is known


@dataclass(frozen=True)
class LossWeights:
    param: float = 0.1
    mesh: float = 1.0
    cmap: float = 1000.0
    penetr: float = 10.0
    consist: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        values = [float(v) for v in values]
        if len(values) != 5:
            raise ValueError("expected five loss weights")
        return cls(*values)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.param, self.mesh, self.cmap, self.penetr, self.consist)

    @property
    def physical(self) -> bool:
        return self.cmap > 0 or self.penetr > 0 or self.consist > 0


AE_WEIGHTS = LossWeights(0.1, 1.0, 1000.0, 10.0, 10.0)
ADAPT_WEIGHTS = LossWeights(100.0, 0.1, 1000.0, 20.0, 0.1)
TERMS = ("param", "mesh", "cmap", "penetr", "consist")


def _tensor(x, like=None) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    if isinstance(x, geometry.PointCloud):
        x = x.points
    dtype = like.dtype if like is not None else torch.float64
    return torch.tensor(np.array(x), dtype=dtype)


def _params(x):
    v = getattr(x, "vector", x)
    return v if torch.is_tensor(v) else torch.as_tensor(np.asarray(v, dtype=np.float64))


def loss_param(pred, gt) -> torch.Tensor:
    """Mean squared error over the 61 parameter entries (batched over leading dims)."""
    p, g = _params(pred), _params(gt)
    g = g.to(p.dtype)
    if p.shape[-1] != N_PARAMS or g.shape[-1] != N_PARAMS:
        raise ValueError(f"hand parameter vectors must have {N_PARAMS} entries")
    return ((p - g) ** 2).mean()


def _nearest_dist(query: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Euclidean distance from each query row to its nearest ref row (differentiable in both)."""
    idx, _ = geometry.nearest_neighbors(query.detach().double().numpy(), ref.detach().double().numpy())
    diff = query - ref[torch.as_tensor(idx)]
    # the epsilon only matters for exact coincidences, where the distance gradient is undefined
    return torch.sqrt((diff * diff).sum(-1) + 1e-30)


def _nearest_sqdist(query: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    idx, _ = geometry.nearest_neighbors(query.detach().double().numpy(), ref.detach().double().numpy())
    diff = query - ref[torch.as_tensor(idx)]
    return (diff * diff).sum(-1)


def loss_mesh(pred_verts, gt_verts) -> torch.Tensor:
    """Chamfer distance between vertex sets (m^2)."""
    a = _tensor(pred_verts)
    b = _tensor(gt_verts, a)
    return _nearest_sqdist(a, b).mean() + _nearest_sqdist(b, a).mean()


def contact_from_distance(d):
    if torch.is_tensor(d):
        return 1.0 - torch.sigmoid((d - CONTACT_THRESHOLD) / CONTACT_SHARPNESS)
    d = np.asarray(d, dtype=np.float64)
    return 1.0 - 1.0 / (1.0 + np.exp(-(d - CONTACT_THRESHOLD) / CONTACT_SHARPNESS))


def contact_map(hand_verts, obj_points) -> torch.Tensor:
    """Soft contact value in [0, 1] per object point from its distance to the nearest hand vertex."""
    h = _tensor(hand_verts)
    o = _tensor(obj_points, h)
    return contact_from_distance(_nearest_dist(o, h))


def _candidates_from(d2_hand: np.ndarray, d2_gt: np.ndarray | None) -> np.ndarray:
    if d2_gt is not None:
        cand = np.flatnonzero(d2_gt < CONTACT_THRESHOLD ** 2)
        if len(cand):
            return cand
    k = max(1, math.ceil(NEAREST_FRACTION * len(d2_hand)))
    return np.sort(np.argsort(d2_hand, kind="stable")[:k])


def contact_candidates(obj_points, gt_verts=None, hand_verts=None) -> np.ndarray:
    """Indices of the object points that the contact loss pulls toward.

    With a GT hand: points within the contact threshold of it. Otherwise, or if the
    GT hand touches nothing, the closest 5% of points to ``hand_verts``.
    """
    o = _tensor(obj_points).detach().double().numpy()
    d2_gt = None
    if gt_verts is not None:
        d2_gt = geometry.nearest_neighbors(o, _tensor(gt_verts).detach().double().numpy())[1]
        if (d2_gt < CONTACT_THRESHOLD ** 2).any():
            return _candidates_from(d2_gt, d2_gt)
    if hand_verts is None:
        raise ValueError("need a GT hand with contacts or a hand to rank object points against")
    d2 = geometry.nearest_neighbors(o, _tensor(hand_verts).detach().double().numpy())[1]
    return _candidates_from(d2, None)


def loss_cmap(hand_verts, obj_points, gt_verts=None) -> torch.Tensor:
    """Mean distance (clipped at 2 cm) from candidate object points to the nearest hand vertex."""
    h = _tensor(hand_verts)
    o = _tensor(obj_points, h)
    on = o.detach().double().numpy()
    idx, d2 = geometry.nearest_neighbors(on, h.detach().double().numpy())
    d2_gt = None
    if gt_verts is not None:
        d2_gt = geometry.nearest_neighbors(on, _tensor(gt_verts).detach().double().numpy())[1]
    cand = torch.as_tensor(_candidates_from(d2, d2_gt))
    diff = o[cand] - h[torch.as_tensor(idx)[cand]]
    d = torch.sqrt((diff * diff).sum(-1) + 1e-30)
    return torch.clamp(d, max=CMAP_CLIP).mean()


def penetrating_vertices(hand_verts, obj: geometry.TriMesh) -> np.ndarray:
    v = _tensor(hand_verts).detach().double().numpy()
    return np.flatnonzero(geometry.inside(obj, v))


def loss_penetr(hand_verts, obj: geometry.TriMesh) -> torch.Tensor:
    """Sum of depths (m) of hand vertices strictly inside the object."""
    h = _tensor(hand_verts)
    idx = penetrating_vertices(h, obj)
    if len(idx) == 0:
        return h.sum() * 0.0
    inner = h[torch.as_tensor(idx)]
    cp, _, _ = geometry.closest_points(obj, inner.detach().double().numpy())
    diff = inner - torch.as_tensor(cp, dtype=h.dtype)
    return torch.sqrt((diff * diff).sum(-1) + 1e-30).sum()


def loss_consist(pred_verts, gt_verts, obj_points) -> torch.Tensor:
    """Mean squared difference of the predicted and GT contact maps."""
    p = _tensor(pred_verts)
    g = _tensor(gt_verts, p)
    return ((contact_map(p, obj_points) - contact_map(g, obj_points)) ** 2).mean()


class PairTarget:
    """GT-side quantities for one hand-object pair, computed once and reused every step."""

    def __init__(self, gt_params, gt_verts, obj_mesh: geometry.TriMesh, obj_points, dtype=torch.float32):
        self.dtype = dtype
        self.gt_params = _tensor(_params(gt_params)).to(dtype)
        self.gt_verts = _tensor(gt_verts).detach().to(dtype)
        self.obj_mesh = obj_mesh
        self.obj_points = _tensor(obj_points).detach().to(dtype)
        gv = self.gt_verts.double().numpy()
        self._obj_np = self.obj_points.double().numpy()
        self.gt_tree = cKDTree(gv)
        idx_gt = np.asarray(self.gt_tree.query(self._obj_np, k=1)[1], dtype=np.int64)
        d = self._obj_np - gv[idx_gt]
        self.d2_gt = (d * d).sum(-1)
        self.gt_cmap = contact_from_distance(torch.as_tensor(np.sqrt(self.d2_gt + 1e-30), dtype=dtype))

    def to(self, dtype) -> "PairTarget":
        if dtype == self.dtype:
            return self
        return PairTarget(self.gt_params, self.gt_verts, self.obj_mesh, self.obj_points, dtype)


def pair_loss(pred_params, pred_verts: torch.Tensor, target: PairTarget,
              weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the five terms for one pair plus the unweighted per-term values.

    Terms with zero weight are skipped and reported as 0.
    """
    w = dict(zip(TERMS, weights.as_tuple()))
    h = pred_verts
    t = target.to(h.dtype)
    terms: dict[str, torch.Tensor] = {}
    if w["param"]:
        terms["param"] = loss_param(pred_params, t.gt_params)
    hn = h.detach().double().numpy()
    if w["mesh"] or w["cmap"] or w["consist"]:
        tree = cKDTree(hn)
        idx_obj = np.asarray(tree.query(t._obj_np, k=1)[1], dtype=np.int64)
        diff_obj = t.obj_points - h[torch.as_tensor(idx_obj)]
        dist_obj = torch.sqrt((diff_obj * diff_obj).sum(-1) + 1e-30)
    if w["mesh"]:
        gv = t.gt_verts
        i_pg = torch.as_tensor(np.asarray(t.gt_tree.query(hn, k=1)[1], dtype=np.int64))
        i_gp = torch.as_tensor(np.asarray(tree.query(gv.double().numpy(), k=1)[1], dtype=np.int64))
        terms["mesh"] = ((h - gv[i_pg]) ** 2).sum(-1).mean() + ((gv - h[i_gp]) ** 2).sum(-1).mean()
    if w["cmap"]:
        d2_hand = dist_obj.detach().double().numpy() ** 2
        cand = torch.as_tensor(_candidates_from(d2_hand, t.d2_gt))
        terms["cmap"] = torch.clamp(dist_obj[cand], max=CMAP_CLIP).mean()
    if w["penetr"]:
        terms["penetr"] = loss_penetr(h, t.obj_mesh)
    if w["consist"]:
        terms["consist"] = ((contact_from_distance(dist_obj) - t.gt_cmap) ** 2).mean()
    total = h.sum() * 0.0
    for k, v in terms.items():
        total = total + w[k] * v
    breakdown = {k: float(terms[k].detach()) if k in terms else 0.0 for k in TERMS}
    return total, breakdown


def total_loss(pred_params, gt_params, pred_verts, gt_verts, obj_mesh, obj_points,
               weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted total for one pair; see ``pair_loss``."""
    h = _tensor(pred_verts)
    target = PairTarget(gt_params, gt_verts, obj_mesh, obj_points, h.dtype)
    return pair_loss(pred_params, h, target, weights)
