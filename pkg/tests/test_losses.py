import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from graspforge import geometry as G
from graspforge import losses as L
from graspforge.hand_model import N_PARAMS, lbs_forward
from graspforge.nn_core import finite_difference_check


@pytest.fixture(scope="module")
def scene():
    """Hand at rest with a sphere pushed into the palm from below, plus a slightly posed GT hand."""
    from graspforge.hand_model import build_procedural_template

    tpl = build_procedural_template(0)
    obj = G.icosphere(3, 0.04, (0.0, 0.05, -0.047))
    pts = G.sample_surface(obj, 400, 5).points
    r = np.random.default_rng(3)
    gt = np.zeros(N_PARAMS)
    gt[3:51] = r.normal(0, 0.05, 48)
    gt[:3] = [0.0, 0.0, 0.004]
    pred = gt + r.normal(0, 0.05, N_PARAMS)
    return tpl, obj, pts, torch.as_tensor(gt), torch.as_tensor(pred)


def brute_nearest(q, r):
    d = np.sqrt(((q[:, None] - r[None]) ** 2).sum(-1))
    return d.min(1)


def test_param_loss_cases(rng):
    z = np.zeros(N_PARAMS)
    assert float(L.loss_param(z, z)) == 0.0
    assert float(L.loss_param(np.ones(N_PARAMS), z)) == 1.0
    a, b = rng.normal(size=N_PARAMS), rng.normal(size=N_PARAMS)
    assert float(L.loss_param(a, b)) == pytest.approx(((a - b) ** 2).sum() / 61, rel=1e-14)


def test_mesh_loss_matches_chamfer(rng):
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(80, 3))
    assert float(L.loss_mesh(a, b)) == pytest.approx(G.chamfer(a, b), rel=1e-14)
    assert float(L.loss_mesh(a, a)) == 0.0


def test_contact_values():
    assert float(L.contact_from_distance(torch.tensor(0.0, dtype=torch.float64))) == pytest.approx(
        1 / (1 + math.exp(-5)), rel=1e-12)
    assert float(L.contact_from_distance(L.CONTACT_THRESHOLD)) == 0.5
    assert float(L.contact_from_distance(0.1)) < 1e-9


def test_cmap_touching_and_offset(rng):
    obj_pts = rng.uniform(-0.03, 0.03, size=(200, 3))
    obj_pts[:, 2] = 0.0
    assert float(L.loss_cmap(obj_pts, obj_pts, gt_verts=obj_pts)) == pytest.approx(0.0, abs=1e-14)
    lifted = obj_pts + [0, 0, 0.01]
    assert float(L.loss_cmap(lifted, obj_pts, gt_verts=obj_pts)) == pytest.approx(0.01, rel=1e-12)
    far = obj_pts + [0, 0, 0.5]
    assert float(L.loss_cmap(far, obj_pts, gt_verts=obj_pts)) == pytest.approx(L.CMAP_CLIP, rel=1e-12)


def test_cmap_matches_brute_force(scene):
    tpl, obj, pts, gt, pred = scene
    hv = lbs_forward(tpl, pred).numpy()
    gv = lbs_forward(tpl, gt).numpy()
    d_gt = brute_nearest(pts, gv)
    cand = d_gt < L.CONTACT_THRESHOLD
    assert cand.any()
    expected = np.minimum(brute_nearest(pts, hv)[cand], L.CMAP_CLIP).mean()
    assert float(L.loss_cmap(hv, pts, gt_verts=gv)) == pytest.approx(expected, rel=1e-12)


def test_cmap_fallback_uses_nearest_five_percent(rng):
    pts = rng.normal(size=(100, 3))
    hand = rng.normal(size=(30, 3)) + 5
    d = brute_nearest(pts, hand)
    k = math.ceil(0.05 * 100)
    expected = np.minimum(np.sort(d)[:k], L.CMAP_CLIP).mean()
    assert float(L.loss_cmap(hand, pts)) == pytest.approx(expected, rel=1e-12)


def test_penetration_cases(rng):
    sphere = G.icosphere(3)
    outside = rng.normal(size=(20, 3))
    outside = outside / np.linalg.norm(outside, axis=1, keepdims=True) * 1.5
    assert float(L.loss_penetr(outside, sphere)) == 0.0
    assert float(L.loss_penetr(np.zeros((1, 3)), sphere)) == pytest.approx(1.0, rel=0.02)


def test_penetration_matches_signed_distance_scan(scene):
    tpl, obj, _, _, pred = scene
    hv = lbs_forward(tpl, pred).numpy()
    sd = G.signed_distance(obj, hv)
    assert (sd < 0).sum() > 5
    assert float(L.loss_penetr(hv, obj)) == pytest.approx(-sd[sd < 0].sum(), rel=1e-12)


def test_consistency_cases(scene):
    tpl, obj, pts, gt, _ = scene
    gv = lbs_forward(tpl, gt).numpy()
    assert float(L.loss_consist(gv, gv, pts)) == 0.0
    far = gv + [0.0, 0.0, 0.3]
    c_gt = L.contact_from_distance(brute_nearest(pts, gv))
    assert float(L.loss_consist(far, gv, pts)) == pytest.approx((c_gt**2).sum() / len(pts), rel=1e-6)
    assert float(L.loss_consist(far, gv, pts)) == float(L.loss_consist(gv, far, pts))


def _total(scene, weights, pred=None):
    tpl, obj, pts, gt, p = scene
    p = p if pred is None else pred
    return L.total_loss(p, gt, lbs_forward(tpl, p), lbs_forward(tpl, gt), obj, pts, weights)


def test_total_zero_weights(scene):
    total, _ = _total(scene, L.LossWeights(0, 0, 0, 0, 0))
    assert float(total) == 0.0


def test_total_is_weighted_sum_of_terms(scene):
    total, parts = _total(scene, L.AE_WEIGHTS)
    tpl, obj, pts, gt, pred = scene
    hv, gv = lbs_forward(tpl, pred), lbs_forward(tpl, gt)
    terms = [float(L.loss_param(pred, gt)), float(L.loss_mesh(hv, gv)), float(L.loss_cmap(hv, pts, gv)),
             float(L.loss_penetr(hv, obj)), float(L.loss_consist(hv, gv, pts))]
    assert [parts[k] for k in L.TERMS] == pytest.approx(terms, rel=1e-12)
    expected = 0.1 * terms[0] + 1 * terms[1] + 1000 * terms[2] + 10 * terms[3] + 10 * terms[4]
    assert float(total) == pytest.approx(expected, rel=1e-12)


def test_identical_hand_leaves_only_contact_residual():
    from graspforge.hand_model import build_procedural_template

    tpl = build_procedural_template(0)
    obj = G.icosphere(3, 0.03, (0.0, 0.05, -0.045))  # just below the palm, no overlap
    pts = G.sample_surface(obj, 300, 1).points
    gt = torch.zeros(N_PARAMS, dtype=torch.float64)
    v = lbs_forward(tpl, gt)
    assert not G.inside(obj, v.numpy()).any()
    _, parts = L.total_loss(gt, gt, v, v, obj, pts, L.AE_WEIGHTS)
    assert parts["param"] == parts["mesh"] == parts["penetr"] == parts["consist"] == 0.0
    assert parts["cmap"] > 0.0


@given(st.integers(0, 4), st.floats(0.1, 10))
def test_total_linear_in_each_weight(scene, k, scale):
    base = np.array([0.3, 2.0, 50.0, 7.0, 3.0])
    s = scene
    w2 = base.copy()
    w2[k] *= scale
    t1, parts = _total(s, L.LossWeights(*base))
    t2, _ = _total(s, L.LossWeights(*w2))
    assert float(t2) - float(t1) == pytest.approx((scale - 1) * base[k] * parts[L.TERMS[k]], rel=1e-9, abs=1e-12)


def test_losses_nonnegative(scene):
    _, parts = _total(scene, L.AE_WEIGHTS)
    assert all(v >= 0 for v in parts.values())


def test_gradient_wrt_vertices(scene):
    tpl, obj, pts, gt, pred = scene
    gv = lbs_forward(tpl, gt)
    hv = lbs_forward(tpl, pred)
    sd = np.abs(G.signed_distance(obj, hv.numpy()))
    far_from_surface = np.flatnonzero(sd > 1e-5)
    target = L.PairTarget(gt, gv, obj, pts, torch.float64)

    def f(v):
        return L.pair_loss(pred, v, target, L.LossWeights(0, 1, 1000, 10, 10))[0]

    # restrict the check to coordinates of vertices clear of the surface crossing
    rs = np.random.default_rng(0)
    chosen = rs.choice(far_from_surface, 80, replace=False)
    v0 = hv.detach().clone()

    def sub(x):
        v = v0.clone()
        v[chosen] = x
        return f(v)

    assert finite_difference_check(sub, v0[chosen], h=1e-6) < 1e-3


def test_gradient_wrt_params_through_lbs(scene):
    tpl, obj, pts, gt, pred = scene
    target = L.PairTarget(gt, lbs_forward(tpl, gt), obj, pts, torch.float64)

    def f(p):
        return L.pair_loss(p, lbs_forward(tpl, p), target, L.AE_WEIGHTS)[0]

    assert finite_difference_check(f, pred, h=1e-6) < 1e-3


def test_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(-1, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        L.LossWeights.from_sequence([1, 2, 3])
    assert L.ADAPT_WEIGHTS.as_tuple() == (100.0, 0.1, 1000.0, 20.0, 0.1)
    assert L.AE_WEIGHTS.as_tuple() == (0.1, 1.0, 1000.0, 10.0, 10.0)
