import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from graspforge import geometry as G
from graspforge.hand_model import (N_PARAMS, POSE, SHAPE, TRANSLATION, HandParams, build_procedural_template,
                                   hand_mesh, keypoints, lbs_forward, load_external_template, save_template)
from graspforge.nn_core import max_relative_error


def test_zero_params_reproduce_rest_mesh(template):
    v = lbs_forward(template, torch.zeros(N_PARAMS, dtype=torch.float64))
    assert np.array_equal(v.numpy(), template.rest_vertices)


def test_translation_only(template):
    t = np.array([0.1, -0.2, 0.05])
    v = lbs_forward(template, HandParams.from_parts(translation=t))
    assert np.allclose(v.numpy(), template.rest_vertices + t, atol=1e-15, rtol=0)


def test_lbs_jacobian_matches_central_differences(template, rng):
    p0 = torch.as_tensor(rng.normal(0, 0.3, N_PARAMS))
    p0[TRANSLATION] = torch.as_tensor(rng.normal(0, 0.05, 3))
    jac = torch.autograd.functional.jacobian(lambda p: lbs_forward(template, p).reshape(-1), p0)
    h = 1e-5
    num = torch.empty_like(jac)
    for k in range(N_PARAMS):
        e = torch.zeros(N_PARAMS, dtype=torch.float64)
        e[k] = h
        num[:, k] = (lbs_forward(template, p0 + e) - lbs_forward(template, p0 - e)).reshape(-1) / (2 * h)
    assert jac.shape == (3 * template.n_vertices, N_PARAMS)
    assert max_relative_error(jac.numpy(), num.numpy()) < 1e-4


def test_lbs_gradient_finite_near_zero_angle(template):
    p = torch.zeros(N_PARAMS, dtype=torch.float64, requires_grad=True)
    lbs_forward(template, p).sum().backward()
    assert torch.isfinite(p.grad).all()


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_rigid_motion_equivariance(aa, t):
    tpl = build_procedural_template(0)
    params = HandParams.from_parts(translation=t, pose=np.concatenate([aa, np.zeros(45)]))
    R = G.rotation_matrix(np.asarray(aa))
    j0 = tpl.joints[0]
    expected = (tpl.rest_vertices - j0) @ R.T + j0 + np.asarray(t)
    assert np.abs(lbs_forward(tpl, params).numpy() - expected).max() < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_shape_linearity(seed):
    tpl = build_procedural_template(0)
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(0, 1, 10), r.normal(0, 1, 10)

    def out(c):
        return lbs_forward(tpl, HandParams.from_parts(shape=c)).numpy()

    field = out(c1 + c2) - out(c1) - out(c2) + out(np.zeros(10))
    assert np.abs(field).max() < 1e-9


def test_shape_is_clamped():
    p = HandParams.from_parts(shape=np.full(10, 9.0))
    assert np.all(p.shape == 5.0)


def test_params_validation():
    with pytest.raises(ValueError):
        HandParams(np.zeros(60))
    with pytest.raises(ValueError):
        HandParams(np.full(61, np.nan))


def test_keypoints_rest_and_translation(template, rng):
    kp = keypoints(template, template.rest_vertices)
    assert np.array_equal(kp, template.regressor @ template.rest_vertices)
    t = np.array([0.3, 0.1, -0.2])
    assert np.allclose(keypoints(template, template.rest_vertices + t), kp + t, atol=1e-12)


def test_keypoints_match_weighted_sum(template, rng):
    v = rng.normal(size=(template.n_vertices, 3))
    brute = np.array([[sum(template.regressor[k, i] * v[i, c] for i in range(template.n_vertices))
                       for c in range(3)] for k in range(21)])
    assert np.allclose(keypoints(template, v), brute, rtol=1e-12, atol=1e-12)
    assert np.allclose(keypoints(template, torch.as_tensor(v)).numpy(), brute, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_procedural_template_invariants(seed):
    tpl = build_procedural_template(seed)
    assert tpl.n_vertices == 778
    assert np.abs(tpl.weights.sum(1) - 1).max() < 1e-6
    assert tpl.mesh.is_watertight


def test_procedural_template_seeds_share_topology():
    a, b = build_procedural_template(0), build_procedural_template(1)
    assert np.array_equal(a.faces, b.faces)
    assert np.array_equal(a.parents, b.parents)
    assert not np.array_equal(a.rest_vertices, b.rest_vertices)


def test_posed_hand_stays_closed(template, rng):
    p = np.zeros(N_PARAMS)
    p[POSE] = rng.normal(0, 0.4, 48)
    p[SHAPE] = rng.normal(0, 1, 10)
    assert hand_mesh(template, p).is_watertight


def test_template_file_round_trip(template, tmp_path):
    save_template(template, tmp_path / "hand.json")
    back = load_external_template(tmp_path / "hand.json")
    assert np.array_equal(back.faces, template.faces)
    assert np.allclose(back.rest_vertices, template.rest_vertices, atol=1e-7)


def _corrupt(tmp_path, template, edit):
    save_template(template, tmp_path / "hand.json")
    m = json.loads((tmp_path / "hand.json").read_text())
    edit(m)
    (tmp_path / "hand.json").write_text(json.dumps(m))
    return tmp_path / "hand.json"


def test_template_dimension_mismatch(template, tmp_path):
    path = _corrupt(tmp_path, template, lambda m: m.update(n_vertices=777))
    with pytest.raises(ValueError, match="dimension mismatch"):
        load_external_template(path)


def test_template_cyclic_parents(template, tmp_path):
    def cyc(m):
        m["parents"][2] = 3
        m["parents"][3] = 2

    with pytest.raises(ValueError, match="tree"):
        load_external_template(_corrupt(tmp_path, template, cyc))


def test_template_non_stochastic_weights(template, tmp_path):
    from graspforge.persistence import read_blob, write_blob

    save_template(template, tmp_path / "hand.json")
    blob = read_blob(tmp_path / "hand.gftb")
    blob["weights"] = blob["weights"] * 1.5
    write_blob(blob, tmp_path / "hand.gftb")
    with pytest.raises(ValueError, match="stochastic"):
        load_external_template(tmp_path / "hand.json")
