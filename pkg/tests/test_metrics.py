import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graspforge import geometry as G
from graspforge import metrics as M


def test_penetration_volume_disjoint_and_symmetric():
    a = G.icosphere(3, 0.02)
    far = G.icosphere(3, 0.02, (0.1, 0, 0))
    assert M.penetration_volume(a, far) == 0.0
    b = G.box((0.03, 0.03, 0.03), center=(0.02, 0.005, 0))
    assert M.penetration_volume(a, b) == M.penetration_volume(b, a)
    assert M.penetration_volume(a, b) == G.intersection_volume(a, b, M.VOXEL_RESOLUTION)


def test_contact_ratio_extremes():
    obj = G.icosphere(3, 0.03)
    touching = [G.icosphere(2, 0.01, (0.042, 0, 0)), G.icosphere(2, 0.01, (0, 0.04, 0))]
    apart = [G.icosphere(2, 0.01, (0.1, 0, 0)), G.icosphere(2, 0.01, (0, -0.2, 0))]
    assert M.contact_ratio(touching, obj) == 100.0
    assert M.contact_ratio(apart, obj) == 0.0
    with pytest.raises(ValueError):
        M.contact_ratio([], obj)


def test_min_surface_distance_far_path_is_exact():
    obj = G.box((0.02, 0.02, 0.02))
    pts = np.array([[0.05, 0.0, 0.0], [0.0, 0.0, 0.3]])
    assert M.min_surface_distance(pts, obj) == pytest.approx(0.04, rel=1e-12)


def test_object_resting_on_plane_proxy():
    obj = G.box((0.04, 0.04, 0.04))
    xs = np.linspace(-0.018, 0.018, 10)
    gx, gy = np.meshgrid(xs, xs)
    plane = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, -0.0195)], 1)
    assert M.simulation_displacement(plane, obj) < 0.5


def test_simulation_requires_watertight_object():
    tri = G.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        M.simulation_displacement(None, tri)


def test_identical_grasps_have_zero_entropy(rng):
    kp = [np.ones((21, 3))] * 30
    ent, size = M.diversity(kp, 20, seed=0)
    assert ent == 0.0 and size == 0.0


@given(st.integers(0, 10_000))
def test_entropy_and_cluster_size_bounds(seed):
    r = np.random.default_rng(seed)
    kp = r.normal(0, 0.05, size=(int(r.integers(20, 60)), 21, 3))
    ent, size = M.diversity(kp, 20, seed)
    assert 0.0 <= ent <= math.log(20)
    assert size >= 0.0


def test_kmeans_is_deterministic(rng):
    x = rng.normal(size=(80, 6))
    a = M.kmeans(x, 5, seed=3)
    b = M.kmeans(x, 5, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_diversity_needs_k_samples():
    with pytest.raises(ValueError):
        M.diversity(np.zeros((5, 21, 3)), 20)


def _records():
    return [M.GraspRecord("a", 0, 11, 1.5, 2.0, True), M.GraspRecord("a", 1, 12, 0.5, 400.0, False)]


def test_summary_and_report_files(tmp_path):
    rep = M.summarize(_records(), [], mean_latency=0.2, config={"seed": 1})
    assert rep.mean_penetration_volume == 1.0 and rep.mean_displacement == 201.0
    assert rep.contact_ratio == 50.0 and rep.entropy is None
    rep.write_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert "mean_latency" not in data and data["config"] == {"seed": 1}
    assert data["schema_version"] == M.REPORT_SCHEMA_VERSION
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][0] == "object" and len(rows) == 3


def test_summarize_empty():
    with pytest.raises(ValueError):
        M.summarize([], [])


def test_report_rejects_bad_ratio():
    with pytest.raises(ValueError):
        M.GraspReport(_records(), 1.0, 1.0, 120.0, None, None)


def test_evaluate_set_empty_objects():
    with pytest.raises(ValueError, match="no objects found"):
        M.evaluate_set(None, [], 1)
