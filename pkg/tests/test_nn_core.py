import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from graspforge import nn_core as N


def _identity_mlp(width, act):
    m = N.Mlp(N.MlpSpec((width, width), (act,)))
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.eye(width))
        m.layers[0].bias.zero_()
    return m


def test_identity_layer_passes_input_through(rng):
    x = torch.as_tensor(rng.normal(size=(5, 4)), dtype=torch.float32)
    assert torch.equal(_identity_mlp(4, "identity")(x), x)


def test_relu_of_negated_positive_input_is_zero(rng):
    m = _identity_mlp(4, "relu")
    with torch.no_grad():
        m.layers[0].weight.mul_(-1)
    x = torch.as_tensor(np.abs(rng.normal(size=(5, 4))), dtype=torch.float32)
    assert torch.equal(m(x), torch.zeros_like(x))


@given(st.lists(st.integers(1, 8), min_size=2, max_size=4), st.integers(0, 1000))
def test_mlp_gradients_match_finite_differences(widths, seed):
    m = N.Mlp(N.MlpSpec.relu_stack(widths, seed=seed)).double()
    x = torch.as_tensor(np.random.default_rng(seed).normal(size=(3, widths[0])))
    assert N.finite_difference_check(lambda v: m(v).sum(), x) < 1e-4
    w0 = m.layers[0].weight.detach().clone()
    err = N.finite_difference_check(lambda wv: torch.func.functional_call(
        m, {"layers.0.weight": wv}, (x,)).pow(2).sum(), w0)
    assert err < 1e-4


def test_mlp_seeded_init_is_reproducible():
    a = N.Mlp(N.MlpSpec.relu_stack((3, 16, 2), seed=4))
    b = N.Mlp(N.MlpSpec.relu_stack((3, 16, 2), seed=4))
    c = N.Mlp(N.MlpSpec.relu_stack((3, 16, 2), seed=5))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.layers[0].weight, c.layers[0].weight)


def test_zero_final_scale_gives_zero_output(rng):
    m = N.Mlp(N.MlpSpec.relu_stack((3, 8, 5), final_scale=0.0))
    assert torch.equal(m(torch.randn(4, 3)), torch.zeros(4, 5))


def test_mlp_width_mismatch():
    with pytest.raises(ValueError, match="input width"):
        N.Mlp(N.MlpSpec.relu_stack((3, 4)))(torch.zeros(2, 5))


def test_pointnet_permutation_invariant(rng):
    net = N.PointNet((3, 16, 32), seed=1)
    pts = torch.as_tensor(rng.normal(size=(50, 3)), dtype=torch.float32)
    perm = torch.as_tensor(rng.permutation(50))
    assert torch.equal(net(pts), net(pts[perm]))


def test_pointnet_repeated_point_idempotent(rng):
    net = N.PointNet((3, 16, 32), seed=1)
    p = torch.as_tensor(rng.normal(size=(1, 3)), dtype=torch.float32)
    rep = p.repeat(17, 1)
    assert torch.equal(net(rep), net.point_mlp(rep)[0])
    # a 1-row matmul may take a different BLAS kernel than a 17-row one: float32 rounding only
    assert torch.allclose(net(p), net(rep), rtol=1e-6, atol=1e-7)
    net64 = net.double()
    assert torch.allclose(net64(p.double()), net64(rep.double()), rtol=1e-14, atol=0)


def test_pointnet_gradient_wrt_points(rng):
    net = N.PointNet((3, 8, 16), seed=2).double()
    pts = torch.as_tensor(rng.normal(size=(12, 3)))
    assert N.finite_difference_check(lambda p: N.pointnet_encode(net, p).sum(), pts) < 1e-4


def test_adam_zero_gradient_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = N.make_adam([p], 0.1)
    N.adam_step(opt, [torch.zeros(2, dtype=torch.float64)])
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))
    assert N.adam_state(opt)[0]["step"] == 1


def test_adam_first_step_hand_computed():
    g = torch.tensor([0.5, -3.0, 1e-3], dtype=torch.float64)
    p0 = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    p = torch.nn.Parameter(p0.clone())
    lr = 0.01
    opt = N.make_adam([p], lr)
    N.adam_step(opt, [g])
    # bias-corrected moments after one step equal g and g^2
    expected = p0 - lr * g / (g.abs() + N.ADAM_EPS)
    assert torch.allclose(p.detach(), expected, rtol=0, atol=1e-15)


def test_adam_runs_are_bit_identical():
    def run():
        m = N.Mlp(N.MlpSpec.relu_stack((3, 8, 1), seed=3))
        opt = N.make_adam(m.parameters(), 1e-2)
        x = torch.randn(16, 3, generator=torch.Generator().manual_seed(0))
        for _ in range(20):
            opt.zero_grad()
            m(x).pow(2).mean().backward()
            N.adam_step(opt)
        return [p.detach().clone() for p in m.parameters()]

    assert all(torch.equal(a, b) for a, b in zip(run(), run()))


def test_time_embedding_zero():
    e = N.time_embedding(0, 8)
    assert torch.equal(e, torch.tensor([0.0, 1.0] * 4, dtype=torch.float64))


def test_time_embedding_odd_dim():
    with pytest.raises(ValueError):
        N.time_embedding(3, 7)


def test_time_embedding_distinct_over_schedule():
    e = N.time_embedding(torch.arange(1000), 64).numpy()
    d = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0


def test_module_tensor_round_trip_and_mismatch():
    a = N.Mlp(N.MlpSpec.relu_stack((3, 4, 2), seed=0))
    b = N.Mlp(N.MlpSpec.relu_stack((3, 4, 2), seed=9))
    N.load_module_tensors(b, N.module_tensors(a, "m."), "m.")
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = N.Mlp(N.MlpSpec.relu_stack((3, 5, 2)))
    with pytest.raises(ValueError, match="m.layers.0.weight"):
        N.load_module_tensors(c, N.module_tensors(a, "m."), "m.")


def test_cosine_schedule_endpoints():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = N.make_adam([p], 1.0)
    sched = N.lr_scheduler(opt, "cosine", 11)
    lrs = []
    for _ in range(11):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert lrs[0] == 1.0 and lrs[-1] == pytest.approx(N.COSINE_FLOOR)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
