import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from graspforge import diffusion as D
from graspforge.nn_core import finite_difference_check


class ZeroDenoiser(torch.nn.Module):
    latent_dim = 6

    def forward(self, z, cond, t):
        return torch.zeros_like(z)


@pytest.fixture(scope="module")
def schedule():
    return D.DiffusionSchedule()


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return D.LatentDiffusion(D.DiffusionConfig.toy(), 16)


def test_schedule_invariants(schedule):
    assert schedule.alpha_bar[0] == 1.0
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[-1] < 0.01
    assert schedule.betas[1] == 1e-4 and schedule.betas[-1] == pytest.approx(0.02)


def test_ddim_timesteps(schedule):
    taus = schedule.ddim_timesteps(50)
    assert len(taus) == 50 and taus[0] == 20 and taus[-1] == 1000
    assert schedule.ddim_timesteps(1000) == list(range(1, 1001))
    with pytest.raises(ValueError):
        schedule.ddim_timesteps(0)


def test_q_sample_degenerate_cases(schedule, rng):
    z0 = torch.as_tensor(rng.normal(size=(4, 8)))
    eps = torch.as_tensor(rng.normal(size=(4, 8)))
    assert torch.equal(D.q_sample(z0, 0, eps, schedule), z0)
    t = torch.tensor([1, 10, 500, 1000])
    out = D.q_sample(z0, t, torch.zeros_like(z0), schedule)
    ab = torch.as_tensor(schedule.alpha_bar[[1, 10, 500, 1000]])[:, None]
    assert torch.equal(out, torch.sqrt(ab) * z0)


def test_denoiser_deterministic_and_conditioned(model, rng):
    z = torch.as_tensor(rng.normal(size=(3, 16)), dtype=torch.float32)
    pts = torch.as_tensor(rng.normal(0, 0.03, size=(64, 3)), dtype=torch.float32)
    cond = model.embed(pts)
    t = torch.tensor([5, 300, 999])
    a = D.denoise_predict(model.denoiser, z, cond, t)
    b = D.denoise_predict(model.denoiser, z, cond, t)
    assert torch.equal(a, b)
    other = model.embed(pts + 0.02)
    assert (D.denoise_predict(model.denoiser, z, other, t) - a).norm() > 0


def test_denoiser_gradient(rng):
    den = D.Denoiser(6, 5, 8, (12, 7), seed=3).double()
    for layer in [den.out]:
        torch.nn.init.normal_(layer.weight, std=0.3, generator=torch.Generator().manual_seed(1))
    cond = torch.as_tensor(rng.normal(size=5))
    z = torch.as_tensor(rng.normal(size=(2, 6)))
    assert finite_difference_check(lambda v: den(v, cond, torch.tensor([3, 700])).pow(2).sum(), z) < 1e-3
    assert finite_difference_check(lambda c: den(z, c, torch.tensor([3, 700])).sum(), cond) < 1e-3


def test_initial_loss_near_one_per_dimension(model, rng):
    z0 = torch.as_tensor(rng.normal(size=(8, 16)), dtype=torch.float32)
    pts = torch.as_tensor(rng.normal(0, 0.03, size=(8, 128, 3)), dtype=torch.float32)
    loss = D.evaluate_loss(model, z0, pts, draws=4096)
    assert 0.8 <= loss <= 1.2


def test_ddpm_noiseless_zero_denoiser_closed_form(schedule, rng):
    z_T = torch.as_tensor(rng.normal(size=6))
    out = D.ddpm_sample(ZeroDenoiser(), torch.zeros(1), schedule, 0, z_T=z_T, noise_scale=0.0)
    expected = z_T / math.sqrt(schedule.alpha_bar[-1])
    assert torch.allclose(out, expected, rtol=1e-12, atol=0)


@pytest.mark.parametrize("steps", [1000, 50, 7])
def test_ddim_zero_denoiser_closed_form(schedule, rng, steps):
    z_T = torch.as_tensor(rng.normal(size=6))
    out = D.ddim_sample(ZeroDenoiser(), torch.zeros(1), schedule, steps, 0, z_T=z_T)
    assert torch.allclose(out, z_T / math.sqrt(schedule.alpha_bar[-1]), rtol=1e-12, atol=0)


def test_samplers_reproducible(model, schedule, rng):
    cond = model.embed(torch.as_tensor(rng.normal(0, 0.03, size=(32, 3)), dtype=torch.float32))
    with torch.no_grad():
        a = D.ddim_sample(model.denoiser, cond, schedule, 20, seed=4)
        b = D.ddim_sample(model.denoiser, cond, schedule, 20, seed=4)
        c = D.ddim_sample(model.denoiser, cond, schedule, 20, seed=5)
        sched_short = D.DiffusionSchedule(T=50)
        d1 = D.ddpm_sample(model.denoiser, cond, sched_short, seed=2)
        d2 = D.ddpm_sample(model.denoiser, cond, sched_short, seed=2)
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert torch.equal(d1, d2)


def test_ddim_batched_matches_single(model, schedule, rng):
    cond = model.embed(torch.as_tensor(rng.normal(0, 0.03, size=(2, 32, 3)), dtype=torch.float32))
    z_T = torch.stack([D.initial_noise(16, 1), D.initial_noise(16, 2)])
    with torch.no_grad():
        batch = D.ddim_sample(model.denoiser, cond, schedule, 10, 0, z_T=z_T)
        single = D.ddim_sample(model.denoiser, cond[1], schedule, 10, 0, z_T=z_T[1])
    assert torch.allclose(batch[1], single, rtol=1e-5, atol=1e-6)


@given(st.integers(1, 20))
def test_standardize_round_trip(n):
    z = torch.randn(n, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(n))
    mean, std = z.mean(0), z.std(0, correction=0) + 0.5
    assert torch.allclose(D.destandardize(D.standardize(z, mean, std), mean, std), z, rtol=1e-14, atol=1e-14)


def test_config_round_trip():
    cfg = D.DiffusionConfig.toy(seed=3)
    assert D.DiffusionConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        D.DiffusionConfig.from_dict({"nope": 1})
