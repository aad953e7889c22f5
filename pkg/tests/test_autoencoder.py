import numpy as np
import pytest
import torch

from graspforge import autoencoder as A
from graspforge import persistence
from graspforge.dataset import load_dataset, prepare_scenes
from graspforge.hand_model import N_PARAMS, SHAPE_LIMIT
from graspforge.nn_core import finite_difference_check


def small_config(**kw):
    base = dict(latent_dim=8, encoder_widths=(3, 8, 16), decoder_hidden=(16,), steps=4, physical_warmup=0,
                object_points=128)
    return A.AeConfig.toy(**{**base, **kw})


@pytest.fixture(scope="module")
def scenes(tiny_dataset):
    data = load_dataset(tiny_dataset)
    return data.template, prepare_scenes(data, 128, 0)


def test_encoder_permutation_invariant(template):
    torch.manual_seed(0)
    model = A.HandAutoencoder(small_config())
    v = torch.as_tensor(template.rest_vertices, dtype=torch.float32)
    perm = torch.randperm(len(v), generator=torch.Generator().manual_seed(2))
    assert torch.allclose(model.encode(v), model.encode(v[perm]), rtol=1e-6, atol=1e-7)


def test_fresh_decoder_outputs_zero_params():
    model = A.HandAutoencoder(small_config())
    out = model.decode(torch.randn(5, 8, generator=torch.Generator().manual_seed(0)))
    assert out.shape == (5, N_PARAMS) and torch.count_nonzero(out) == 0


def test_shape_output_bounded():
    model = A.HandAutoencoder(small_config())
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.normal_(0, 5.0, generator=torch.Generator().manual_seed(1))
        out = model.decode(100 * torch.randn(20, 8, generator=torch.Generator().manual_seed(3)))
    assert out[:, 51:].abs().max() <= SHAPE_LIMIT
    assert out[:, 51:].abs().max() > 0.5 * SHAPE_LIMIT


def test_encoder_decoder_gradient(template):
    model = A.HandAutoencoder(small_config(encoder_widths=(3, 6, 8))).double()
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.normal_(0, 0.3, generator=torch.Generator().manual_seed(5))
    v = torch.as_tensor(template.rest_vertices[::40].copy())
    assert finite_difference_check(lambda x: model(x).pow(2).sum(), v, h=1e-6) < 1e-3
    z = torch.randn(3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
    assert finite_difference_check(lambda x: model.decode(x).pow(2).sum(), z, h=1e-6) < 1e-3


def test_param_input_mode():
    model = A.HandAutoencoder(small_config(input_mode="params"))
    assert model.point_net is None
    assert model.encode(torch.zeros(2, N_PARAMS)).shape == (2, 8)
    with torch.no_grad():
        with pytest.raises(ValueError, match="61"):
            model.encode(torch.zeros(2, 10))


def test_training_is_deterministic_and_reduces_loss(scenes):
    tpl, sc = scenes
    cfg = small_config(steps=12, weights=(0.1, 1.0, 0.0, 0.0, 0.0))
    a = A.train_ae(tpl, sc, cfg)
    b = A.train_ae(tpl, sc, cfg)
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    assert a.history[-1]["total"] < a.history[0]["total"]
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k]), k


def test_warmup_ramps_physical_terms():
    w = A.AeConfig.toy().loss_weights
    assert A.ramped_weights(w, 0, 10).as_tuple() == (0.1, 1.0, 0.0, 0.0, 0.0)
    assert A.ramped_weights(w, 5, 10).as_tuple() == (0.1, 1.0, 500.0, 5.0, 5.0)
    assert A.ramped_weights(w, 10, 10) == w and A.ramped_weights(w, 0, 0) == w


def test_checkpoint_round_trip(scenes, tmp_path):
    tpl, sc = scenes
    res = A.train_ae(tpl, sc, small_config(steps=2))
    A.save_ae(res, tpl, tmp_path / "ae")
    loaded = A.load_ae(tmp_path / "ae")
    x = torch.as_tensor(tpl.rest_vertices, dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(loaded.model(x), res.model(x))
    assert torch.equal(loaded.z_mean, res.extra["z_mean"])
    assert np.array_equal(loaded.template.faces, tpl.faces)
    assert np.allclose(loaded.template.rest_vertices, tpl.rest_vertices, atol=1e-7)
    assert not any(p.requires_grad for p in loaded.model.parameters())


def test_load_rejects_other_stage(tmp_path):
    persistence.write_checkpoint({"stage": "diffusion"}, {"x": np.zeros(1, np.float32)}, tmp_path / "c")
    with pytest.raises(persistence.CheckpointError, match="not 'autoencoder'"):
        A.load_ae(tmp_path / "c")


def test_non_finite_loss_aborts(scenes):
    tpl, sc = scenes
    cfg = small_config(steps=3, lr=1e30)
    with pytest.raises(A.TrainingDiverged, match="non-finite loss at step"):
        A.train_ae(tpl, sc, cfg)


def test_config_validation():
    assert A.AeConfig.from_dict(A.AeConfig.toy().to_dict()) == A.AeConfig.toy()
    with pytest.raises(ValueError):
        A.AeConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        A.AeConfig(input_mode="mesh")
    with pytest.raises(ValueError):
        A.AeConfig(encoder_widths=(4, 8))
    with pytest.raises(ValueError):
        A.train_ae(None, [], A.AeConfig.toy())
