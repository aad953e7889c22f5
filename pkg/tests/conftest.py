import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("GRASPFORGE_TEST_THREADS", "1")))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def template():
    from graspforge.hand_model import build_procedural_template

    return build_procedural_template(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two procedural objects with one fitted grasp each."""
    from graspforge.dataset import make_dataset

    out = tmp_path_factory.mktemp("tiny_data")
    make_dataset(out, n_objects=2, grasps_per_object=1, seed=5)
    return out


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset, tmp_path_factory):
    """A briefly trained ae/ + diffusion/ + adapter/ directory; shapes only, not quality."""
    from graspforge import adaptation, autoencoder, diffusion, persistence
    from graspforge.dataset import load_dataset, prepare_scenes

    out = tmp_path_factory.mktemp("tiny_bundle")
    data = load_dataset(tiny_dataset)
    ae_cfg = autoencoder.AeConfig.toy(steps=3, physical_warmup=0)
    scenes = prepare_scenes(data, ae_cfg.object_points, 0)
    res = autoencoder.train_ae(data.template, scenes, ae_cfg)
    autoencoder.save_ae(res, data.template, out / "ae")
    ae = autoencoder.load_ae(out / "ae")
    d_res = diffusion.train_diffusion(ae, scenes, diffusion.DiffusionConfig.toy(steps=5))
    diffusion.save_diffusion(d_res, out / "diffusion", {"autoencoder": persistence.content_hash(out / "ae")})
    diff = diffusion.load_diffusion(out / "diffusion", out / "ae")
    a_cfg = adaptation.AdaptConfig.toy(steps=2, batch_size=2, ddim_steps=5)
    a_res = adaptation.train_adaptation(ae, diff, scenes, a_cfg)
    lineage = {"autoencoder": persistence.content_hash(out / "ae"),
               "diffusion": persistence.content_hash(out / "diffusion")}
    adaptation.save_adapter(a_res, a_cfg, ae.model.config.latent_dim, out / "adapter", lineage)
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
