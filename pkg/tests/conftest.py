import numpy as np
import pytest

from recon_ood.config import RunConfig
from recon_ood import pipeline


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full default pipeline run (seed 42), shared across test modules.

    Returns (config, run_dir, report)."""
    out = tmp_path_factory.mktemp("default_run")
    cfg = RunConfig(seed=42, out_dir=str(out))
    report = pipeline.cmd_all(cfg)
    return cfg, cfg.run_dir(), report


@pytest.fixture(scope="session")
def trained_encoder(default_run):
    from recon_ood.encoder import EncoderNet

    _, run_dir, _ = default_run
    net, accuracy = EncoderNet.load(run_dir / "encoder.ckpt")
    return net, accuracy


@pytest.fixture(scope="session")
def trained_denoiser(default_run):
    from recon_ood.diffusion import DenoiserNet

    _, run_dir, _ = default_run
    net, schedule, s_star = DenoiserNet.load(run_dir / "denoiser.ckpt")
    return net, schedule, s_star


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
