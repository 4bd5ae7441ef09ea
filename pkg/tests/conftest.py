import numpy as np
import pytest
import torch

from prol.backbone import BackboneConfig, init_backbone
from prol.experiment import ExperimentConfig, obtain_backbone, prepare_data

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_cfg(tmp_path_factory):
    return ExperimentConfig(outdir=str(tmp_path_factory.mktemp("runs") / "default"))


@pytest.fixture(scope="session")
def default_data(default_cfg):
    return prepare_data(default_cfg)


@pytest.fixture(scope="session")
def pretrained(default_cfg, default_data, tmp_path_factory):
    """Backbone pretrained on the default base classes, shared across the session."""
    return obtain_backbone(default_cfg, default_data, tmp_path_factory.mktemp("backbones"), log=None)


@pytest.fixture
def tiny64():
    """One-layer, one-head-per-4-dims float64 backbone for gradient and oracle checks."""
    cfg = BackboneConfig(layers=1, heads=2, dim=8, patch_size=2, image_side=4, channels=3, mlp_ratio=1.0)
    bb = init_backbone(cfg, seed=3).to(torch.float64)
    return bb


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
