import pytest

from flowgate.config import load_config
from flowgate.evaluate import (
    run_calibrate_gates,
    run_distill,
    run_gen_data,
    run_train_flow,
    run_train_vae,
)

SMOKE_CFG = "configs/smoke.cfg"


def build_pipeline(config):
    run_gen_data(config)
    run_train_vae(config)
    run_train_flow(config)
    run_distill(config)
    run_calibrate_gates(config)
    return config


@pytest.fixture(scope="session")
def smoke_config(tmp_path_factory):
    """Small undertrained pipeline shared by integration-level tests."""
    out = tmp_path_factory.mktemp("smoke_bundle")
    config = load_config(SMOKE_CFG)
    config.run.out = str(out)
    return build_pipeline(config)
