import hypothesis
import numpy as np
import pytest

from viscosdf.field_net import init_geometric
from viscosdf.models import Architecture, ShapeSpec, TrainConfig

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)


@pytest.fixture
def tiny_arch():
    return Architecture(input_dim=2, hidden_layers=2, width=8, omega0=3.0)


@pytest.fixture
def tiny_net(tiny_arch):
    return init_geometric(tiny_arch, seed=7)


@pytest.fixture
def circle_spec():
    return ShapeSpec(kind="circle", radius=0.5)


@pytest.fixture
def quick_config():
    """Small network and batches: enough to exercise a training loop in well under a second"""
    return TrainConfig(
        iterations=20,
        learning_rate=1e-3,
        arch=dict(input_dim=2, hidden_layers=2, width=16, omega0=10.0),
        n_surface=64,
        n_domain=64,
        log_every=5,
        checkpoint_fraction=0.25,
        record_wall_time=False,
    )


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("VISCOSDF_OUT", str(root))
    return root
