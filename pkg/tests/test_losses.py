import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from viscosdf.errors import NonFiniteError
from viscosdf.field_net import Jet2, JetBatch
from viscosdf.losses import (
    LossSpec,
    eikonal_loss,
    epsilon_at,
    manifold_loss,
    nonmanifold_loss,
    total_loss,
    viscoreg_loss,
)
from viscosdf.models import LossWeights, ViscositySchedule


def jet(value=0.0, grad=(1.0, 0.0), laplacian=0.0):
    return Jet2(value=value, grad=np.array(grad, dtype=float), laplacian=laplacian)


def test_manifold_loss_examples():
    assert manifold_loss([jet(0.0), jet(0.0)]) == 0.0
    assert manifold_loss([jet(1.0), jet(-1.0)]) == 1.0
    values = np.random.default_rng(0).normal(size=100)
    batch = JetBatch(values, np.zeros((100, 2)), np.zeros(100))
    assert manifold_loss(batch) == pytest.approx(np.abs(values).mean(), rel=1e-15)


def test_nonmanifold_loss_examples():
    assert nonmanifold_loss([0.0, 0.0, 0.0], 100.0) == 1.0
    assert nonmanifold_loss([0.0, np.log(2.0)], 1.0) == pytest.approx(0.75, rel=1e-15)
    assert nonmanifold_loss([1e6], 100.0) == 0.0


@given(st.floats(min_value=0, max_value=10), st.floats(min_value=0, max_value=10))
def test_nonmanifold_loss_decreases_in_magnitude(a, b):
    lo, hi = sorted([a, b])
    assert nonmanifold_loss([hi], 1.0) <= nonmanifold_loss([-lo], 1.0)


def test_eikonal_loss_examples():
    assert eikonal_loss([jet(grad=(1.0, 0.0)), jet(grad=(0.0, -1.0))], 1) == 0.0
    assert eikonal_loss([jet(grad=(0.0, 0.0))], 2) == 1.0
    assert eikonal_loss([jet(grad=(0.0, 0.0)), jet(grad=(2.0, 0.0))], 1) == 1.0


def test_viscoreg_loss_examples():
    jets = [jet(grad=(0.6, 0.8)), jet(grad=(0.0, 2.0), laplacian=-3.0)]
    for p in (1, 2):
        assert viscoreg_loss(jets, 0.0, p) == eikonal_loss(jets, p)
        assert viscoreg_loss([jet(grad=(1.1, 0.0), laplacian=1.0)], 0.1, p) == pytest.approx(
            0.0, abs=1e-15
        )
    # residuals +0.2 and -0.2
    pair = [jet(grad=(1.2, 0.0)), jet(grad=(0.8, 0.0))]
    assert viscoreg_loss(pair, 0.5, 2) == pytest.approx(0.04, rel=1e-12)


@pytest.mark.parametrize(
    "loss", [lambda j: manifold_loss(j), lambda j: eikonal_loss(j, 1), lambda j: viscoreg_loss(j, 0.1, 2)]
)
def test_empty_batches_raise(loss):
    with pytest.raises(ValueError):
        loss([])


def test_invalid_arguments():
    with pytest.raises(ValueError):
        nonmanifold_loss([], 1.0)
    with pytest.raises(ValueError):
        nonmanifold_loss([0.0], 0.0)
    with pytest.raises(ValueError):
        viscoreg_loss([jet()], -0.1, 1)
    with pytest.raises(ValueError):
        viscoreg_loss([jet()], 0.1, 3)


@pytest.mark.parametrize(
    "progress, expected",
    [(0.0, 1.0), (0.2, 0.8), (0.3, 0.44), (0.4, 0.08), (0.6, 0.01), (0.8, 0.0), (1.0, 0.0)],
)
def test_baseline_schedule(progress, expected):
    assert epsilon_at(ViscositySchedule.preset("baseline"), progress) == pytest.approx(expected)


def test_constant_and_quintic_schedules():
    constant = ViscositySchedule.preset("piecewise_constant")
    assert epsilon_at(constant, 0.3) == 0.8
    assert epsilon_at(constant, 0.59) == 0.08
    quintic = ViscositySchedule.preset("quintic")
    assert epsilon_at(quintic, 0.0) == 1.0
    assert epsilon_at(quintic, 0.4) == pytest.approx(0.5**5)
    assert epsilon_at(quintic, 0.9) == 0.0


def test_schedule_text_syntax():
    schedule = ViscositySchedule(breakpoints="0:1, 0.2:0.8, 0.4:0.08, 0.6:0.01, 0.8:0")
    assert schedule.breakpoints == ViscositySchedule.preset("baseline").breakpoints


@pytest.mark.parametrize(
    "text",
    ["0.1:1, 0.8:0", "0:1, 0.5:0.2, 0.4:0", "0:1, 0.5:-0.2, 0.8:0", "0:1, 0.8:0.1", "0:1, 1.2:0"],
)
def test_invalid_schedules_rejected(text):
    with pytest.raises(ValueError):
        ViscositySchedule(breakpoints=text)


@pytest.mark.parametrize("name", ["baseline", "fast", "slow", "zero", "piecewise_constant", "quintic", "scene", "shapenet"])
def test_every_schedule_ends_at_zero(name):
    assert epsilon_at(ViscositySchedule.preset(name), 1.0) == 0.0


@settings(max_examples=50)
@given(st.floats(min_value=0, max_value=1), st.floats(min_value=0, max_value=1))
def test_baseline_is_monotone(a, b):
    schedule = ViscositySchedule.preset("baseline")
    lo, hi = sorted([a, b])
    assert epsilon_at(schedule, hi) <= epsilon_at(schedule, lo)


def test_progress_out_of_range():
    with pytest.raises(ValueError):
        epsilon_at(ViscositySchedule(), 1.5)
    with pytest.raises(ValueError):
        epsilon_at(ViscositySchedule(), -0.1)


def test_total_loss_examples():
    weights = LossWeights(alpha_m=3000, alpha_nm=100, alpha_e=50)
    assert total_loss(weights, (0.0, 0.0, 0.0)).total == 0.0
    breakdown = total_loss(weights, (0.01, 0.5, 0.02), epsilon_used=0.3)
    assert breakdown.total == pytest.approx(81.0)
    assert breakdown.epsilon_used == 0.3


def test_loss_spec_matches_standalone_losses():
    rng = np.random.default_rng(3)
    surface = JetBatch(rng.normal(size=10), rng.normal(size=(10, 2)), rng.normal(size=10))
    domain = JetBatch(rng.normal(size=12), rng.normal(size=(12, 2)), rng.normal(size=12))
    weights = LossWeights(p=2)
    breakdown, adjoints = LossSpec(weights, epsilon=0.2)({"surface": surface, "domain": domain})
    assert breakdown.manifold == pytest.approx(manifold_loss(surface))
    assert breakdown.nonmanifold == pytest.approx(nonmanifold_loss(domain.value, weights.alpha_exp))
    assert breakdown.eikonal_or_visco == pytest.approx(viscoreg_loss(domain, 0.2, 2))
    assert set(adjoints) == {"surface", "domain"}


def test_loss_spec_without_viscosity_uses_plain_eikonal():
    rng = np.random.default_rng(4)
    batch = JetBatch(rng.normal(size=8), rng.normal(size=(8, 2)), rng.normal(size=8))
    breakdown, _ = LossSpec(LossWeights(), epsilon=0.7, viscous=False)({"surface": batch, "domain": batch})
    assert breakdown.eikonal_or_visco == pytest.approx(eikonal_loss(batch, 1))
    assert breakdown.epsilon_used == 0.0


def test_loss_spec_flags_non_finite_terms():
    good = JetBatch(np.zeros(2), np.ones((2, 2)), np.zeros(2))
    bad = JetBatch(np.zeros(2), np.ones((2, 2)), np.array([np.inf, 0.0]))
    with pytest.raises(NonFiniteError):
        LossSpec(LossWeights(), epsilon=0.5)({"surface": good, "domain": bad})
