import math

import numpy as np
import pytest
import torch

from tetta.core.exceptions import ConfigurationError, ContractError, ViewLookupError
from tetta.models.domain import DTYPE
from tetta.models.schemas import CameraPose, RelativeView, SdsWeighting
from tetta.services.diff_render import render
from tetta.services.priors import (
    Condition,
    RenderedViewBank,
    ViewBank,
    make_schedule,
    oracle_predictor,
    random_noise,
    sample_timestep,
    sds_gradient,
    sds_loss,
)

SHAPE = (4, 5, 3)


@pytest.fixture
def schedule():
    return make_schedule()


@pytest.fixture
def x_gt():
    return torch.rand(SHAPE, dtype=DTYPE, generator=torch.Generator().manual_seed(42))


def _condition(view: RelativeView = RelativeView()) -> Condition:
    return Condition(reference=torch.zeros(SHAPE, dtype=DTYPE), view=view)


# --- CALENDARIO ---


def test_schedule_alpha_bar_decreasing(schedule):
    assert schedule.steps == 1000
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert 0.0 < schedule.alpha_bar(1000) < schedule.alpha_bar(1) < 1.0


def test_single_step_schedule():
    schedule = make_schedule(steps=1, beta_start=0.01, beta_end=0.01)
    assert schedule.alpha_bar(1) == pytest.approx(0.99, abs=1e-15)
    assert schedule.weight(1) == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("kwargs", [dict(beta_start=0.02, beta_end=0.01), dict(steps=0), dict(beta_end=1.0)])
def test_invalid_schedule(kwargs):
    with pytest.raises(ConfigurationError):
        make_schedule(**kwargs)


def test_uniform_weighting():
    schedule = make_schedule(steps=10, weighting=SdsWeighting.UNIFORM)
    assert schedule.weight(3) == 1.0


def test_timestep_out_of_range(schedule):
    with pytest.raises(ContractError):
        schedule.alpha_bar(0)
    with pytest.raises(ContractError):
        schedule.alpha_bar(1001)


def test_sample_timestep_bounds(schedule):
    rng = np.random.default_rng(0)
    draws = [sample_timestep(schedule, rng) for _ in range(500)]
    assert min(draws) >= 20 and max(draws) <= 980


# --- ORÁCULO Y SDS ---


def test_oracle_recovers_noise(schedule, x_gt):
    predictor = oracle_predictor(ViewBank([(RelativeView(), x_gt.numpy())]), schedule)
    rng = np.random.default_rng(1)
    for k in range(100):
        t = sample_timestep(schedule, rng)
        eps = random_noise(SHAPE, seed=k)
        alpha_bar = schedule.alpha_bar(t)
        z_t = alpha_bar ** 0.5 * x_gt + (1.0 - alpha_bar) ** 0.5 * eps
        eps_hat = predictor.predict(z_t, _condition(), t)
        assert torch.allclose(eps_hat, eps, atol=1e-10, rtol=0.0)


def test_sds_gradient_zero_at_ground_truth(schedule, x_gt):
    predictor = oracle_predictor(ViewBank([(RelativeView(), x_gt.numpy())]), schedule)
    grad = sds_gradient(x_gt, _condition(), 500, random_noise(SHAPE, seed=3), predictor, schedule)
    assert float(grad.abs().max()) < 1e-10


def test_oracle_sds_gradient_closed_form(schedule, x_gt):
    predictor = oracle_predictor(ViewBank([(RelativeView(), x_gt.numpy())]), schedule)
    rng = np.random.default_rng(4)
    for k in range(100):
        x = torch.rand(SHAPE, dtype=DTYPE, generator=torch.Generator().manual_seed(1000 + k))
        t = sample_timestep(schedule, rng)
        alpha_bar = schedule.alpha_bar(t)
        expected = schedule.weight(t) * math.sqrt(alpha_bar) / math.sqrt(1.0 - alpha_bar) * (x - x_gt)
        grad = sds_gradient(x, _condition(), t, random_noise(SHAPE, seed=k), predictor, schedule)
        assert torch.allclose(grad, expected, atol=1e-10, rtol=0.0)


def test_sds_average_error_shrinks_with_draws(schedule):
    shape = (16, 16, 3)
    generator = torch.Generator().manual_seed(9)
    target = torch.rand(shape, dtype=DTYPE, generator=generator)
    x = torch.rand(shape, dtype=DTYPE, generator=generator)
    oracle = oracle_predictor(ViewBank([(RelativeView(), target.numpy())]), schedule)

    class HalfOracle:
        def predict(self, z_t, condition, t):
            return 0.5 * oracle.predict(z_t, condition, t)

    # g = w (c (x - x_gt) - ε) / 2: media conocida, desviación w/2 por píxel
    t = 500
    alpha_bar, w = schedule.alpha_bar(t), schedule.weight(t)
    mean_grad = 0.5 * w * math.sqrt(alpha_bar) / math.sqrt(1.0 - alpha_bar) * (x - target)
    condition = Condition(reference=torch.zeros(shape, dtype=DTYPE), view=RelativeView())
    predictor = HalfOracle()

    total = torch.zeros(shape, dtype=DTYPE)
    errors = {}
    for n in range(1, 10_001):
        eps = torch.randn(shape, generator=generator, dtype=DTYPE)
        total += sds_gradient(x, condition, t, eps, predictor, schedule)
        if n in (100, 10_000):
            errors[n] = float((total / n - mean_grad).pow(2).mean().sqrt())
            standard_error = 0.5 * w / math.sqrt(n)
            assert errors[n] / standard_error == pytest.approx(1.0, abs=0.15)
    assert errors[100] / errors[10_000] == pytest.approx(10.0, rel=0.2)


def test_sds_gradient_zero_for_perfect_predictor(schedule):
    eps = random_noise(SHAPE, seed=5)

    class Perfect:
        def predict(self, z_t, condition, t):
            return eps.clone()

    x = torch.rand(SHAPE, dtype=DTYPE, generator=torch.Generator().manual_seed(7))
    grad = sds_gradient(x, _condition(), 250, eps, Perfect(), schedule)
    assert torch.count_nonzero(grad) == 0


def test_sds_gradient_shape_checks(schedule, x_gt):
    predictor = oracle_predictor(ViewBank([(RelativeView(), x_gt.numpy())]), schedule)
    with pytest.raises(ContractError):
        sds_gradient(x_gt, _condition(), 10, torch.zeros((2, 2, 3), dtype=DTYPE), predictor, schedule)

    class WrongShape:
        def predict(self, z_t, condition, t):
            return torch.zeros((1, 1, 3), dtype=DTYPE)

    with pytest.raises(ContractError):
        sds_gradient(x_gt, _condition(), 10, random_noise(SHAPE, 0), WrongShape(), schedule)


def test_sds_loss_gradient_is_g():
    x = torch.rand(SHAPE, dtype=DTYPE, requires_grad=True)
    g = torch.randn(SHAPE, dtype=DTYPE)
    (grad,) = torch.autograd.grad(sds_loss(x, g), [x])
    assert torch.allclose(grad, g, atol=1e-12)


def test_sds_descent_converges_to_view(schedule, x_gt):
    predictor = oracle_predictor(ViewBank([(RelativeView(), x_gt.numpy())]), schedule)
    x = torch.zeros(SHAPE, dtype=DTYPE)
    start = float(((x - x_gt) ** 2).sum())
    rng = np.random.default_rng(2)
    for k in range(50):
        t = sample_timestep(schedule, rng)
        x = x - sds_gradient(x, _condition(), t, random_noise(SHAPE, seed=100 + k), predictor, schedule)
    assert float(((x - x_gt) ** 2).sum()) <= 0.1 * start


# --- BANCOS DE VISTAS ---


def test_view_bank_lookup_tolerance(x_gt):
    bank = ViewBank([(RelativeView(d_azimuth=90.0), x_gt.numpy())], angle_tolerance=1.0)
    assert torch.equal(bank.lookup(RelativeView(d_azimuth=90.5)), x_gt)
    # Envolvimiento del azimut: -270 equivale a +90
    assert torch.equal(bank.lookup(RelativeView(d_azimuth=-270.0)), x_gt)
    with pytest.raises(ViewLookupError):
        bank.lookup(RelativeView(d_azimuth=95.0))
    with pytest.raises(ViewLookupError):
        bank.lookup(RelativeView(d_azimuth=90.0, d_radius=0.5))


def test_view_bank_picks_nearest(x_gt):
    other = torch.zeros(SHAPE, dtype=DTYPE)
    bank = ViewBank([(RelativeView(d_azimuth=10.0), x_gt.numpy()), (RelativeView(d_azimuth=11.0), other.numpy())])
    assert torch.equal(bank.lookup(RelativeView(d_azimuth=10.9)), other)


def test_view_bank_rejects_bad_images():
    with pytest.raises(ContractError):
        ViewBank([(RelativeView(), np.zeros((4, 4)))])


def test_view_bank_save_load(tmp_path, x_gt):
    views = [RelativeView(d_azimuth=45.0), RelativeView(d_elevation=-10.0, d_azimuth=180.0)]
    bank = ViewBank([(v, x_gt.numpy() * (k + 1)) for k, v in enumerate(views)], angle_tolerance=2.0)
    path = bank.save(tmp_path / "bank.npz")
    loaded = ViewBank.load(path)
    assert len(loaded) == 2
    assert loaded.angle_tolerance == 2.0
    assert loaded.conditions == views
    assert torch.equal(loaded.lookup(views[1]), x_gt * 2)


def test_view_bank_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        ViewBank.load(tmp_path / "nada.npz")


def test_rendered_bank_identity_view(sphere, small_intrinsics, uniform_env):
    pose = CameraPose(elevation=15.0, azimuth=60.0, radius=2.2)
    bank = RenderedViewBank(sphere, pose, small_intrinsics, uniform_env)
    assert bank.conditions is None
    expected = render(sphere, pose, small_intrinsics, uniform_env).rgb
    assert torch.allclose(bank.lookup(RelativeView()), expected, atol=1e-12)
    assert bank.lookup(RelativeView()) is bank.lookup(RelativeView())
