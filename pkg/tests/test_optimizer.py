import pytest
import torch

from tetta.core.exceptions import ContractError
from tetta.models.domain import DTYPE
from tetta.services.optimizer import OptimizerState, adamw_step, global_grad_norm


def _t(values):
    return torch.tensor(values, dtype=DTYPE)


def test_zero_gradient_keeps_parameters():
    params = {"sdf": _t([0.3, -0.4, 1.0])}
    before = params["sdf"].clone()
    state = adamw_step(params, {"sdf": torch.zeros(3, dtype=DTYPE)}, OptimizerState(lr=0.1))
    assert torch.equal(params["sdf"], before)
    assert state.step == 1


def test_first_step_moves_by_lr():
    params = {"x": _t([1.0])}
    adamw_step(params, {"x": _t([0.5])}, OptimizerState(lr=1e-3, clip_norm=None))
    assert float(params["x"][0]) == pytest.approx(1.0 - 1e-3, abs=1e-10)


def test_global_norm_clipping():
    params = {"a": _t([0.0, 0.0])}
    state = OptimizerState(lr=1e-3, clip_norm=1.0)
    adamw_step(params, {"a": _t([6.0, 8.0])}, state)
    assert state.last_grad_norm == pytest.approx(10.0)
    # m_1 = (1 - β1) · g · (clip / ||g||)
    assert float((state.exp_avg["a"] * 10.0).norm()) == pytest.approx(1.0)


def test_global_grad_norm_spans_parameters():
    assert global_grad_norm({"a": _t([3.0]), "b": _t([4.0]), "c": None}) == pytest.approx(5.0)


def test_decoupled_weight_decay():
    params = {"kd": _t([2.0])}
    adamw_step(params, {"kd": _t([0.0])}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert float(params["kd"][0]) == pytest.approx(1.9)


def test_weight_decay_skips_exempt_parameters():
    params = {"kd": _t([2.0]), "azimuth": _t([30.0])}
    state = OptimizerState(lr=0.1, weight_decay=0.5, no_decay=("azimuth",))
    adamw_step(params, {"kd": _t([0.0]), "azimuth": _t([0.0])}, state)
    assert float(params["kd"][0]) == pytest.approx(1.9)
    assert float(params["azimuth"][0]) == 30.0


def test_lr_overrides_per_group():
    params = {"geo": _t([0.0]), "cam": _t([0.0])}
    state = OptimizerState(lr=1e-3, clip_norm=None)
    state.set_group_lr(["cam"], 1e-1)
    adamw_step(params, {"geo": _t([1.0]), "cam": _t([1.0])}, state)
    assert float(params["geo"][0]) == pytest.approx(-1e-3, rel=1e-6)
    assert float(params["cam"][0]) == pytest.approx(-1e-1, rel=1e-6)


def test_constraints_run_after_update():
    params = {"x": _t([0.0])}
    calls = []

    def clamp():
        calls.append(float(params["x"][0]))
        params["x"].clamp_(min=0.0)

    adamw_step(params, {"x": _t([1.0])}, OptimizerState(lr=0.5, clip_norm=None), constraints=[clamp])
    assert calls and calls[0] < 0.0
    assert float(params["x"][0]) == 0.0


def test_missing_gradient_treated_as_zero():
    params = {"a": _t([1.0]), "b": _t([1.0])}
    adamw_step(params, {"a": _t([1.0]), "b": None}, OptimizerState(lr=0.1, clip_norm=None))
    assert float(params["b"][0]) == 1.0
    assert float(params["a"][0]) < 1.0


def test_shape_mismatch():
    with pytest.raises(ContractError):
        adamw_step({"a": _t([1.0, 2.0])}, {"a": _t([1.0])}, OptimizerState())


def test_unknown_parameter():
    with pytest.raises(ContractError):
        adamw_step({"a": _t([1.0])}, {"b": _t([1.0])}, OptimizerState())
