import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from tetta.core.exceptions import ConfigurationError, ContractError, NonFiniteLossError
from tetta.models.schemas import (
    CameraPose,
    ExperimentConfig,
    InitShape,
    Intrinsics,
    SyntheticReference,
    TTAConfig,
    wrap_delta,
)
from tetta.services.config_io import load_experiment_config
from tetta.services.experiment import run_reconstruction, synthesize_reference, with_material
from tetta.services.fixtures import ellipsoid_mesh, sphere_mesh
from tetta.services.geometry_init import fit_field_to_mesh
from tetta.services.losses import sdf_regularizer
from tetta.services.priors import RenderedViewBank, make_schedule, oracle_predictor
from tetta.services.reporting import write_report_bundle
from tetta.services.tet_grid import grid_for_bound
from tetta.services.tta import HISTORY_COLUMNS, TTAInputs, joint_optimizer, run_tta

SPHERE_TOML = Path(__file__).resolve().parent.parent / "fixtures" / "sphere.toml"
TRUE_POSE = CameraPose(elevation=10.0, azimuth=30.0, radius=2.0)


def _tiny_config(**overrides) -> TTAConfig:
    params = dict(
        grid_resolution=8,
        fit_points=200,
        fit_iters=2,
        stage_a_iters=3,
        stage_b_iters=2,
        views_per_iter=1,
        intrinsics=Intrinsics(width=16, height=16),
        eval_every=1,
        eval_points=200,
    )
    params.update(overrides)
    return TTAConfig(**params)


def _inputs(config: TTAConfig, env, with_predictor: bool = True, **overrides) -> TTAInputs:
    gt = sphere_mesh(radius=0.6, subdivisions=3)
    synthetic = SyntheticReference(pose=TRUE_POSE)
    image, mask = synthesize_reference(gt, synthetic, config, env)
    predictor = None
    if with_predictor:
        bank = RenderedViewBank(with_material(gt, synthetic), TRUE_POSE, config.intrinsics, env)
        predictor = oracle_predictor(bank, make_schedule())
    params = dict(
        reference_image=image,
        reference_mask=mask,
        pose=CameraPose(elevation=10.0, azimuth=30.0, radius=2.4),
        env=env,
        predictor=predictor,
        coarse_mesh=sphere_mesh(radius=0.45, subdivisions=2),
        gt_mesh=gt,
    )
    params.update(overrides)
    return TTAInputs(**params)


# --- CORRIDAS CORTAS ---


def test_tiny_run_produces_history(uniform_env):
    config = _tiny_config()
    result = run_tta(config, _inputs(config, uniform_env))

    history = result.history
    assert list(history.columns) == list(HISTORY_COLUMNS)
    assert len(history) == 5
    assert history["stage"].tolist() == ["A"] * 3 + ["B"] * 2
    assert np.all(np.isfinite(history["total"]))
    assert history.loc[history["stage"] == "B", "chamfer"].notna().all()
    assert set(result.stage_losses()) == {"stage_A", "stage_B"}

    assert not result.mesh.is_empty()
    assert result.mesh.attributes is not None
    assert result.initial_chamfer is not None and math.isfinite(result.final_chamfer)
    assert set(result.timings) == {"fit", "stage_a", "stage_b"}


def test_frozen_camera_keeps_angles(uniform_env):
    config = _tiny_config(stage_a_iters=0, calibrate_camera=False)
    inputs = _inputs(config, uniform_env)
    result = run_tta(config, inputs)
    assert result.pose == inputs.pose


def test_canonical_view_and_ellipsoid_init(uniform_env):
    config = _tiny_config(canonical_view=True, init_shape=InitShape.ELLIPSOID, stage_a_iters=1, stage_b_iters=1)
    result = run_tta(config, _inputs(config, uniform_env, coarse_mesh=None))
    assert result.initial_pose.elevation == 0.0 and result.initial_pose.azimuth == 0.0
    assert result.initial_pose.radius == 2.4


def test_without_predictor_skips_sds(uniform_env):
    config = _tiny_config(stage_a_iters=0)
    result = run_tta(config, _inputs(config, uniform_env, with_predictor=False))
    assert result.history["sds"].isna().all()


def test_run_is_deterministic(uniform_env):
    config = _tiny_config()
    a = run_tta(config, _inputs(config, uniform_env))
    b = run_tta(config, _inputs(config, uniform_env))
    assert torch.equal(a.mesh.positions, b.mesh.positions)
    assert a.history.equals(b.history)


def test_reference_shape_mismatch(uniform_env):
    config = _tiny_config()
    inputs = _inputs(config, uniform_env, reference_mask=torch.zeros((8, 8)))
    with pytest.raises(ContractError):
        run_tta(config, inputs)


def test_missing_coarse_mesh(uniform_env):
    config = _tiny_config()
    with pytest.raises(ConfigurationError):
        run_tta(config, _inputs(config, uniform_env, coarse_mesh=None))


def test_non_finite_loss_aborts_with_snapshot(uniform_env):
    config = _tiny_config(stage_a_iters=0)
    inputs = _inputs(config, uniform_env)
    inputs.reference_image = inputs.reference_image.clone()
    inputs.reference_image[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        run_tta(config, inputs)
    assert info.value.snapshot["stage"] == "B"
    assert info.value.snapshot["iteration"] == 0
    assert set(info.value.snapshot["pose"]) == {"elevation", "azimuth", "radius"}


def test_report_bundle_writes_artifacts(tmp_path, uniform_env):
    config = _tiny_config()
    inputs = _inputs(config, uniform_env)
    result = run_tta(config, inputs)
    bundle = write_report_bundle(
        result, tmp_path, ExperimentConfig(tta=config), inputs.reference_image, uniform_env,
        gt_mesh=inputs.gt_mesh, turntable_frames=2, eval_points=200,
    )
    for name in ("metrics.json", "timings.json", "history.csv", "loss_curves.html", "mesh.obj", "pose.json", "render.png"):
        assert (tmp_path / name).exists()
    assert sorted(p.name for p in (tmp_path / "turntable").iterdir()) == ["frame_000.png", "frame_001.png"]
    assert json.loads((tmp_path / "metrics.json").read_text()) == bundle.metrics
    assert bundle.metrics["iterations"] == 5
    assert "chamfer" in bundle.metrics and "f_score" in bundle.metrics


def test_joint_optimizer_steps_angles_in_radians():
    state = joint_optimizer(TTAConfig(lr_camera=0.01, lr_geometry=0.02, lr_texture=0.03))
    assert state.lr_for("elevation") == pytest.approx(math.degrees(0.01))
    assert state.lr_for("azimuth") == pytest.approx(math.degrees(0.01))
    assert state.lr_for("radius") == 0.01
    assert state.lr_for("sdf") == 0.02 and state.lr_for("kn") == 0.03
    assert set(state.no_decay) == {"elevation", "azimuth", "radius"}


def test_first_joint_step_moves_azimuth_by_one_camera_step(uniform_env):
    config = _tiny_config(stage_a_iters=0, stage_b_iters=1, lr_camera=0.01)
    inputs = _inputs(config, uniform_env, pose=CameraPose(elevation=10.0, azimuth=45.0, radius=2.0))
    result = run_tta(config, inputs)
    moved = abs(wrap_delta(result.pose.azimuth - 45.0))
    assert moved == pytest.approx(math.degrees(0.01), rel=0.05)


def test_joint_regularizer_is_mean_over_edges(uniform_env):
    config = _tiny_config(stage_a_iters=0, stage_b_iters=1)
    grid = grid_for_bound(config.grid_resolution, config.grid_bound)
    field = fit_field_to_mesh(grid, sphere_mesh(radius=0.45, subdivisions=2), 200, 2, config.fit_lr, seed=0)
    result = run_tta(config, _inputs(config, uniform_env, field=field))

    mean = float(sdf_regularizer(field.sdf.detach(), grid.edges, reduction="mean"))
    total = float(sdf_regularizer(field.sdf.detach(), grid.edges, reduction="sum"))
    assert result.history.loc[0, "reg"] == pytest.approx(mean, rel=1e-12)
    assert total == pytest.approx(mean * grid.edges.shape[0], rel=1e-12)


# --- ACEPTACIÓN ---


@pytest.mark.slow
def test_stage_a_recovers_radius(uniform_env):
    config = TTAConfig(
        grid_resolution=24,
        fit_points=0,
        fit_iters=0,
        stage_a_iters=200,
        stage_b_iters=0,
        lr_camera=0.02,
        intrinsics=Intrinsics(width=64, height=64),
    )
    gt = sphere_mesh(radius=0.6, subdivisions=4)
    image, mask = synthesize_reference(gt, SyntheticReference(pose=TRUE_POSE), config, uniform_env)
    inputs = TTAInputs(
        reference_image=image,
        reference_mask=mask,
        pose=TRUE_POSE.model_copy(update={"radius": 3.0}),
        env=uniform_env,
        coarse_mesh=gt,
    )
    result = run_tta(config, inputs)
    assert result.pose.radius == pytest.approx(2.0, rel=0.02)


@pytest.mark.slow
def test_sphere_reconstruction_is_reproducible(tmp_path):
    config = load_experiment_config(SPHERE_TOML)
    first = run_reconstruction(config, tmp_path / "a", turntable_frames=0)
    second = run_reconstruction(config, tmp_path / "b", turntable_frames=0)

    metrics_a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert metrics_a == (tmp_path / "b" / "metrics.json").read_bytes()
    metrics = json.loads(metrics_a)
    assert metrics["final_chamfer_world"] < metrics["initial_chamfer_world"]
    assert first.metrics == second.metrics
    for name in ("mesh.obj", "mesh.mtl", "pose.json", "history.csv", "loss_curves.html", "render.png", "config.toml"):
        assert (tmp_path / "a" / name).exists()


CALIBRATION_POSE = CameraPose(elevation=15.0, azimuth=30.0, radius=2.0)


def _calibration_run(env, offset, calibrate: bool):
    config = TTAConfig(
        grid_resolution=16,
        fit_points=3000,
        fit_iters=20,
        stage_a_iters=0,
        stage_b_iters=80,
        views_per_iter=4,
        intrinsics=Intrinsics(width=32, height=32),
        eval_points=2000,
        calibrate_camera=calibrate,
    )
    # Semiejes distintos: la silueta cambia con θ y φ
    gt = ellipsoid_mesh(radii=(0.6, 0.35, 0.3), subdivisions=3)
    synthetic = SyntheticReference(pose=CALIBRATION_POSE)
    image, mask = synthesize_reference(gt, synthetic, config, env)
    bank = RenderedViewBank(with_material(gt, synthetic), CALIBRATION_POSE, config.intrinsics, env)
    start = CameraPose(
        elevation=CALIBRATION_POSE.elevation + offset[0],
        azimuth=CALIBRATION_POSE.azimuth + offset[1],
        radius=CALIBRATION_POSE.radius,
        learn_radius=False,
    )
    inputs = TTAInputs(
        reference_image=image,
        reference_mask=mask,
        pose=start,
        env=env,
        predictor=oracle_predictor(bank, make_schedule()),
        coarse_mesh=gt,
        gt_mesh=gt,
    )
    return run_tta(config, inputs)


@pytest.mark.slow
@pytest.mark.parametrize("offset", [(0.0, 5.0), (0.0, -10.0), (0.0, 15.0), (-10.0, 0.0)])
def test_camera_self_calibration_recovers_angles(uniform_env, offset):
    learned = _calibration_run(uniform_env, offset, calibrate=True)
    frozen = _calibration_run(uniform_env, offset, calibrate=False)

    assert learned.final_chamfer <= frozen.final_chamfer
    assert abs(wrap_delta(learned.pose.azimuth - CALIBRATION_POSE.azimuth)) < 2.0
    assert abs(learned.pose.elevation - CALIBRATION_POSE.elevation) < 2.0


@pytest.mark.slow
def test_ellipsoid_init_halves_world_chamfer(tmp_path):
    config = load_experiment_config(SPHERE_TOML)
    tta = config.tta.model_copy(
        update={"init_shape": InitShape.ELLIPSOID, "views_per_iter": 8, "stage_a_iters": 0, "stage_b_iters": 200}
    )
    camera = CameraPose(elevation=10.0, azimuth=30.0, radius=2.0, learn_radius=False)
    config = config.model_copy(update={"tta": tta, "camera": camera})
    run_reconstruction(config, tmp_path, turntable_frames=0)

    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["final_chamfer_world"] < 0.5 * metrics["initial_chamfer_world"]
    assert metrics["psnr_reference"] >= 25.0
