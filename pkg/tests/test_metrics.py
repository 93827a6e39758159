import math

import numpy as np
import pytest

from tetta.core.exceptions import ContractError
from tetta.models.domain import PointCloud, RigidTransform
from tetta.services.fixtures import ellipsoid_mesh
from tetta.services.geometry_init import sample_surface_points
from tetta.services.metrics import (
    chamfer_distance,
    evaluate_meshes,
    f_score,
    f_score_details,
    icp_align,
    icp_register,
    normalize_cloud,
    psnr,
)


def _rotation(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    theta = math.radians(degrees)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * k @ k


def _lattice() -> np.ndarray:
    """Retícula anisótropa 4x4x4 (espaciado >= 0.3): los vecinos no se confunden."""
    axes = [np.arange(4) * 0.3, np.arange(4) * 0.35, np.arange(4) * 0.4]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return points - points.mean(axis=0)


# --- CHAMFER / F-SCORE ---


def test_chamfer_single_points():
    assert chamfer_distance(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])) == pytest.approx(2.0)


def test_chamfer_symmetric_and_zero():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_empty_cloud():
    with pytest.raises(ContractError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((3, 3)))


@pytest.mark.parametrize(
    "pred,gt,expected",
    [
        ([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.04]], 100.0),
        ([[0.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]], 0.0),
        ([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], 200.0 / 3.0),
    ],
)
def test_f_score_examples(pred, gt, expected):
    assert f_score(np.array(pred), np.array(gt), tau=0.05) == pytest.approx(expected)


def test_f_score_threshold_is_inclusive():
    details = f_score_details(np.array([[0.0, 0.0, 0.0]]), np.array([[0.5, 0.0, 0.0]]), tau=0.5)
    assert details.precision == 1.0 and details.recall == 1.0


def test_f_score_rejects_non_positive_tau():
    with pytest.raises(ContractError):
        f_score(np.zeros((1, 3)), np.zeros((1, 3)), tau=0.0)


# --- NORMALIZACIÓN ---


def test_normalize_unit_cube_corners():
    corners = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    normalized = normalize_cloud(corners)
    assert normalized.scale == pytest.approx(1.0 / math.sqrt(3.0))
    assert np.allclose(normalized.cloud.points.mean(axis=0), 0.0)
    extent = normalized.cloud.points.max(axis=0) - normalized.cloud.points.min(axis=0)
    assert np.linalg.norm(extent) == pytest.approx(1.0)


def test_normalize_is_idempotent():
    points = np.random.default_rng(3).uniform(-2.0, 5.0, (200, 3))
    once = normalize_cloud(points).cloud
    twice = normalize_cloud(once).cloud
    assert np.allclose(once.points, twice.points, atol=1e-12)


def test_normalize_coincident_points():
    with pytest.raises(ContractError):
        normalize_cloud(PointCloud(np.ones((5, 3))))


# --- ICP ---


def test_icp_recovers_small_rigid_motion():
    src = _lattice()
    truth = RigidTransform(_rotation((0.2, 1.0, 0.3), 5.0), np.array([0.02, -0.01, 0.015]))
    dst = truth.apply(src)
    result = icp_register(src, dst)
    assert np.allclose(result.transform.rotation, truth.rotation, atol=1e-4)
    assert np.allclose(result.transform.translation, truth.translation, atol=1e-4)
    assert result.residual < 1e-12


def test_icp_identity_on_same_cloud():
    src = _lattice()
    result = icp_register(src, src)
    assert np.allclose(result.transform.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(result.transform.translation, 0.0, atol=1e-9)


def test_icp_align_returns_transform():
    src = _lattice()
    truth = RigidTransform(np.eye(3), np.array([0.01, 0.0, -0.02]))
    transform = icp_align(src, truth.apply(src))
    assert np.allclose(transform.apply(src), truth.apply(src), atol=1e-6)


def test_icp_residuals_non_increasing():
    mesh = ellipsoid_mesh(radii=(0.6, 0.4, 0.3), subdivisions=3)
    src = sample_surface_points(mesh, 800, seed=0).points
    dst = RigidTransform(_rotation((1.0, 0.0, 1.0), 20.0), np.array([0.1, 0.0, -0.05])).apply(
        sample_surface_points(mesh, 800, seed=1).points
    )
    residuals = icp_register(src, dst).residuals
    assert len(residuals) >= 2
    assert all(b <= a + 1e-15 for a, b in zip(residuals, residuals[1:]))


# --- PSNR ---


def test_psnr_values():
    zeros, ones = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    assert psnr(zeros, ones) == pytest.approx(0.0)
    assert psnr(zeros, np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    assert psnr(ones, ones) == math.inf


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# --- PROTOCOLO COMPLETO ---


def test_evaluate_identical_meshes():
    mesh = ellipsoid_mesh(radii=(0.6, 0.4, 0.3), subdivisions=3)
    result = evaluate_meshes(mesh, mesh, n_points=2000)
    assert result.chamfer < 1e-12
    assert result.f_score == pytest.approx(100.0)
    assert set(result.as_dict()) >= {"chamfer", "f_score", "precision", "recall", "tau", "n_points"}


def test_evaluate_is_invariant_to_similarity_transforms():
    gt = ellipsoid_mesh(radii=(0.6, 0.4, 0.3), subdivisions=3)
    moved = gt.transformed(_rotation((0.3, -1.0, 0.5), 40.0), np.array([0.3, -0.2, 0.1]), scale=1.7)
    base = evaluate_meshes(gt, gt, n_points=2000)
    other = evaluate_meshes(moved, gt, n_points=2000)
    assert base.chamfer < 1e-10 and other.chamfer < 1e-10
    assert abs(base.chamfer - other.chamfer) < 1e-6
    assert other.f_score == pytest.approx(100.0)
