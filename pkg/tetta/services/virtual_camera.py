"""
Cámara virtual esférica: transformaciones de vista/proyección diferenciables,
muestreo de vistas nuevas con su condición relativa y restricciones de pose.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch

from tetta.models.domain import DTYPE, PoseVariables
from tetta.models.schemas import CameraPose, Intrinsics, RelativeView, wrap_azimuth, wrap_delta

logger = logging.getLogger(__name__)

PoseLike = Union[CameraPose, PoseVariables]

# Radio mínimo permitido durante la optimización
MIN_RADIUS = 1e-3


@dataclass
class CameraTransforms:
    view: torch.Tensor  # (4, 4) mundo -> cámara (mira hacia -z)
    projection: torch.Tensor  # (4, 4) perspectiva estilo OpenGL
    eye: torch.Tensor  # (3,)
    intrinsics: Intrinsics


def _pose_tensors(pose: PoseLike) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if isinstance(pose, PoseVariables):
        return pose.elevation, pose.azimuth, pose.radius
    return (
        torch.tensor(pose.elevation, dtype=DTYPE),
        torch.tensor(pose.azimuth, dtype=DTYPE),
        torch.tensor(pose.radius, dtype=DTYPE),
    )


def eye_position(pose: PoseLike) -> torch.Tensor:
    """eye = r (cosθ cosφ, cosθ sinφ, sinθ)."""
    elevation, azimuth, radius = _pose_tensors(pose)
    theta = torch.deg2rad(elevation)
    phi = torch.deg2rad(azimuth)
    return radius * torch.stack(
        [torch.cos(theta) * torch.cos(phi), torch.cos(theta) * torch.sin(phi), torch.sin(theta)]
    )


def look_at(eye: torch.Tensor, target: torch.Tensor, up: torch.Tensor) -> torch.Tensor:
    forward = target - eye
    forward = forward / forward.norm()
    side = torch.linalg.cross(forward, up)
    side = side / side.norm()
    true_up = torch.linalg.cross(side, forward)
    rotation = torch.stack([side, true_up, -forward])
    top = torch.cat([rotation, -(rotation @ eye)[:, None]], dim=1)
    return torch.cat([top, torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=DTYPE)], dim=0)


def perspective(intrinsics: Intrinsics) -> torch.Tensor:
    f = 1.0 / math.tan(math.radians(intrinsics.fov) / 2.0)
    aspect = intrinsics.width / intrinsics.height
    near, far = intrinsics.near, intrinsics.far
    return torch.tensor(
        [
            [f / aspect, 0.0, 0.0, 0.0],
            [0.0, f, 0.0, 0.0],
            [0.0, 0.0, (far + near) / (near - far), 2.0 * far * near / (near - far)],
            [0.0, 0.0, -1.0, 0.0],
        ],
        dtype=DTYPE,
    )


def camera_from_spherical(pose: PoseLike, intrinsics: Intrinsics) -> CameraTransforms:
    """Mira al origen con up = +z; en los polos el up pasa a +x."""
    eye = eye_position(pose)
    elevation, _, _ = _pose_tensors(pose)
    at_pole = abs(math.cos(math.radians(float(elevation.detach())))) < 1e-6
    up = torch.tensor([1.0, 0.0, 0.0] if at_pole else [0.0, 0.0, 1.0], dtype=DTYPE)
    view = look_at(eye, torch.zeros(3, dtype=DTYPE), up)
    return CameraTransforms(view=view, projection=perspective(intrinsics), eye=eye, intrinsics=intrinsics)


def project_points(points: torch.Tensor, camera: CameraTransforms) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Proyecta puntos del mundo a píxeles.
    Devuelve (xy en píxeles (V, 2), profundidad de vista (V,) positiva delante).
    El centro del píxel (i, j) está en (j + 0.5, i + 0.5).
    """
    homo = torch.cat([points, torch.ones_like(points[:, :1])], dim=1)
    cam = homo @ camera.view.T
    clip = cam @ camera.projection.T
    depth = -cam[:, 2]
    w = clip[:, 3]
    safe_w = torch.where(w.abs() < 1e-12, torch.full_like(w, 1e-12), w)
    ndc = clip[:, :2] / safe_w[:, None]
    width, height = camera.intrinsics.width, camera.intrinsics.height
    sx = (ndc[:, 0] + 1.0) * (width / 2.0)
    sy = (1.0 - ndc[:, 1]) * (height / 2.0)
    return torch.stack([sx, sy], dim=1), depth


# --- POSES Y CONDICIONES RELATIVAS ---


def relative_view(ref: CameraPose, pose: CameraPose) -> RelativeView:
    return RelativeView(
        d_elevation=pose.elevation - ref.elevation,
        d_azimuth=wrap_delta(pose.azimuth - ref.azimuth),
        d_radius=pose.radius - ref.radius,
    )


def compose_view(ref: PoseLike, rel: RelativeView) -> PoseLike:
    """Pose de referencia ⊕ condición relativa (diferenciable si ref es PoseVariables)."""
    if isinstance(ref, PoseVariables):
        return PoseVariables(
            elevation=ref.elevation + rel.d_elevation,
            azimuth=ref.azimuth + rel.d_azimuth,
            radius=ref.radius + rel.d_radius,
        )
    return CameraPose(
        elevation=float(np.clip(ref.elevation + rel.d_elevation, -90.0, 90.0)),
        azimuth=wrap_azimuth(ref.azimuth + rel.d_azimuth),
        radius=ref.radius + rel.d_radius,
        learn_elevation=ref.learn_elevation,
        learn_azimuth=ref.learn_azimuth,
        learn_radius=ref.learn_radius,
    )


def sample_novel_views(
    ref: CameraPose,
    n: int,
    seed: int = 0,
    elevation_range: Tuple[float, float] = (-45.0, 45.0),
) -> List[Tuple[CameraPose, RelativeView]]:
    """
    n poses absolutas (elevación uniforme en el rango, azimut uniforme en [0, 360),
    radio del de referencia), cada una con su condición relativa.
    """
    rng = np.random.default_rng(seed)
    lo, hi = elevation_range
    elevations = rng.uniform(lo, hi, size=n)
    azimuths = rng.uniform(0.0, 360.0, size=n)
    views = []
    for elevation, azimuth in zip(elevations, azimuths):
        pose = CameraPose(elevation=float(elevation), azimuth=float(azimuth), radius=ref.radius)
        views.append((pose, relative_view(ref, pose)))
    return views


def sample_bank_views(
    ref: CameraPose,
    conditions: Sequence[RelativeView],
    n: int,
    seed: int = 0,
) -> List[Tuple[CameraPose, RelativeView]]:
    """Muestreo restringido a las condiciones que cubre un banco finito."""
    if not conditions:
        return []
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(conditions), size=n, replace=len(conditions) < n)
    return [(compose_view(ref, conditions[k]), conditions[k]) for k in picks]


def canonical_pose(radius: float = 2.0) -> CameraPose:
    return CameraPose(elevation=0.0, azimuth=0.0, radius=radius)


def turntable_poses(ref: CameraPose, n: int = 8) -> List[CameraPose]:
    return [
        CameraPose(elevation=ref.elevation, azimuth=wrap_azimuth(ref.azimuth + 360.0 * k / n), radius=ref.radius)
        for k in range(n)
    ]


# --- VARIABLES APRENDIBLES ---


def pose_variables(pose: CameraPose, learnable: bool = True) -> PoseVariables:
    """Escalares torch de la pose; requires_grad según las banderas learn_*."""
    return PoseVariables(
        elevation=torch.tensor(pose.elevation, dtype=DTYPE, requires_grad=learnable and pose.learn_elevation),
        azimuth=torch.tensor(pose.azimuth, dtype=DTYPE, requires_grad=learnable and pose.learn_azimuth),
        radius=torch.tensor(pose.radius, dtype=DTYPE, requires_grad=learnable and pose.learn_radius),
    )


def clamp_pose_(pose: PoseVariables, elevation_clamp: float = 85.0) -> None:
    """Restricción de dominio tras cada paso: |θ| <= clamp, r >= MIN_RADIUS."""
    with torch.no_grad():
        pose.elevation.clamp_(-elevation_clamp, elevation_clamp)
        pose.radius.clamp_(min=MIN_RADIUS)


def pose_from_variables(pose: PoseVariables, template: CameraPose = None) -> CameraPose:
    template = template or CameraPose()
    return CameraPose(
        elevation=float(np.clip(float(pose.elevation.detach()), -90.0, 90.0)),
        azimuth=float(pose.azimuth.detach()),
        radius=max(float(pose.radius.detach()), MIN_RADIUS),
        learn_elevation=template.learn_elevation,
        learn_azimuth=template.learn_azimuth,
        learn_radius=template.learn_radius,
    )
