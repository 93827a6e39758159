"""
ReportBundle: artefactos de una reconstrucción.

Las métricas se calculan sobre los artefactos ya persistidos (malla releída,
pose.json, reference.pfm), de modo que `eval` y `render` las reproducen.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from tetta.core.storage import atomic_write_text
from tetta.models.domain import TriangleMesh
from tetta.models.schemas import CameraPose, ExperimentConfig, Intrinsics
from tetta.services.config_io import save_experiment_config
from tetta.services.diff_render import render
from tetta.services.envlight import EnvironmentLight
from tetta.services.image_io import load_image, save_image
from tetta.services.mesh_io import load_mesh, save_mesh
from tetta.services.metrics import evaluate_meshes, psnr
from tetta.services.tta import TTAResult
from tetta.services.virtual_camera import turntable_poses
from tetta.services.visualizer import visualizer

logger = logging.getLogger(__name__)


@dataclass
class ReportBundle:
    out_dir: Path
    metrics: Dict[str, Any]
    paths: Dict[str, Path] = field(default_factory=dict)


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def write_json(data: Dict[str, Any], path: Path) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def save_pose(pose: CameraPose, path: Path) -> Path:
    return write_json(pose.model_dump(), path)


def load_pose(path: Path) -> CameraPose:
    return CameraPose.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


def render_rgb(mesh: TriangleMesh, pose: CameraPose, intrinsics: Intrinsics, env: EnvironmentLight, **kwargs) -> np.ndarray:
    with torch.no_grad():
        out = render(mesh, pose, intrinsics, env, **kwargs)
    return out.rgb.clamp(0.0, 1.0).numpy()


def reference_psnr(
    mesh: TriangleMesh,
    pose: CameraPose,
    reference: np.ndarray,
    intrinsics: Intrinsics,
    env: EnvironmentLight,
    sigma: float,
    smooth_normals: bool,
) -> float:
    rendered = render_rgb(mesh, pose, intrinsics, env, sigma=sigma, smooth_normals=smooth_normals)
    return psnr(rendered, np.clip(reference, 0.0, 1.0))


def write_report_bundle(
    result: TTAResult,
    out_dir: Path,
    config: ExperimentConfig,
    reference_image: torch.Tensor,
    env: EnvironmentLight,
    gt_mesh: Optional[TriangleMesh] = None,
    turntable_frames: int = 8,
    eval_points: int = 10000,
    tau: float = 0.05,
) -> ReportBundle:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tta = config.tta
    paths: Dict[str, Path] = {}

    # 1. Artefactos primarios
    paths["config"] = save_experiment_config(config, out_dir / "config.toml")
    paths["mesh"] = save_mesh(result.mesh, out_dir / "mesh.obj")
    paths["pose"] = save_pose(result.pose, out_dir / "pose.json")
    paths["reference"] = save_image(reference_image, out_dir / "reference.pfm")
    save_image(reference_image, out_dir / "reference.png")

    mesh = load_mesh(paths["mesh"])
    pose = load_pose(paths["pose"])
    reference = load_image(paths["reference"])

    # 2. Métricas sobre lo persistido
    metrics: Dict[str, Any] = {
        "iterations": int(len(result.history)),
        "vertices": mesh.num_vertices,
        "faces": mesh.num_faces,
        "pose": pose.model_dump(include={"elevation", "azimuth", "radius"}),
        "initial_pose": result.initial_pose.model_dump(include={"elevation", "azimuth", "radius"}),
        "stage_losses": result.stage_losses(),
        "seed": tta.seed,
    }
    metrics["psnr_reference"] = _finite_or_none(
        reference_psnr(mesh, pose, reference, tta.intrinsics, env, tta.soft_sigma, tta.smooth_normals)
    )
    if gt_mesh is not None and not mesh.is_empty():
        evaluation = evaluate_meshes(mesh, gt_mesh, n_points=eval_points, tau=tau, seed=tta.seed)
        metrics.update(evaluation.as_dict())
        metrics["initial_chamfer_world"] = _finite_or_none(result.initial_chamfer)
        metrics["final_chamfer_world"] = _finite_or_none(result.final_chamfer)
    paths["metrics"] = write_json(metrics, out_dir / "metrics.json")
    paths["timings"] = write_json({k: round(v, 3) for k, v in result.timings.items()}, out_dir / "timings.json")

    # 3. Historial y curvas
    paths["history"] = atomic_write_text(out_dir / "history.csv", result.history.to_csv(index=False))
    paths["loss_curves"] = atomic_write_text(out_dir / "loss_curves.html", visualizer.report_html(result.history))

    # 4. Renders
    paths["render"] = save_image(
        render_rgb(mesh, pose, tta.intrinsics, env, sigma=tta.soft_sigma, smooth_normals=tta.smooth_normals),
        out_dir / "render.png",
    )
    for k, frame_pose in enumerate(turntable_poses(pose, turntable_frames)):
        save_image(
            render_rgb(mesh, frame_pose, tta.intrinsics, env, sigma=tta.soft_sigma, smooth_normals=tta.smooth_normals),
            out_dir / "turntable" / f"frame_{k:03d}.png",
        )
    if turntable_frames:
        paths["turntable"] = out_dir / "turntable"

    logger.info(f"Reporte escrito en {out_dir}: {json.dumps({k: metrics.get(k) for k in ('chamfer', 'f_score', 'psnr_reference')})}")
    return ReportBundle(out_dir=out_dir, metrics=metrics, paths=paths)
