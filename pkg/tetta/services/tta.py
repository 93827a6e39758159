"""
Adaptación en tiempo de prueba (TTA) en dos etapas.

Etapa A (pre-optimización): sólo el radio de la cámara contra L_mask en la vista
de referencia, con la geometría congelada tras el ajuste inicial.
Etapa B (conjunta): s, Δv, k_PBR y la pose de referencia contra
λ_photo L_photo + λ_mask L_mask + λ_sds L_SDS + λ_reg L_reg + λ_lap L_lap.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from tetta.core.exceptions import ConfigurationError, ContractError, NonFiniteLossError
from tetta.models.domain import DTYPE, FieldParams, MaterialSample, PoseVariables, TetGrid, TriangleMesh, as_tensor
from tetta.models.schemas import CameraPose, InitShape, RelativeView, StageType, TTAConfig
from tetta.services.diff_render import render
from tetta.services.envlight import EnvironmentLight
from tetta.services.fixtures import ellipsoid_mesh
from tetta.services.geometry_init import fit_field_to_mesh, sample_surface_points
from tetta.services.losses import laplacian_loss, mask_loss, photometric_loss, sdf_regularizer
from tetta.services.metrics import chamfer_distance
from tetta.services.optimizer import OptimizerState, adamw_step
from tetta.services.priors import (
    Condition,
    DiffusionSchedule,
    NoisePredictor,
    make_schedule,
    random_noise,
    sample_timestep,
    sds_gradient,
    sds_loss,
)
from tetta.services.tet_grid import extract_surface, grid_for_bound
from tetta.services.virtual_camera import (
    canonical_pose,
    clamp_pose_,
    compose_view,
    pose_from_variables,
    pose_variables,
    sample_bank_views,
    sample_novel_views,
)

logger = logging.getLogger(__name__)

GEOMETRY_PARAMS = ("sdf", "deform")
TEXTURE_PARAMS = ("kd", "roughness", "metalness", "kn")
POSE_PARAMS = ("elevation", "azimuth", "radius")
LOSS_TERMS = ("photo", "mask", "sds", "reg", "lap")
HISTORY_COLUMNS = (
    "stage", "iteration", "total", *LOSS_TERMS,
    "elevation", "azimuth", "radius", "grad_norm", "faces", "chamfer",
)


@dataclass
class TTAInputs:
    reference_image: torch.Tensor  # (H, W, 3) RGB lineal con fondo blanco
    reference_mask: torch.Tensor  # (H, W) en {0, 1}
    pose: CameraPose
    env: EnvironmentLight
    predictor: Optional[NoisePredictor] = None
    coarse_mesh: Optional[TriangleMesh] = None
    # Campo ya ajustado (init-fit); tiene prioridad sobre coarse_mesh
    field: Optional[FieldParams] = None
    # Malla real para el seguimiento del Chamfer (eval_every)
    gt_mesh: Optional[TriangleMesh] = None


@dataclass
class TTAResult:
    mesh: TriangleMesh
    pose: CameraPose
    field: FieldParams
    grid: TetGrid
    history: pd.DataFrame
    initial_pose: CameraPose
    initial_chamfer: Optional[float] = None
    final_chamfer: Optional[float] = None
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def materials(self) -> Optional[MaterialSample]:
        return self.mesh.attributes

    def stage_losses(self) -> Dict[str, float]:
        """Pérdida total de la última iteración de cada etapa."""
        if self.history.empty:
            return {}
        last = self.history.groupby("stage")["total"].last()
        return {f"stage_{stage}": float(value) for stage, value in last.items()}


# --- PREPARACIÓN ---


def _check_inputs(config: TTAConfig, inputs: TTAInputs) -> Tuple[torch.Tensor, torch.Tensor]:
    image = as_tensor(inputs.reference_image)
    mask = as_tensor(inputs.reference_mask)
    expected = (config.intrinsics.height, config.intrinsics.width)
    if tuple(image.shape) != (*expected, 3):
        raise ContractError(f"Imagen de referencia {tuple(image.shape)}, se esperaba {(*expected, 3)}")
    if tuple(mask.shape) != expected:
        raise ContractError(f"Máscara de referencia {tuple(mask.shape)}, se esperaba {expected}")
    if inputs.field is None and inputs.coarse_mesh is None and config.init_shape == InitShape.MESH:
        raise ConfigurationError("Se requiere una malla gruesa (o un campo ajustado) con init_shape = mesh")
    return image, mask


def _initial_field(config: TTAConfig, inputs: TTAInputs, grid: TetGrid) -> FieldParams:
    if config.init_shape == InitShape.ELLIPSOID:
        logger.info(f"Inicializando con un elipsoide de semiejes {config.ellipsoid_radii}")
        return fit_field_to_mesh(
            grid, ellipsoid_mesh(config.ellipsoid_radii), config.fit_points, config.fit_iters, config.fit_lr, config.seed
        )
    if inputs.field is not None:
        if inputs.field.num_vertices != grid.num_vertices:
            raise ContractError(
                f"El campo ajustado tiene {inputs.field.num_vertices} vértices, la rejilla {grid.num_vertices}"
            )
        return inputs.field.detach()
    return fit_field_to_mesh(grid, inputs.coarse_mesh, config.fit_points, config.fit_iters, config.fit_lr, config.seed)


def _initial_pose(config: TTAConfig, pose: CameraPose) -> CameraPose:
    if not config.canonical_view:
        return pose
    canonical = canonical_pose(pose.radius)
    return canonical.model_copy(
        update={
            "learn_elevation": pose.learn_elevation,
            "learn_azimuth": pose.learn_azimuth,
            "learn_radius": pose.learn_radius,
        }
    )


class _ChamferTracker:
    """Chamfer en el marco del mundo contra la malla real (sin alineación)."""

    def __init__(self, gt_mesh: Optional[TriangleMesh], n_points: int, seed: int):
        self.n_points = n_points
        self.seed = seed
        self.gt_points = None if gt_mesh is None else sample_surface_points(gt_mesh, n_points, seed=seed + 1).points

    @property
    def enabled(self) -> bool:
        return self.gt_points is not None

    def __call__(self, mesh: TriangleMesh) -> float:
        if mesh.is_empty():
            return math.inf
        points = sample_surface_points(mesh.detach(), self.n_points, seed=self.seed).points
        return chamfer_distance(points, self.gt_points)


def _pose_values(pose: PoseVariables) -> Dict[str, float]:
    return {name: float(value.detach()) for name, value in pose.parameters().items()}


def _abort(stage: StageType, iteration: int, terms: Dict[str, float], pose: PoseVariables, grad_norm: float):
    snapshot = {
        "stage": stage.value,
        "iteration": iteration,
        "losses": terms,
        "pose": _pose_values(pose),
        "grad_norm": grad_norm,
    }
    logger.error(f"Pérdida no finita en la etapa {stage.value}, iteración {iteration}: {terms}")
    raise NonFiniteLossError(f"Pérdida no finita en la etapa {stage.value}, iteración {iteration}", snapshot)


# --- ETAPA A ---


def _stage_a(
    config: TTAConfig,
    mesh: TriangleMesh,
    pose: PoseVariables,
    reference_mask: torch.Tensor,
    env: EnvironmentLight,
    history: List[dict],
) -> None:
    if config.stage_a_iters == 0:
        return
    if not pose.radius.requires_grad:
        logger.info("Etapa A omitida: el radio de la cámara no es aprendible")
        return
    if mesh.is_empty():
        raise ContractError("La superficie inicial está vacía; no hay silueta para la pre-optimización")

    frozen = mesh.detach()
    params = {"radius": pose.radius}
    state = OptimizerState(lr=config.lr_camera, clip_norm=config.clip_norm)
    logger.info(f"Etapa A: {config.stage_a_iters} iteraciones sobre el radio (r0 = {float(pose.radius):.4f})")
    for it in range(config.stage_a_iters):
        out = render(frozen, pose, config.intrinsics, env, sigma=config.soft_sigma, smooth_normals=config.smooth_normals)
        loss = mask_loss(out.mask, reference_mask)
        value = float(loss.detach())
        terms = {"mask": value}
        if not math.isfinite(value):
            _abort(StageType.PRE_OPTIMIZATION, it, terms, pose, state.last_grad_norm)
        (grad,) = torch.autograd.grad(loss, [pose.radius], allow_unused=True)
        adamw_step(params, {"radius": grad}, state, constraints=(lambda: clamp_pose_(pose, config.elevation_clamp),))
        history.append({
            "stage": StageType.PRE_OPTIMIZATION.value,
            "iteration": it,
            "total": value,
            **terms,
            **_pose_values(pose),
            "grad_norm": state.last_grad_norm,
            "faces": frozen.num_faces,
        })
        logger.debug(f"Etapa A it {it}: L_mask={value:.6f} r={float(pose.radius):.5f}")
    logger.info(f"Etapa A terminada: r = {float(pose.radius):.5f}")


# --- ETAPA B ---


def joint_optimizer(config: TTAConfig) -> OptimizerState:
    """Grupos de la etapa B: geometría, textura y cámara (sin decaimiento en la pose)."""
    state = OptimizerState(
        lr=config.lr_geometry, clip_norm=config.clip_norm, weight_decay=config.weight_decay, no_decay=POSE_PARAMS
    )
    state.set_group_lr(GEOMETRY_PARAMS, config.lr_geometry)
    state.set_group_lr(TEXTURE_PARAMS, config.lr_texture)
    state.set_group_lr(("radius",), config.lr_camera)
    # θ y φ viven en grados: lr_camera es un paso en radianes
    state.set_group_lr(("elevation", "azimuth"), math.degrees(config.lr_camera))
    return state


def _novel_views(
    config: TTAConfig, predictor: NoisePredictor, current: CameraPose, seed: int
) -> List[Tuple[CameraPose, RelativeView]]:
    conditions = getattr(predictor, "conditions", None)
    if conditions is not None:
        return sample_bank_views(current, conditions, config.views_per_iter, seed=seed)
    return sample_novel_views(current, config.views_per_iter, seed=seed, elevation_range=config.elevation_range)


def _sds_term(
    config: TTAConfig,
    mesh: TriangleMesh,
    pose: PoseVariables,
    template: CameraPose,
    reference_image: torch.Tensor,
    env: EnvironmentLight,
    predictor: NoisePredictor,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    seed: int,
) -> torch.Tensor:
    """Suma de los sustitutos SDS de las vistas nuevas, en orden fijo, promediada por vista."""
    views = _novel_views(config, predictor, pose_from_variables(pose, template), seed)
    if not views:
        return torch.zeros((), dtype=DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for k, (_, rel) in enumerate(views):
        out = render(
            mesh, compose_view(pose, rel), config.intrinsics, env,
            sigma=config.soft_sigma, smooth_normals=config.smooth_normals,
        )
        t = sample_timestep(schedule, rng, config.t_range)
        eps = random_noise(out.rgb.shape, seed * 1009 + k)
        grad = sds_gradient(out.rgb, Condition(reference=reference_image, view=rel), t, eps, predictor, schedule)
        total = total + sds_loss(out.rgb, grad)
    return total / len(views)


def _stage_b(
    config: TTAConfig,
    grid: TetGrid,
    field_params: FieldParams,
    pose: PoseVariables,
    template: CameraPose,
    reference_image: torch.Tensor,
    reference_mask: torch.Tensor,
    env: EnvironmentLight,
    predictor: Optional[NoisePredictor],
    tracker: _ChamferTracker,
    history: List[dict],
) -> None:
    if config.stage_b_iters == 0:
        return
    weights = config.weights
    use_sds = predictor is not None and weights.sds > 0.0 and config.views_per_iter > 0
    if predictor is None and weights.sds > 0.0:
        logger.warning("Etapa B sin predictor de ruido: se omite L_SDS")
    schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end, config.sds_weighting)
    rng = np.random.default_rng(config.seed)

    params = dict(field_params.parameters())
    params.update({name: value for name, value in pose.parameters().items() if value.requires_grad})
    state = joint_optimizer(config)
    constraints = (
        lambda: field_params.project_(grid),
        lambda: clamp_pose_(pose, config.elevation_clamp),
    )
    logger.info(
        f"Etapa B: {config.stage_b_iters} iteraciones, {config.views_per_iter} vistas por iteración, "
        f"cámara {'aprendible' if len(params) > len(field_params.parameters()) else 'congelada'}"
    )

    for it in range(config.stage_b_iters):
        mesh = extract_surface(grid, field_params)
        if mesh.is_empty():
            raise ContractError(f"La superficie quedó vacía en la iteración {it} de la etapa B")

        # 1. Vista de referencia
        out = render(mesh, pose, config.intrinsics, env, sigma=config.soft_sigma, smooth_normals=config.smooth_normals)
        terms = {
            "photo": photometric_loss(out.rgb, reference_image),
            "mask": mask_loss(out.mask, reference_mask),
        }

        # 2. Vistas nuevas (prior multivista)
        if use_sds:
            terms["sds"] = _sds_term(
                config, mesh, pose, template, reference_image, env, predictor, schedule, rng, config.seed + it
            )

        # 3. Regularizadores del SDF
        terms["reg"] = sdf_regularizer(field_params.sdf, grid.edges, reduction="mean")
        terms["lap"] = laplacian_loss(field_params.sdf, grid)

        total = sum(getattr(weights, name) * value for name, value in terms.items())
        values = {name: float(value.detach()) for name, value in terms.items()}
        total_value = float(total.detach())
        if not math.isfinite(total_value):
            _abort(StageType.JOINT, it, values, pose, state.last_grad_norm)

        names = list(params)
        grads = torch.autograd.grad(total, [params[n] for n in names], allow_unused=True)
        adamw_step(params, dict(zip(names, grads)), state, constraints=constraints)

        row = {
            "stage": StageType.JOINT.value,
            "iteration": it,
            "total": total_value,
            **values,
            **_pose_values(pose),
            "grad_norm": state.last_grad_norm,
            "faces": mesh.num_faces,
        }
        if tracker.enabled and config.eval_every and (it + 1) % config.eval_every == 0:
            row["chamfer"] = tracker(extract_surface(grid, field_params.detach()))
            logger.info(f"Etapa B it {it}: Chamfer al real {row['chamfer']:.6f}")
        history.append(row)
        logger.debug(f"Etapa B it {it}: total={total_value:.6f} {values}")


# --- ORQUESTACIÓN ---


def run_tta(config: TTAConfig, inputs: TTAInputs) -> TTAResult:
    """Ejecuta el ajuste inicial, la etapa A y la etapa B; devuelve malla, pose e historial."""
    torch.manual_seed(config.seed)
    reference_image, reference_mask = _check_inputs(config, inputs)
    env = inputs.env if inputs.env.is_prefiltered else inputs.env.prefilter()
    timings: Dict[str, float] = {}

    # 1. Rejilla y campo inicial
    start = time.perf_counter()
    grid = grid_for_bound(config.grid_resolution, config.grid_bound)
    field_params = _initial_field(config, inputs, grid)
    field_params.requires_grad_(False)
    timings["fit"] = time.perf_counter() - start

    tracker = _ChamferTracker(inputs.gt_mesh, config.eval_points, config.seed)
    initial_chamfer = None
    if tracker.enabled:
        initial_chamfer = tracker(extract_surface(grid, field_params))
        logger.info(f"Chamfer inicial al real: {initial_chamfer:.6f}")

    initial_pose = _initial_pose(config, inputs.pose)
    history: List[dict] = []

    # 2. Etapa A: sólo el radio
    start = time.perf_counter()
    pose = pose_variables(initial_pose, learnable=False)
    pose.radius.requires_grad_(initial_pose.learn_radius)
    _stage_a(config, extract_surface(grid, field_params), pose, reference_mask, env, history)
    timings["stage_a"] = time.perf_counter() - start

    # 3. Etapa B: forma, textura y pose
    start = time.perf_counter()
    template = pose_from_variables(pose, initial_pose)
    pose = pose_variables(template, learnable=config.calibrate_camera)
    field_params = field_params.detach().requires_grad_(True)
    _stage_b(
        config, grid, field_params, pose, template, reference_image, reference_mask,
        env, inputs.predictor, tracker, history,
    )
    timings["stage_b"] = time.perf_counter() - start

    final_field = field_params.detach()
    final_mesh = extract_surface(grid, final_field).detach()
    final_pose = pose_from_variables(pose, template)
    final_chamfer = tracker(final_mesh) if tracker.enabled else None

    frame = pd.DataFrame(history, columns=list(HISTORY_COLUMNS))
    logger.info(
        f"TTA terminada: {len(frame)} iteraciones, {final_mesh.num_faces} caras, "
        f"pose (θ={final_pose.elevation:.3f}, φ={final_pose.azimuth:.3f}, r={final_pose.radius:.4f})"
    )
    return TTAResult(
        mesh=final_mesh,
        pose=final_pose,
        field=final_field,
        grid=grid,
        history=frame,
        initial_pose=initial_pose,
        initial_chamfer=initial_chamfer,
        final_chamfer=final_chamfer,
        timings=timings,
    )
