"""
Orquestación de un experimento: resuelve entradas, sintetiza la referencia
cuando se pide, elige el predictor y ejecuta la adaptación con su reporte.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch

from tetta.core.exceptions import ConfigurationError
from tetta.models.domain import MaterialSample, TriangleMesh, as_tensor
from tetta.models.schemas import CameraPose, ExperimentConfig, SyntheticReference, TTAConfig
from tetta.services.config_io import load_environment, resolve_mesh, resolve_path
from tetta.services.diff_render import render
from tetta.services.envlight import EnvironmentLight
from tetta.services.image_io import load_image, load_mask
from tetta.services.predictor_bridge import external_predictor
from tetta.services.priors import NoisePredictor, RenderedViewBank, ViewBank, make_schedule, oracle_predictor
from tetta.services.reporting import ReportBundle, write_report_bundle
from tetta.services.tta import TTAInputs, run_tta

logger = logging.getLogger(__name__)


@dataclass
class PreparedExperiment:
    inputs: TTAInputs
    env: EnvironmentLight
    gt_mesh: Optional[TriangleMesh] = None
    # Pose real usada para sintetizar la referencia (None con imágenes externas)
    true_pose: Optional[CameraPose] = None


def with_material(mesh: TriangleMesh, synthetic: SyntheticReference) -> TriangleMesh:
    """Malla real con el material constante de la referencia sintética."""
    material = MaterialSample.constant(
        mesh.num_vertices, kd=synthetic.albedo, roughness=synthetic.roughness, metalness=synthetic.metalness
    )
    return mesh.with_attributes(material)


def synthesize_reference(
    gt_mesh: TriangleMesh, synthetic: SyntheticReference, tta: TTAConfig, env: EnvironmentLight
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Imagen RGB lineal y máscara binaria de la malla real en la pose verdadera."""
    with torch.no_grad():
        out = render(
            with_material(gt_mesh, synthetic), synthetic.pose, tta.intrinsics, env,
            sigma=tta.soft_sigma, smooth_normals=tta.smooth_normals,
        )
    mask = (out.mask > 0.5).to(out.rgb.dtype)
    logger.info(f"Referencia sintética: {int(mask.sum())} píxeles de objeto en la pose {synthetic.pose.model_dump()}")
    return out.rgb.detach(), mask


def build_predictor(
    config: ExperimentConfig,
    env: EnvironmentLight,
    gt_mesh: Optional[TriangleMesh],
    record: Optional[Path] = None,
) -> Optional[NoisePredictor]:
    """
    Orden de preferencia:
    1. Endpoint externo (tcp://, http(s)://, replay://).
    2. Banco de vistas en disco con el oráculo analítico.
    3. Oráculo sobre renders perezosos de la malla real (referencia sintética).
    """
    inputs, tta = config.inputs, config.tta
    if inputs.predictor_endpoint:
        return external_predictor(inputs.predictor_endpoint, record=record)
    schedule = make_schedule(tta.diffusion_steps, tta.beta_start, tta.beta_end, tta.sds_weighting)
    if inputs.oracle_bank:
        bank = ViewBank.load(resolve_path(inputs.oracle_bank, config.base_dir))
        return oracle_predictor(bank, schedule)
    if config.synthetic is not None and gt_mesh is not None:
        bank = RenderedViewBank(
            with_material(gt_mesh, config.synthetic), config.synthetic.pose, tta.intrinsics, env,
            sigma=tta.soft_sigma, smooth_normals=tta.smooth_normals,
        )
        return oracle_predictor(bank, schedule)
    logger.warning("No hay predictor de ruido configurado; la etapa B no usará L_SDS")
    return None


def prepare_experiment(config: ExperimentConfig, record: Optional[Path] = None) -> PreparedExperiment:
    inputs, base = config.inputs, config.base_dir
    env = load_environment(inputs.environment, base)
    gt_mesh = resolve_mesh(inputs.gt_mesh, base) if inputs.gt_mesh else None

    # 1. Referencia
    if config.synthetic is not None:
        if gt_mesh is None:
            raise ConfigurationError("La referencia sintética requiere inputs.gt_mesh")
        image, mask = synthesize_reference(gt_mesh, config.synthetic, config.tta, env)
        true_pose = config.synthetic.pose
    else:
        if not inputs.reference_image or not inputs.reference_mask:
            raise ConfigurationError("Sin referencia sintética se requieren inputs.reference_image y inputs.reference_mask")
        image = as_tensor(load_image(resolve_path(inputs.reference_image, base)))
        mask = as_tensor(load_mask(resolve_path(inputs.reference_mask, base)))
        true_pose = None

    # 2. Malla gruesa y predictor
    coarse = resolve_mesh(inputs.coarse_mesh, base) if inputs.coarse_mesh else None
    predictor = build_predictor(config, env, gt_mesh, record)

    tta_inputs = TTAInputs(
        reference_image=image,
        reference_mask=mask,
        pose=config.camera,
        env=env,
        predictor=predictor,
        coarse_mesh=coarse,
        gt_mesh=gt_mesh,
    )
    return PreparedExperiment(inputs=tta_inputs, env=env, gt_mesh=gt_mesh, true_pose=true_pose)


def run_reconstruction(
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    record: Optional[Path] = None,
    turntable_frames: int = 8,
) -> ReportBundle:
    out_dir = Path(out_dir) if out_dir is not None else resolve_path(config.output_dir, config.base_dir)
    prepared = prepare_experiment(config, record)
    logger.info(f"Reconstrucción iniciada: salida en {out_dir}")
    result = run_tta(config.tta, prepared.inputs)
    return write_report_bundle(
        result,
        out_dir,
        config,
        prepared.inputs.reference_image,
        prepared.env,
        gt_mesh=prepared.gt_mesh,
        turntable_frames=turntable_frames,
        eval_points=config.tta.eval_points,
    )
