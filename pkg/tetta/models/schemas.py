import enum
import math
from pathlib import Path
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- ENUMS PARA INTEGRIDAD DE LA CONFIGURACIÓN ---


class StageType(str, enum.Enum):
    PRE_OPTIMIZATION = "A"
    JOINT = "B"


class InitShape(str, enum.Enum):
    MESH = "mesh"
    ELLIPSOID = "ellipsoid"


class SdsWeighting(str, enum.Enum):
    # w(t) = 1 - alpha_bar_t
    NOISE_VARIANCE = "noise_variance"
    UNIFORM = "uniform"


# --- CÁMARA VIRTUAL ---


def wrap_azimuth(value: float) -> float:
    """Envuelve el azimut al intervalo [0, 360)."""
    wrapped = math.fmod(value, 360.0)
    if wrapped < 0.0:
        wrapped += 360.0
    # fmod(-1e-17, 360) + 360 redondea a 360.0
    return 0.0 if wrapped >= 360.0 else wrapped


def wrap_delta(value: float) -> float:
    """Envuelve una diferencia angular al intervalo (-180, 180]."""
    wrapped = wrap_azimuth(value)
    return wrapped - 360.0 if wrapped > 180.0 else wrapped


class CameraPose(BaseModel):
    """
    Extrínsecos esféricos de la cámara virtual (grados / unidades de mundo).
    Las banderas learn_* indican qué componentes se optimizan.
    """

    model_config = ConfigDict(frozen=True)

    elevation: float = Field(0.0, ge=-90.0, le=90.0)
    azimuth: float = 0.0
    radius: float = Field(2.0, gt=0.0)
    learn_elevation: bool = True
    learn_azimuth: bool = True
    learn_radius: bool = True

    @field_validator("azimuth")
    @classmethod
    def _wrap_azimuth(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("el azimut debe ser finito")
        return wrap_azimuth(value)


class Intrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fov: float = Field(45.0, gt=0.0, lt=180.0)
    width: int = Field(128, ge=1)
    height: int = Field(128, ge=1)
    near: float = Field(0.1, gt=0.0)
    far: float = 100.0

    @model_validator(mode="after")
    def _check_planes(self) -> "Intrinsics":
        if not self.near < self.far:
            raise ValueError("near debe ser menor que far")
        return self


class RelativeView(BaseModel):
    """Condición relativa (Δθ, Δφ, Δr) respecto a la vista de referencia."""

    model_config = ConfigDict(frozen=True)

    d_elevation: float = 0.0
    d_azimuth: float = 0.0
    d_radius: float = 0.0

    @field_validator("d_elevation", "d_azimuth", "d_radius")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("las diferencias de vista deben ser finitas")
        return value

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.d_elevation, self.d_azimuth, self.d_radius)


# --- PESOS Y CONFIGURACIÓN DE LA ADAPTACIÓN ---


class LossWeights(BaseModel):
    sds: float = Field(1.0, ge=0.0)
    photo: float = Field(100.0, ge=0.0)
    mask: float = Field(50.0, ge=0.0)
    # Pondera la media de L_reg por arista, no la suma
    reg: float = Field(0.1, ge=0.0)
    lap: float = Field(10.0, ge=0.0)

    @model_validator(mode="after")
    def _at_least_one(self) -> "LossWeights":
        if max(self.sds, self.photo, self.mask, self.reg, self.lap) <= 0.0:
            raise ValueError("al menos un peso de pérdida debe ser positivo")
        return self


class TTAConfig(BaseModel):
    # Rejilla tetraédrica (celdas por eje, semiancho de la caja centrada)
    grid_resolution: int = Field(64, ge=2)
    grid_bound: float = Field(1.0, gt=0.0)

    # Ajuste inicial del SDF a la malla gruesa
    fit_points: int = Field(20000, ge=0)
    fit_iters: int = Field(100, ge=0)
    fit_lr: float = Field(1e-3, gt=0.0)

    # Etapas
    stage_a_iters: int = Field(200, ge=0)
    stage_b_iters: int = Field(2000, ge=0)
    lr_geometry: float = Field(1e-3, gt=0.0)
    lr_texture: float = Field(1e-3, gt=0.0)
    # Paso de la cámara: radianes para θ y φ, unidades de mundo para r
    lr_camera: float = Field(1e-2, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    clip_norm: float = Field(1.0, gt=0.0)
    views_per_iter: int = Field(8, ge=0)
    weights: LossWeights = LossWeights()

    # Cámara
    intrinsics: Intrinsics = Intrinsics()
    calibrate_camera: bool = True
    canonical_view: bool = False
    elevation_range: Tuple[float, float] = (-45.0, 45.0)
    elevation_clamp: float = Field(85.0, gt=0.0, le=90.0)

    # Inicialización de la forma
    init_shape: InitShape = InitShape.MESH
    ellipsoid_radii: Tuple[float, float, float] = (0.5, 0.4, 0.35)

    # Prior de difusión
    diffusion_steps: int = Field(1000, ge=1)
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    t_range: Tuple[float, float] = (0.02, 0.98)
    sds_weighting: SdsWeighting = SdsWeighting.NOISE_VARIANCE

    # Render
    soft_sigma: float = Field(1.5, gt=0.0)
    smooth_normals: bool = True

    # Seguimiento de métricas contra la malla real (0 = desactivado)
    eval_every: int = Field(0, ge=0)
    eval_points: int = Field(10000, ge=1)

    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "TTAConfig":
        lo, hi = self.elevation_range
        if not -90.0 <= lo <= hi <= 90.0:
            raise ValueError("elevation_range fuera de [-90, 90]")
        t_lo, t_hi = self.t_range
        if not 0.0 <= t_lo <= t_hi <= 1.0:
            raise ValueError("t_range debe cumplir 0 <= lo <= hi <= 1")
        return self


# --- EXPERIMENTO COMPLETO (CLI) ---


class InputPaths(BaseModel):
    coarse_mesh: Optional[str] = None
    reference_image: Optional[str] = None
    reference_mask: Optional[str] = None
    environment: str = "uniform:1.0"
    gt_mesh: Optional[str] = None
    oracle_bank: Optional[str] = None
    predictor_endpoint: Optional[str] = None


class SyntheticReference(BaseModel):
    """Pose real con la que se sintetiza la imagen de referencia desde gt_mesh."""

    pose: CameraPose = CameraPose()
    albedo: Tuple[float, float, float] = (0.8, 0.5, 0.3)
    roughness: float = Field(1.0, ge=0.0, le=1.0)
    metalness: float = Field(0.0, ge=0.0, le=1.0)


class ExperimentConfig(BaseModel):
    inputs: InputPaths = InputPaths()
    camera: CameraPose = CameraPose()
    synthetic: Optional[SyntheticReference] = None
    tta: TTAConfig = TTAConfig()
    output_dir: str = "runs/latest"
    seed: int = 0
    # Directorio del archivo de configuración (para rutas relativas)
    base_dir: Optional[Path] = Field(default=None, exclude=True)
