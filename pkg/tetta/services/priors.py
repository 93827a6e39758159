"""
Prior multivista por Score-Distillation Sampling.

g = w(t) (ε̂(z_t; y, Δ, t) - ε) con z_t = √ᾱ_t x + √(1-ᾱ_t) ε y codificador
identidad (z = x). El predictor de ruido es una interfaz: el oráculo analítico
(construido desde vistas reales) o un puente externo (ver predictor_bridge).
"""
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
import torch

from tetta.core.exceptions import ConfigurationError, ContractError, ViewLookupError
from tetta.core.storage import atomic_write_bytes
from tetta.models.domain import DTYPE, TriangleMesh, as_tensor
from tetta.models.schemas import CameraPose, Intrinsics, RelativeView, SdsWeighting, wrap_delta
from tetta.services.diff_render import render
from tetta.services.envlight import EnvironmentLight
from tetta.services.virtual_camera import compose_view

logger = logging.getLogger(__name__)


# --- CALENDARIO DE DIFUSIÓN ---


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # (T,), β_t para t = 1..T
    alpha_bars: np.ndarray  # (T,), ᾱ_t = Π_{s<=t} (1 - β_s)
    weighting: SdsWeighting = SdsWeighting.NOISE_VARIANCE

    @property
    def steps(self) -> int:
        return int(self.betas.shape[0])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ContractError(f"t={t} fuera de [1, {self.steps}]")

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def weight(self, t: int) -> float:
        """w(t) = 1 - ᾱ_t (o 1 con ponderación uniforme)."""
        if self.weighting == SdsWeighting.UNIFORM:
            self._check_t(t)
            return 1.0
        return 1.0 - self.alpha_bar(t)


def make_schedule(
    steps: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 1.2e-2,
    weighting: SdsWeighting = SdsWeighting.NOISE_VARIANCE,
) -> DiffusionSchedule:
    """Calendario lineal de β."""
    if steps < 1:
        raise ConfigurationError(f"El número de pasos debe ser >= 1, se recibió {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"Se requiere 0 < β_start <= β_end < 1, se recibió ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars, weighting=SdsWeighting(weighting))


def sample_timestep(
    schedule: DiffusionSchedule, rng: np.random.Generator, t_range: Tuple[float, float] = (0.02, 0.98)
) -> int:
    """t entero uniforme en [lo·T, hi·T] (acotado a [1, T])."""
    lo = min(max(1, math.ceil(t_range[0] * schedule.steps)), schedule.steps)
    hi = max(lo, min(schedule.steps, math.floor(t_range[1] * schedule.steps)))
    return int(rng.integers(lo, hi + 1))


# --- INTERFAZ DEL PREDICTOR ---


@dataclass(frozen=True)
class Condition:
    """Condición del predictor: imagen de referencia y vista relativa."""

    reference: torch.Tensor  # (H, W, 3)
    view: RelativeView


@runtime_checkable
class NoisePredictor(Protocol):
    def predict(self, z_t: torch.Tensor, condition: Condition, t: int) -> torch.Tensor:
        ...


def sds_gradient(
    x: torch.Tensor,
    condition: Condition,
    t: int,
    eps: torch.Tensor,
    predictor: NoisePredictor,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """Gradiente por píxel g = w(t) (ε̂ - ε) sobre la imagen x (sin grafo)."""
    if x.shape != eps.shape:
        raise ContractError(f"Forma de la imagen {tuple(x.shape)} != ruido {tuple(eps.shape)}")
    alpha_bar = schedule.alpha_bar(t)
    with torch.no_grad():
        z_t = math.sqrt(alpha_bar) * x.detach() + math.sqrt(1.0 - alpha_bar) * eps
        eps_hat = as_tensor(predictor.predict(z_t, condition, t))
        if eps_hat.shape != x.shape:
            raise ContractError(f"El predictor devolvió forma {tuple(eps_hat.shape)}, se esperaba {tuple(x.shape)}")
        return schedule.weight(t) * (eps_hat - eps)


def sds_loss(x: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Pérdida sustituta 0.5 ||g||² cuyo gradiente respecto a x es exactamente g."""
    target = (x - grad).detach()
    return 0.5 * ((x - target) ** 2).sum()


# --- BANCOS DE VISTAS Y ORÁCULO ---


def _view_distance(a: RelativeView, b: RelativeView) -> Tuple[float, float]:
    angular = math.hypot(a.d_elevation - b.d_elevation, wrap_delta(a.d_azimuth - b.d_azimuth))
    return angular, abs(a.d_radius - b.d_radius)


class ViewBank:
    """Vistas reales x_gt indexadas por condición relativa (búsqueda del más cercano)."""

    def __init__(
        self,
        entries: Sequence[Tuple[RelativeView, np.ndarray]] = (),
        angle_tolerance: float = 1.0,
        radius_tolerance: float = 1e-3,
    ):
        self.angle_tolerance = angle_tolerance
        self.radius_tolerance = radius_tolerance
        self._views: List[RelativeView] = []
        self._images: List[torch.Tensor] = []
        for view, image in entries:
            self.add(view, image)

    def __len__(self) -> int:
        return len(self._views)

    @property
    def conditions(self) -> Optional[List[RelativeView]]:
        return list(self._views)

    def add(self, view: RelativeView, image) -> None:
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ContractError(f"Las vistas del banco deben ser (H, W, 3), se recibió {tuple(image.shape)}")
        self._views.append(view)
        self._images.append(image)

    def lookup(self, view: RelativeView) -> torch.Tensor:
        best, best_angle = None, math.inf
        for k, stored in enumerate(self._views):
            angle, radius = _view_distance(view, stored)
            if radius <= self.radius_tolerance and angle < best_angle:
                best, best_angle = k, angle
        if best is None or best_angle > self.angle_tolerance:
            raise ViewLookupError(
                f"La condición {view.as_tuple()} no está cubierta por el banco "
                f"({len(self)} vistas, tolerancia {self.angle_tolerance}°)"
            )
        return self._images[best]

    def save(self, path: Union[str, Path]) -> Path:
        """Escritura atómica en .npz (condiciones (K, 3) + imágenes (K, H, W, 3))."""
        views = np.array([v.as_tuple() for v in self._views], dtype=np.float64).reshape(-1, 3)
        images = np.stack([img.numpy() for img in self._images]) if self._images else np.zeros((0, 1, 1, 3))
        buffer = io.BytesIO()
        np.savez_compressed(
            buffer,
            views=views,
            images=images,
            tolerances=np.array([self.angle_tolerance, self.radius_tolerance]),
        )
        path = atomic_write_bytes(path, buffer.getvalue())
        logger.info(f"Banco de vistas guardado en {path} ({len(self)} vistas)")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ViewBank":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"No existe el banco de vistas: {path}")
        with np.load(path) as data:
            angle_tol, radius_tol = data["tolerances"].tolist()
            bank = cls(angle_tolerance=angle_tol, radius_tolerance=radius_tol)
            for row, image in zip(data["views"], data["images"]):
                bank.add(RelativeView(d_elevation=row[0], d_azimuth=row[1], d_radius=row[2]), image)
        logger.info(f"Banco de vistas cargado desde {path} ({len(bank)} vistas)")
        return bank


class RenderedViewBank:
    """
    Banco perezoso: renderiza la malla real en la pose de referencia verdadera
    compuesta con la condición consultada. Cubre cualquier condición.
    """

    def __init__(
        self,
        mesh: TriangleMesh,
        true_pose: CameraPose,
        intrinsics: Intrinsics,
        env: EnvironmentLight,
        sigma: float = 1.5,
        smooth_normals: bool = True,
    ):
        self.mesh = mesh.detach()
        self.true_pose = true_pose
        self.intrinsics = intrinsics
        self.env = env
        self.sigma = sigma
        self.smooth_normals = smooth_normals
        self._cache: Dict[Tuple[float, float, float], torch.Tensor] = {}

    @property
    def conditions(self) -> Optional[List[RelativeView]]:
        return None

    def lookup(self, view: RelativeView) -> torch.Tensor:
        key = tuple(round(v, 9) for v in view.as_tuple())
        if key not in self._cache:
            pose = compose_view(self.true_pose, view)
            with torch.no_grad():
                out = render(self.mesh, pose, self.intrinsics, self.env, sigma=self.sigma, smooth_normals=self.smooth_normals)
            self._cache[key] = out.rgb.detach()
        return self._cache[key]


class OraclePredictor:
    """ε̂ = (z_t - √ᾱ_t x_gt(Δ)) / √(1 - ᾱ_t)."""

    def __init__(self, bank, schedule: DiffusionSchedule):
        self.bank = bank
        self.schedule = schedule

    @property
    def conditions(self) -> Optional[List[RelativeView]]:
        return self.bank.conditions

    def predict(self, z_t: torch.Tensor, condition: Condition, t: int) -> torch.Tensor:
        x_gt = self.bank.lookup(condition.view)
        if x_gt.shape != z_t.shape:
            raise ContractError(f"Vista del banco {tuple(x_gt.shape)} incompatible con z_t {tuple(z_t.shape)}")
        alpha_bar = self.schedule.alpha_bar(t)
        return (z_t - math.sqrt(alpha_bar) * x_gt) / math.sqrt(1.0 - alpha_bar)


def oracle_predictor(view_bank, schedule: DiffusionSchedule) -> OraclePredictor:
    return OraclePredictor(view_bank, schedule)


def build_view_bank(
    mesh: TriangleMesh,
    true_pose: CameraPose,
    views: Sequence[RelativeView],
    intrinsics: Intrinsics,
    env: EnvironmentLight,
    angle_tolerance: float = 1.0,
) -> ViewBank:
    """Banco materializado a partir de una malla real (comando make-oracle-bank)."""
    rendered = RenderedViewBank(mesh, true_pose, intrinsics, env)
    bank = ViewBank(angle_tolerance=angle_tolerance)
    for view in views:
        bank.add(view, rendered.lookup(view).numpy())
    return bank


def random_noise(shape, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=generator, dtype=DTYPE)
