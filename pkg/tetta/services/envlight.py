"""
Iluminación de entorno en proyección latitud-longitud (z hacia arriba) y su
prefiltrado para la aproximación split-sum: mapa de irradiancia, cadena de
niveles especulares GGX y tabla DFG.
"""
import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from tetta.core.exceptions import ConfigurationError, ContractError
from tetta.models.domain import DTYPE

logger = logging.getLogger(__name__)

IRRADIANCE_SIZE = (16, 32)
IRRADIANCE_SOURCE_SIZE = (32, 64)
SPECULAR_LEVELS = 5
SPECULAR_SAMPLES = 256
SPECULAR_MAX_SIZE = (64, 128)
PREFILTER_CHUNK = 2048
DFG_SIZE = 64
DFG_SAMPLES = 1024


# --- MUESTREO ---


def hammersley(count: int) -> np.ndarray:
    """Secuencia de Hammersley (i/N, inverso radical de Van der Corput)."""
    bits = np.arange(count, dtype=np.uint32)
    bits = (bits << 16) | (bits >> 16)
    bits = ((bits & 0x55555555) << 1) | ((bits & 0xAAAAAAAA) >> 1)
    bits = ((bits & 0x33333333) << 2) | ((bits & 0xCCCCCCCC) >> 2)
    bits = ((bits & 0x0F0F0F0F) << 4) | ((bits & 0xF0F0F0F0) >> 4)
    bits = ((bits & 0x00FF00FF) << 8) | ((bits & 0xFF00FF00) >> 8)
    return np.stack([np.arange(count) / count, bits.astype(np.float64) * 2.3283064365386963e-10], axis=1)


def ggx_half_vectors(xi: np.ndarray, roughness: float) -> np.ndarray:
    """Vectores medios GGX en el espacio tangente (z = normal), alfa = rugosidad²."""
    a = roughness * roughness
    phi = 2.0 * np.pi * xi[:, 0]
    cos_theta = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (a * a - 1.0) * xi[:, 1]))
    sin_theta = np.sqrt(np.maximum(1.0 - cos_theta ** 2, 0.0))
    return np.stack([np.cos(phi) * sin_theta, np.sin(phi) * sin_theta, cos_theta], axis=1)


def _geometry_schlick(n_dot: np.ndarray, roughness: np.ndarray) -> np.ndarray:
    # k = alfa / 2 para iluminación por imagen
    k = roughness * roughness / 2.0
    return n_dot / (n_dot * (1.0 - k) + k)


@functools.lru_cache(maxsize=1)
def dfg_table(size: int = DFG_SIZE, samples: int = DFG_SAMPLES) -> np.ndarray:
    """
    Tabla (rugosidad, NdotV) -> (A, B) con F0·A + B la integral del BRDF
    especular bajo iluminación blanca. Filas: rugosidad; columnas: NdotV.
    """
    coords = (np.arange(size) + 0.5) / size
    n_dot_v = coords[None, :, None]
    roughness = coords[:, None, None]
    xi = hammersley(samples)

    a = roughness * roughness
    phi = 2.0 * np.pi * xi[None, None, :, 0]
    cos_h = np.sqrt((1.0 - xi[None, None, :, 1]) / (1.0 + (a * a - 1.0) * xi[None, None, :, 1]))
    sin_h = np.sqrt(np.maximum(1.0 - cos_h ** 2, 0.0))
    hx, hy, hz = np.cos(phi) * sin_h, np.sin(phi) * sin_h, cos_h

    vx, vz = np.sqrt(1.0 - n_dot_v ** 2), n_dot_v
    v_dot_h = vx * hx + vz * hz
    lz = 2.0 * v_dot_h * hz - vz
    valid = lz > 0.0

    n_dot_l = np.maximum(lz, 0.0)
    g = _geometry_schlick(n_dot_v, roughness) * _geometry_schlick(n_dot_l, roughness)
    g_vis = g * np.maximum(v_dot_h, 0.0) / np.maximum(hz * n_dot_v, 1e-5)
    fc = (1.0 - np.maximum(v_dot_h, 0.0)) ** 5
    a_term = np.where(valid, (1.0 - fc) * g_vis, 0.0).sum(axis=-1) / samples
    b_term = np.where(valid, fc * g_vis, 0.0).sum(axis=-1) / samples
    logger.debug(f"Tabla DFG {size}x{size} integrada con {samples} muestras")
    return np.stack([a_term, b_term], axis=-1)


# --- DIRECCIONES <-> LATLONG ---


def latlong_directions(height: int, width: int) -> torch.Tensor:
    """Dirección del centro de cada texel (H, W, 3); la fila 0 es el polo +z."""
    theta = (torch.arange(height, dtype=DTYPE) + 0.5) / height * math.pi
    phi = (torch.arange(width, dtype=DTYPE) + 0.5) / width * 2.0 * math.pi
    theta, phi = torch.meshgrid(theta, phi, indexing="ij")
    return torch.stack(
        [torch.sin(theta) * torch.cos(phi), torch.sin(theta) * torch.sin(phi), torch.cos(theta)], dim=-1
    )


def latlong_solid_angles(height: int, width: int) -> torch.Tensor:
    theta = (torch.arange(height, dtype=DTYPE) + 0.5) / height * math.pi
    d_omega = torch.sin(theta) * (math.pi / height) * (2.0 * math.pi / width)
    return d_omega[:, None].expand(height, width)


def _direction_to_uv(directions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    x, y, z = directions.unbind(-1)
    # atan2 sin gradiente NaN en los polos
    polar = x * x + y * y < 1e-24
    x_safe = torch.where(polar, torch.ones_like(x), x)
    y_safe = torch.where(polar, torch.zeros_like(y), y)
    u = torch.remainder(torch.atan2(y_safe, x_safe) / (2.0 * math.pi), 1.0)
    v = torch.acos(z.clamp(-1.0 + 1e-7, 1.0 - 1e-7)) / math.pi
    return u, v


def sample_latlong(texture: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Búsqueda bilineal (H, W, C) en direcciones (..., 3), envolviendo en azimut."""
    height, width, channels = texture.shape
    shape = directions.shape[:-1]
    u, v = _direction_to_uv(directions.reshape(-1, 3))
    padded = torch.cat([texture[:, -1:], texture, texture[:, :1]], dim=1)
    grid_x = 2.0 * (u * width + 1.0) / (width + 2.0) - 1.0
    grid_y = 2.0 * v - 1.0
    grid = torch.stack([grid_x, grid_y], dim=-1)[None, None]
    out = F.grid_sample(
        padded.permute(2, 0, 1)[None], grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out[0, :, 0].T.reshape(*shape, channels)


# --- LUZ DE ENTORNO ---


@dataclass
class EnvironmentLight:
    radiance: torch.Tensor  # (H, W, 3) lineal, >= 0
    irradiance: Optional[torch.Tensor] = None  # (16, 32, 3)
    specular: Optional[torch.Tensor] = None  # (niveles, H, W, 3)
    name: str = "custom"

    def __post_init__(self):
        self.radiance = torch.as_tensor(self.radiance, dtype=DTYPE)
        if self.radiance.ndim != 3 or self.radiance.shape[-1] != 3:
            raise ContractError(f"El mapa de entorno debe ser (H, W, 3), se recibió {tuple(self.radiance.shape)}")
        if not torch.isfinite(self.radiance).all() or (self.radiance < 0).any():
            raise ContractError("La radiancia del entorno debe ser finita y no negativa")

    @property
    def is_prefiltered(self) -> bool:
        return self.irradiance is not None and self.specular is not None

    def with_radiance(self, radiance) -> "EnvironmentLight":
        """Nuevo mapa base: el prefiltrado anterior se descarta."""
        return EnvironmentLight(radiance=radiance, name=self.name)

    def prefilter(self) -> "EnvironmentLight":
        """Calcula irradiancia y niveles especulares; devuelve una luz nueva."""
        irradiance = _prefilter_irradiance(self.radiance)
        specular = _prefilter_specular(self.radiance)
        logger.info(
            f"Entorno '{self.name}' prefiltrado: irradiancia {tuple(irradiance.shape[:2])}, "
            f"{specular.shape[0]} niveles especulares"
        )
        return EnvironmentLight(radiance=self.radiance, irradiance=irradiance, specular=specular, name=self.name)

    def _require_prefiltered(self) -> None:
        if not self.is_prefiltered:
            raise ContractError("La luz de entorno no está prefiltrada (llame a prefilter())")

    def lookup_irradiance(self, normals: torch.Tensor) -> torch.Tensor:
        """E(n) = ∫ L(ω) max(0, n·ω) dω."""
        self._require_prefiltered()
        return sample_latlong(self.irradiance, normals)

    def lookup_specular(self, directions: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
        """Radiancia prefiltrada GGX, interpolada linealmente entre niveles de rugosidad."""
        self._require_prefiltered()
        levels = self.specular.shape[0]
        samples = torch.stack([sample_latlong(self.specular[k], directions) for k in range(levels)], dim=-2)
        position = roughness.clamp(0.0, 1.0) * (levels - 1)
        centers = torch.arange(levels, dtype=DTYPE)
        weights = (1.0 - (position[..., None] - centers).abs()).clamp_min(0.0)
        return (samples * weights[..., None]).sum(dim=-2)


def lookup_dfg(n_dot_v: torch.Tensor, roughness: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    table = torch.as_tensor(dfg_table(), dtype=DTYPE).permute(2, 0, 1)[None]
    shape = n_dot_v.shape
    grid = torch.stack([2.0 * n_dot_v.reshape(-1) - 1.0, 2.0 * roughness.reshape(-1) - 1.0], dim=-1)[None, None]
    out = F.grid_sample(table, grid, mode="bilinear", padding_mode="border", align_corners=False)[0, :, 0]
    return out[0].reshape(shape), out[1].reshape(shape)


def _prefilter_irradiance(radiance: torch.Tensor) -> torch.Tensor:
    source = F.adaptive_avg_pool2d(radiance.permute(2, 0, 1)[None], IRRADIANCE_SOURCE_SIZE)[0].permute(1, 2, 0)
    dirs = latlong_directions(*IRRADIANCE_SOURCE_SIZE).reshape(-1, 3)
    d_omega = latlong_solid_angles(*IRRADIANCE_SOURCE_SIZE).reshape(-1)
    normals = latlong_directions(*IRRADIANCE_SIZE).reshape(-1, 3)
    weights = (normals @ dirs.T).clamp_min(0.0) * d_omega
    # Cuadratura normalizada: exacta para entornos uniformes (∫ cos = π)
    weights = weights * (math.pi / weights.sum(dim=1, keepdim=True))
    irradiance = weights @ source.reshape(-1, 3)
    return irradiance.reshape(*IRRADIANCE_SIZE, 3)


def _tangent_frames(normals: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    up = torch.where(
        (normals[:, 2].abs() < 0.999)[:, None],
        torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE),
        torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE),
    )
    tangent = torch.linalg.cross(up, normals)
    tangent = tangent / tangent.norm(dim=-1, keepdim=True)
    return tangent, torch.linalg.cross(normals, tangent)


def _prefilter_specular(radiance: torch.Tensor) -> torch.Tensor:
    height, width, _ = radiance.shape
    if height > SPECULAR_MAX_SIZE[0] or width > SPECULAR_MAX_SIZE[1]:
        height, width = min(height, SPECULAR_MAX_SIZE[0]), min(width, SPECULAR_MAX_SIZE[1])
        radiance = F.adaptive_avg_pool2d(radiance.permute(2, 0, 1)[None], (height, width))[0].permute(1, 2, 0)
    normals = latlong_directions(height, width).reshape(-1, 3)
    tangent, bitangent = _tangent_frames(normals)
    xi = hammersley(SPECULAR_SAMPLES)
    levels = [radiance]
    for k in range(1, SPECULAR_LEVELS):
        roughness = k / (SPECULAR_LEVELS - 1)
        half = torch.as_tensor(ggx_half_vectors(xi, roughness), dtype=DTYPE)
        # N = V = R
        n_dot_h = half[:, 2]
        filtered = []
        for start in range(0, normals.shape[0], PREFILTER_CHUNK):
            n, t, b = (x[start:start + PREFILTER_CHUNK] for x in (normals, tangent, bitangent))
            h = t[:, None] * half[None, :, 0:1] + b[:, None] * half[None, :, 1:2] + n[:, None] * half[None, :, 2:3]
            light = 2.0 * n_dot_h[None, :, None] * h - n[:, None]
            n_dot_l = (light * n[:, None]).sum(dim=-1).clamp_min(0.0)
            values = sample_latlong(radiance, light)
            total = (values * n_dot_l[..., None]).sum(dim=1)
            filtered.append(total / n_dot_l.sum(dim=1, keepdim=True).clamp_min(1e-12))
        levels.append(torch.cat(filtered).reshape(height, width, 3))
    return torch.stack(levels)


# --- PRESETS ---


def uniform_environment(level: float = 1.0, size: Tuple[int, int] = (8, 16)) -> EnvironmentLight:
    if level < 0.0:
        raise ConfigurationError(f"La radiancia uniforme debe ser >= 0, se recibió {level}")
    return EnvironmentLight(radiance=torch.full((*size, 3), float(level), dtype=DTYPE), name=f"uniform:{level:g}")


def sky_environment(size: Tuple[int, int] = (32, 64)) -> EnvironmentLight:
    """Cielo analítico: gradiente azul, suelo gris y un sol difuso."""
    dirs = latlong_directions(*size)
    z = dirs[..., 2:3]
    sky = torch.tensor([0.6, 0.75, 1.0], dtype=DTYPE) * (0.6 + 0.4 * z.clamp_min(0.0))
    ground = torch.tensor([0.35, 0.3, 0.25], dtype=DTYPE).expand_as(sky)
    base = torch.where(z >= 0.0, sky, ground)
    sun_dir = torch.tensor([0.5, 0.3, 0.81], dtype=DTYPE)
    sun_dir = sun_dir / sun_dir.norm()
    sun = 4.0 * torch.exp(-(1.0 - (dirs * sun_dir).sum(dim=-1, keepdim=True)) * 40.0)
    return EnvironmentLight(radiance=base + sun, name="sky")


def make_environment(spec: Union[str, np.ndarray, torch.Tensor], prefilter: bool = True) -> EnvironmentLight:
    """'uniform:<L>', 'sky' o un mapa latlong (H, W, 3)."""
    if isinstance(spec, str):
        if spec.startswith("uniform:"):
            try:
                level = float(spec.split(":", 1)[1])
            except ValueError:
                raise ConfigurationError(f"Preset de entorno inválido: '{spec}'")
            light = uniform_environment(level)
        elif spec == "sky":
            light = sky_environment()
        else:
            raise ConfigurationError(f"Preset de entorno desconocido: '{spec}' (use 'uniform:<L>' o 'sky')")
    else:
        light = EnvironmentLight(radiance=spec, name="latlong")
    return light.prefilter() if prefilter else light
