"""
Sombreado PBR con iluminación por imagen (split-sum):
L = k_d (1 - m) / π · E(n) + prefiltrado(R, r) · (k_s · A + B).
"""
import math
from typing import NamedTuple, Optional, Tuple

import torch

from tetta.core.exceptions import ContractError
from tetta.models.domain import DTYPE, MaterialSample
from tetta.services.envlight import EnvironmentLight, lookup_dfg

# Reflectancia de los dieléctricos a incidencia normal
DIELECTRIC_F0 = 0.04


class Shading(NamedTuple):
    color: torch.Tensor
    diffuse: torch.Tensor
    specular: torch.Tensor


def specular_color(kd: torch.Tensor, metalness: torch.Tensor) -> torch.Tensor:
    """k_s = (1 - m) · 0.04 + m · k_d."""
    m = metalness[..., None] if metalness.ndim == kd.ndim - 1 else metalness
    return (1.0 - m) * DIELECTRIC_F0 + m * kd


def _normalize(v: torch.Tensor, eps: float = 1e-20) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def tangent_frame(normals: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """t = normalize(n × z), o n × x cuando |n·z| > 0.99; b = n × t."""
    z_axis = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand_as(normals)
    x_axis = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE).expand_as(normals)
    near_pole = (normals[..., 2].abs() > 0.99)[..., None]
    tangent = _normalize(torch.linalg.cross(normals, torch.where(near_pole, x_axis, z_axis)))
    return tangent, torch.linalg.cross(normals, tangent)


def perturb_normal(kn: torch.Tensor, normals: torch.Tensor, tangent=None, bitangent=None) -> torch.Tensor:
    """Normal de sombreado = normalize(TBN · normalize(k_n))."""
    if tangent is None or bitangent is None:
        tangent, bitangent = tangent_frame(normals)
    flat = kn.norm(dim=-1, keepdim=True) < 1e-8
    kn = torch.where(flat, torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand_as(kn), kn)
    kn = _normalize(kn)
    shading = kn[..., 0:1] * tangent + kn[..., 1:2] * bitangent + kn[..., 2:3] * normals
    return _normalize(shading)


def shade_pbr(
    material: MaterialSample,
    normals: torch.Tensor,
    view_dirs: torch.Tensor,
    env: EnvironmentLight,
    tangent: Optional[torch.Tensor] = None,
    bitangent: Optional[torch.Tensor] = None,
) -> Shading:
    """
    Radiancia saliente hacia el observador.
    normals: normal geométrica unitaria (..., 3); view_dirs: hacia la cámara (..., 3).
    """
    if not env.is_prefiltered:
        raise ContractError("shade_pbr requiere una luz de entorno prefiltrada")

    n = perturb_normal(material.kn, normals, tangent, bitangent)
    kd, roughness, metalness = material.kd, material.roughness, material.metalness

    # Difuso (Lambert con 1/π)
    irradiance = env.lookup_irradiance(n)
    diffuse = kd * (1.0 - metalness)[..., None] / math.pi * irradiance

    # Especular split-sum
    n_dot_v = (n * view_dirs).sum(dim=-1)
    reflected = 2.0 * n_dot_v[..., None] * n - view_dirs
    a_term, b_term = lookup_dfg(n_dot_v.clamp(1e-4, 1.0), roughness.clamp(0.0, 1.0))
    ks = specular_color(kd, metalness)
    prefiltered = env.lookup_specular(reflected, roughness)
    specular = prefiltered * (ks * a_term[..., None] + b_term[..., None])

    return Shading(color=diffuse + specular, diffuse=diffuse, specular=specular)
