"""
Inicialización de la geometría: muestreo de puntos sobre la malla gruesa,
consultas de distancia con signo y ajuste del campo SDF de la rejilla.
"""
import logging
from typing import NamedTuple, Optional

import numpy as np
import torch

from tetta.core.exceptions import ConfigurationError, ContractError
from tetta.models.domain import DTYPE, FieldParams, PointCloud, TetGrid, TriangleMesh
from tetta.services.mesh_distance import MeshDistanceField
from tetta.services.optimizer import OptimizerState, adamw_step
from tetta.services.tet_grid import default_field, edge_manifold_report, locate_in_grid

logger = logging.getLogger(__name__)


class SignedDistance(NamedTuple):
    value: np.ndarray
    # False si la malla no es cerrada/variedad: el signo no es confiable
    reliable: bool


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    closed, consistent = edge_manifold_report(mesh.faces_np())
    return closed and consistent


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Puntos uniformes por área sobre la superficie, con la normal de su cara."""
    if mesh.is_empty():
        raise ContractError("No se pueden muestrear puntos de una malla vacía")
    if n < 1:
        raise ContractError(f"Se requiere n >= 1 puntos, se recibió {n}")

    rng = np.random.default_rng(seed)
    tri = mesh.vertices_np()[mesh.faces_np()]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    if area.sum() <= 0.0:
        raise ContractError("La malla tiene área total nula")

    face = rng.choice(tri.shape[0], size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    points = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    normals = cross[face] / np.maximum(np.linalg.norm(cross[face], axis=1, keepdims=True), 1e-300)
    return PointCloud(points=points, normals=normals)


def signed_distance(mesh: TriangleMesh, query, field: Optional[MeshDistanceField] = None) -> SignedDistance:
    """
    SDF de la malla en los puntos de consulta: |valor| es la distancia sin signo
    y el signo es negativo donde el número de giro generalizado supera 0.5.
    """
    field = field or MeshDistanceField(mesh)
    points = np.asarray(query, dtype=np.float64)
    scalar = points.ndim == 1
    value, _ = field.signed(points.reshape(-1, 3))
    if scalar:
        value = value[0]
    return SignedDistance(value=value, reliable=field.reliable)


def _check_mesh_in_bounds(grid: TetGrid, mesh: TriangleMesh) -> None:
    # Margen de una celda para que la superficie extraída quede cerrada
    lo = (grid.bounds[0] + grid.cell_size).numpy()
    hi = (grid.bounds[1] - grid.cell_size).numpy()
    vertices = mesh.vertices_np()
    if np.any(vertices < lo) or np.any(vertices > hi):
        raise ConfigurationError(
            f"La malla [{vertices.min(axis=0).round(4).tolist()}, {vertices.max(axis=0).round(4).tolist()}] "
            f"no cabe en la rejilla con margen de una celda [{lo.round(4).tolist()}, {hi.round(4).tolist()}]"
        )


def fit_field_to_mesh(
    grid: TetGrid,
    mesh: TriangleMesh,
    n_points: int = 20000,
    iters: int = 100,
    lr: float = 1e-3,
    seed: int = 0,
) -> FieldParams:
    """
    Ajusta s(v) a la malla:
    1. Evaluación directa del SDF en los vértices de la rejilla.
    2. Refinamiento opcional minimizando Σ (s(p) - SDF(p))², con s(p) interpolado
       baricéntricamente dentro del tetraedro contenedor. Los puntos se reparten
       1:1 entre la superficie (SDF = 0) y el volumen de la caja.
    """
    if mesh.is_empty():
        raise ContractError("La malla gruesa está vacía")
    _check_mesh_in_bounds(grid, mesh)

    distance_field = MeshDistanceField(mesh)
    if not distance_field.reliable:
        logger.warning("Ajustando el SDF a una malla abierta: el signo puede ser incorrecto")

    # 1. Evaluación directa
    sdf0, _ = distance_field.signed(grid.vertices.numpy())
    field = default_field(grid, sdf=sdf0)

    if iters <= 0 or n_points <= 0:
        field.fit_loss = 0.0
        logger.info(f"SDF inicializado por evaluación directa en {grid.num_vertices} vértices")
        return field

    # 2. Refinamiento
    n_surface = n_points // 2
    n_volume = n_points - n_surface
    rng = np.random.default_rng(seed)
    lo, hi = grid.bounds[0].numpy(), grid.bounds[1].numpy()
    parts, targets = [], []
    if n_surface:
        parts.append(sample_surface_points(mesh, n_surface, seed=seed).points)
        targets.append(np.zeros(n_surface))
    if n_volume:
        volume = lo + rng.random((n_volume, 3)) * (hi - lo)
        parts.append(volume)
        targets.append(distance_field.signed(volume)[0])
    samples = np.concatenate(parts, axis=0)
    target = torch.as_tensor(np.concatenate(targets), dtype=DTYPE)

    ids, weights = locate_in_grid(grid, samples)
    ids = torch.as_tensor(ids, dtype=torch.long)
    weights = torch.as_tensor(weights, dtype=DTYPE)

    sdf = field.sdf.clone().requires_grad_(True)
    state = OptimizerState(lr=lr, clip_norm=None)
    for _ in range(iters):
        residual = (sdf[ids] * weights).sum(dim=1) - target
        loss = (residual ** 2).mean()
        (grad,) = torch.autograd.grad(loss, sdf)
        adamw_step({"sdf": sdf}, {"sdf": grad}, state)

    with torch.no_grad():
        final = float((((sdf[ids] * weights).sum(dim=1) - target) ** 2).mean())
    field.sdf = sdf.detach().clone()
    field.fit_loss = final
    logger.info(f"Ajuste del SDF: {iters} iteraciones sobre {n_points} puntos, pérdida final {final:.3e}")
    return field
