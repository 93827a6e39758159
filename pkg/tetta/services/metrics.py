"""
Métricas de evaluación geométrica y fotométrica.

Chamfer: suma de las medias bidireccionales de distancias cuadradas al vecino
más cercano. F-score: media armónica de precisión y exhaustividad bajo τ (x100).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from scipy.spatial import cKDTree

from tetta.core.exceptions import ContractError
from tetta.models.domain import PointCloud, RigidTransform, TriangleMesh
from tetta.services.geometry_init import sample_surface_points

logger = logging.getLogger(__name__)

CloudLike = Union[PointCloud, np.ndarray]

DEFAULT_TAU = 0.05
ICP_MAX_ITERS = 50
ICP_TOL = 1e-7


def _points(cloud: CloudLike, what: str = "nube") -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ContractError(f"La {what} está vacía")
    return points


def nearest_distances(src: CloudLike, dst: CloudLike) -> Tuple[np.ndarray, np.ndarray]:
    """Para cada punto de src: distancia e índice del vecino más cercano en dst."""
    dist, idx = cKDTree(_points(dst, "nube destino")).query(_points(src, "nube origen"), k=1)
    return dist, idx


# --- NORMALIZACIÓN ---


class NormalizedCloud(NamedTuple):
    cloud: PointCloud
    scale: float
    offset: np.ndarray  # p' = (p + offset) * scale


def normalization_of(points: np.ndarray) -> Tuple[float, np.ndarray]:
    """Centroide al origen y diagonal de la caja envolvente igual a 1."""
    diagonal = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    if diagonal <= 0.0:
        raise ContractError("No se puede normalizar una nube con todos los puntos coincidentes")
    return 1.0 / diagonal, -points.mean(axis=0)


def normalize_cloud(pc: CloudLike) -> NormalizedCloud:
    points = _points(pc)
    scale, offset = normalization_of(points)
    return NormalizedCloud(PointCloud((points + offset) * scale), scale, offset)


# --- ALINEACIÓN RÍGIDA ---


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Rotación y traslación que minimizan Σ ||R src + t - dst||² (correspondencias dadas)."""
    mu_src, mu_dst = src.mean(axis=0), dst.mean(axis=0)
    h = (src - mu_src).T @ (dst - mu_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, mu_dst - rotation @ mu_src)


@dataclass
class IcpResult:
    transform: RigidTransform
    # Error medio cuadrático de correspondencia al inicio de cada iteración y al final
    residuals: List[float] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.inf


def icp_register(
    src: CloudLike,
    dst: CloudLike,
    max_iters: int = ICP_MAX_ITERS,
    tol: float = ICP_TOL,
    initial: Optional[RigidTransform] = None,
    tree: Optional[cKDTree] = None,
) -> IcpResult:
    """ICP punto a punto; se detiene cuando el cambio relativo del residuo es <= tol."""
    src_pts, dst_pts = _points(src, "nube origen"), _points(dst, "nube destino")
    tree = tree or cKDTree(dst_pts)
    transform = initial or RigidTransform.identity()

    dist, idx = tree.query(transform.apply(src_pts), k=1)
    residuals = [float(np.mean(dist ** 2))]
    for _ in range(max_iters):
        if residuals[-1] == 0.0:
            break
        transform = kabsch(src_pts, dst_pts[idx])
        dist, idx = tree.query(transform.apply(src_pts), k=1)
        current = float(np.mean(dist ** 2))
        previous = residuals[-1]
        residuals.append(current)
        if previous - current <= tol * previous:
            break
    return IcpResult(transform=transform, residuals=residuals)


def icp_align(
    src: CloudLike,
    dst: CloudLike,
    max_iters: int = ICP_MAX_ITERS,
    tol: float = ICP_TOL,
) -> RigidTransform:
    return icp_register(src, dst, max_iters=max_iters, tol=tol).transform


# --- MÉTRICAS ---


def chamfer_distance(a: CloudLike, b: CloudLike) -> float:
    d_ab, _ = nearest_distances(a, b)
    d_ba, _ = nearest_distances(b, a)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


class FScore(NamedTuple):
    f_score: float
    precision: float
    recall: float


def f_score_details(pred: CloudLike, gt: CloudLike, tau: float = DEFAULT_TAU) -> FScore:
    if tau <= 0.0:
        raise ContractError(f"El umbral τ debe ser positivo, se recibió {tau}")
    d_pred, _ = nearest_distances(pred, gt)
    d_gt, _ = nearest_distances(gt, pred)
    precision = float(np.mean(d_pred <= tau))
    recall = float(np.mean(d_gt <= tau))
    if precision + recall == 0.0:
        return FScore(0.0, precision, recall)
    return FScore(200.0 * precision * recall / (precision + recall), precision, recall)


def f_score(pred: CloudLike, gt: CloudLike, tau: float = DEFAULT_TAU) -> float:
    return f_score_details(pred, gt, tau).f_score


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak² / MSE); imágenes idénticas devuelven +inf."""
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a, dtype=np.float64)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr: dimensiones {a.shape} != {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


# --- PROTOCOLO COMPLETO ---


@dataclass
class MeshEvaluation:
    chamfer: float
    f_score: float
    precision: float
    recall: float
    tau: float
    n_points: int
    icp_residual: float
    # Transformación aplicada a la predicción (marco de la malla real normalizado)
    transform: RigidTransform = field(repr=False, default_factory=RigidTransform.identity)

    def as_dict(self) -> dict:
        return {
            "chamfer": self.chamfer,
            "f_score": self.f_score,
            "precision": self.precision,
            "recall": self.recall,
            "tau": self.tau,
            "n_points": self.n_points,
            "icp_residual": self.icp_residual,
        }


def _principal_axes(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, vectors = np.linalg.eigh(centered.T @ centered)
    if np.linalg.det(vectors) < 0:
        vectors[:, 0] = -vectors[:, 0]
    return vectors


def _pca_candidates(src: np.ndarray, dst: np.ndarray) -> List[RigidTransform]:
    """Identidad + las 4 rotaciones propias que alinean los ejes principales."""
    axes_src, axes_dst = _principal_axes(src), _principal_axes(dst)
    mu_src, mu_dst = src.mean(axis=0), dst.mean(axis=0)
    candidates = [RigidTransform(np.eye(3), mu_dst - mu_src)]
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        rotation = axes_dst @ np.diag(signs).astype(np.float64) @ axes_src.T
        candidates.append(RigidTransform(rotation, mu_dst - rotation @ mu_src))
    return candidates


def evaluate_meshes(
    pred: TriangleMesh,
    gt: TriangleMesh,
    n_points: int = 10000,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
) -> MeshEvaluation:
    """
    1. Muestrea n_points por malla (misma semilla en ambas).
    2. Preescala invariante a rotaciones (radio RMS de la predicción = el de la real).
    3. ICP sembrado con ejes principales; se conserva el menor residuo.
    4. Normalización a diagonal unitaria en el marco de la malla real y ICP final.
    5. Chamfer y F-score.
    """
    pred_pts = sample_surface_points(pred, n_points, seed=seed).points
    gt_pts = sample_surface_points(gt, n_points, seed=seed).points

    # 2. Preescala
    pred_c = pred_pts - pred_pts.mean(axis=0)
    gt_rms = float(np.sqrt(np.mean(np.sum((gt_pts - gt_pts.mean(axis=0)) ** 2, axis=1))))
    pred_rms = float(np.sqrt(np.mean(np.sum(pred_c ** 2, axis=1))))
    if pred_rms <= 0.0 or gt_rms <= 0.0:
        raise ContractError("Nube degenerada: todos los puntos coinciden")
    pred_scaled = pred_c * (gt_rms / pred_rms) + pred_pts.mean(axis=0)

    # 3. ICP sembrado
    tree = cKDTree(gt_pts)
    best = None
    for initial in _pca_candidates(pred_scaled, gt_pts):
        result = icp_register(pred_scaled, gt_pts, initial=initial, tree=tree)
        if best is None or result.residual < best.residual:
            best = result
    aligned = best.transform.apply(pred_scaled)

    # 4. Normalización en el marco real y ajuste final
    scale, offset = normalization_of(gt_pts)
    gt_norm = (gt_pts + offset) * scale
    pred_norm = (aligned + offset) * scale
    final = icp_register(pred_norm, gt_norm)
    pred_final = final.transform.apply(pred_norm)

    # 5. Métricas
    chamfer = chamfer_distance(pred_final, gt_norm)
    fs = f_score_details(pred_final, gt_norm, tau)
    logger.info(f"Evaluación: Chamfer {chamfer:.6f}, F-score {fs.f_score:.2f} (τ={tau}, {n_points} puntos)")
    return MeshEvaluation(
        chamfer=chamfer,
        f_score=fs.f_score,
        precision=fs.precision,
        recall=fs.recall,
        tau=tau,
        n_points=n_points,
        icp_residual=final.residual,
        transform=final.transform,
    )
