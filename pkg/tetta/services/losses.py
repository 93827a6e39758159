"""
Pérdidas auxiliares de la adaptación. Todas devuelven un escalar torch
diferenciable; el gradiente se obtiene con autograd.
"""
import torch
import torch.nn.functional as F

from tetta.core.exceptions import ContractError
from tetta.models.domain import DTYPE, TetGrid


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: dimensiones {tuple(a.shape)} != {tuple(b.shape)}")


def photometric_loss(rendered: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """L_photo = media de |I_ref - x_ref| sobre píxeles y canales (RGB lineal)."""
    reference = torch.as_tensor(reference, dtype=DTYPE)
    _same_shape(rendered, reference, "photometric_loss")
    return (rendered - reference).abs().mean()


def mask_loss(mask_render: torch.Tensor, mask_ref: torch.Tensor) -> torch.Tensor:
    """L_mask = media de |M_ref - M(x_ref)|."""
    mask_ref = torch.as_tensor(mask_ref, dtype=DTYPE)
    _same_shape(mask_render, mask_ref, "mask_loss")
    return (mask_render - mask_ref).abs().mean()


def sdf_regularizer(sdf: torch.Tensor, edges: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """
    L_reg = Σ_(i,j) BCE(σ(s_i), 1[s_j > 0]) + BCE(σ(s_j), 1[s_i > 0]) sobre aristas únicas.
    Las etiquetas no llevan gradiente; BCE en forma de logits: softplus(s) - y·s.
    reduction="mean" divide por el número de aristas (escala usada en la adaptación).
    """
    s_i, s_j = sdf[edges[:, 0]], sdf[edges[:, 1]]
    y_i = (s_i > 0).to(DTYPE).detach()
    y_j = (s_j > 0).to(DTYPE).detach()
    forward = F.softplus(s_i) - y_j * s_i
    backward = F.softplus(s_j) - y_i * s_j
    total = (forward + backward).sum()
    if reduction == "mean":
        return total / max(int(edges.shape[0]), 1)
    if reduction != "sum":
        raise ContractError(f"Reducción desconocida: {reduction}")
    return total


def umbrella_laplacian(sdf: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """∇²s_i = media de s_j sobre los vecinos de arista - s_i."""
    i, j = edges[:, 0], edges[:, 1]
    total = torch.zeros_like(sdf).index_add(0, i, sdf[j]).index_add(0, j, sdf[i])
    degree = torch.zeros_like(sdf).index_add(0, i, torch.ones_like(sdf[j])).index_add(0, j, torch.ones_like(sdf[i]))
    return total / degree.clamp_min(1.0) - sdf


def laplacian_loss(sdf: torch.Tensor, grid: TetGrid) -> torch.Tensor:
    """L_lap = (1/N) Σ |∇²s_i|."""
    if sdf.shape[0] != grid.num_vertices:
        raise ContractError(f"SDF con {sdf.shape[0]} valores para {grid.num_vertices} vértices")
    return umbrella_laplacian(sdf, grid.edges).abs().mean()
