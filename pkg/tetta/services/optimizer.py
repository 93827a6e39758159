"""
AdamW con recorte de gradiente por norma global, sobre diccionarios de tensores.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import torch

from tetta.core.exceptions import ContractError

logger = logging.getLogger(__name__)

Constraint = Callable[[], None]


@dataclass
class OptimizerState:
    """Momentos por parámetro, contador de pasos e hiperparámetros."""

    lr: float = 1e-3
    clip_norm: Optional[float] = 1.0
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # Tasa propia por parámetro (grupos geometría / textura / cámara)
    lr_overrides: Dict[str, float] = field(default_factory=dict)
    # Parámetros sin decaimiento de pesos (la pose)
    no_decay: Tuple[str, ...] = ()
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    last_grad_norm: float = 0.0

    def lr_for(self, name: str) -> float:
        return self.lr_overrides.get(name, self.lr)

    def set_group_lr(self, names: Iterable[str], lr: float) -> None:
        for name in names:
            self.lr_overrides[name] = lr


def global_grad_norm(grads: Dict[str, Optional[torch.Tensor]]) -> float:
    total = 0.0
    for grad in grads.values():
        if grad is not None:
            total += float((grad.detach() ** 2).sum())
    return math.sqrt(total)


def adamw_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, Optional[torch.Tensor]],
    state: OptimizerState,
    constraints: Iterable[Constraint] = (),
) -> OptimizerState:
    """
    Un paso de AdamW en el lugar:
    1. Recorte por norma global (escala = clip / norma cuando norma > clip).
    2. Decaimiento de pesos desacoplado.
    3. Momentos con corrección de sesgo.
    4. Restricciones de dominio (cota de deformación, rangos PBR, pose).
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"Gradiente para un parámetro desconocido: '{name}'")
        if grad is not None and grad.shape != params[name].shape:
            raise ContractError(
                f"Forma del gradiente de '{name}' {tuple(grad.shape)} != parámetro {tuple(params[name].shape)}"
            )

    # 1. Recorte
    total = global_grad_norm(grads)
    state.last_grad_norm = total
    scale = 1.0
    if state.clip_norm is not None and total > state.clip_norm:
        scale = state.clip_norm / total

    state.step += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            grad = torch.zeros_like(param) if grad is None else grad.detach() * scale
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(param)
                state.exp_avg_sq[name] = torch.zeros_like(param)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            lr = state.lr_for(name)

            # 2. Decaimiento desacoplado
            if state.weight_decay and name not in state.no_decay:
                param.mul_(1.0 - lr * state.weight_decay)

            # 3. Momentos
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            update = (m / bias1) / ((v / bias2).sqrt() + state.eps)
            param.sub_(lr * update)

    # 4. Restricciones
    for constraint in constraints:
        constraint()
    return state
