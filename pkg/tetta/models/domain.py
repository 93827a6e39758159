"""
Tipos de dominio respaldados por arreglos.

La ruta diferenciable (campo -> malla -> render) vive en tensores torch float64
en CPU; las nubes de puntos y la evaluación viven en numpy.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(value, dtype=DTYPE) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(dtype)
    return torch.as_tensor(np.asarray(value), dtype=dtype)


@dataclass
class TetGrid:
    vertices: torch.Tensor  # (N, 3)
    tets: torch.Tensor  # (M, 4) long, volumen con signo positivo
    edges: torch.Tensor  # (E, 2) long, i < j, sin repetir
    tet_edges: torch.Tensor  # (M, 6) long, índice en `edges` de cada arista local
    bounds: torch.Tensor  # (2, 3) [min, max]
    resolution: Tuple[int, int, int]

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def cell_size(self) -> torch.Tensor:
        res = torch.tensor(self.resolution, dtype=DTYPE)
        return (self.bounds[1] - self.bounds[0]) / res

    @property
    def deform_bound(self) -> torch.Tensor:
        """Cota por componente de Δv: 0.45 x arista local de la celda."""
        return 0.45 * self.cell_size


@dataclass
class MaterialSample:
    """Registro PBR: k_d (...,3), rugosidad (...), metalicidad (...), k_n (...,3)."""

    kd: torch.Tensor
    roughness: torch.Tensor
    metalness: torch.Tensor
    kn: torch.Tensor

    @classmethod
    def constant(
        cls,
        count: int,
        kd=(0.5, 0.5, 0.5),
        roughness: float = 0.5,
        metalness: float = 0.0,
        kn=(0.0, 0.0, 1.0),
    ) -> "MaterialSample":
        return cls(
            kd=as_tensor(kd).expand(count, 3).clone(),
            roughness=torch.full((count,), float(roughness), dtype=DTYPE),
            metalness=torch.full((count,), float(metalness), dtype=DTYPE),
            kn=as_tensor(kn).expand(count, 3).clone(),
        )

    def __len__(self) -> int:
        return int(self.kd.shape[0])

    def clamped(self) -> "MaterialSample":
        """Copia (diferenciable) recortada a los rangos válidos."""
        kn = torch.cat([self.kn[..., :2].clamp(-1.0, 1.0), self.kn[..., 2:].clamp(0.0, 1.0)], dim=-1)
        return MaterialSample(
            kd=self.kd.clamp(0.0, 1.0),
            roughness=self.roughness.clamp(0.0, 1.0),
            metalness=self.metalness.clamp(0.0, 1.0),
            kn=kn,
        )

    def project_(self) -> None:
        """Recorta en el lugar (después de cada paso del optimizador)."""
        with torch.no_grad():
            self.kd.clamp_(0.0, 1.0)
            self.roughness.clamp_(0.0, 1.0)
            self.metalness.clamp_(0.0, 1.0)
            self.kn[..., :2].clamp_(-1.0, 1.0)
            self.kn[..., 2].clamp_(0.0, 1.0)

    def select(self, index: torch.Tensor) -> "MaterialSample":
        return MaterialSample(
            kd=self.kd[index],
            roughness=self.roughness[index],
            metalness=self.metalness[index],
            kn=self.kn[index],
        )

    def detach(self) -> "MaterialSample":
        return MaterialSample(
            kd=self.kd.detach().clone(),
            roughness=self.roughness.detach().clone(),
            metalness=self.metalness.detach().clone(),
            kn=self.kn.detach().clone(),
        )

    def to_array(self) -> np.ndarray:
        """Empaqueta en (N, 8): kd_r kd_g kd_b rough metal nx ny nz."""
        packed = torch.cat(
            [self.kd, self.roughness[..., None], self.metalness[..., None], self.kn], dim=-1
        )
        return packed.detach().cpu().numpy()

    @classmethod
    def from_array(cls, packed: np.ndarray) -> "MaterialSample":
        packed = as_tensor(packed)
        return cls(
            kd=packed[:, 0:3].clone(),
            roughness=packed[:, 3].clone(),
            metalness=packed[:, 4].clone(),
            kn=packed[:, 5:8].clone(),
        )


@dataclass
class FieldParams:
    """Estado aprendible por vértice de la rejilla: s, Δv y k_PBR."""

    sdf: torch.Tensor  # (N,)
    deform: torch.Tensor  # (N, 3)
    pbr: MaterialSample
    fit_loss: Optional[float] = None

    @property
    def num_vertices(self) -> int:
        return int(self.sdf.shape[0])

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {
            "sdf": self.sdf,
            "deform": self.deform,
            "kd": self.pbr.kd,
            "roughness": self.pbr.roughness,
            "metalness": self.pbr.metalness,
            "kn": self.pbr.kn,
        }

    def requires_grad_(self, flag: bool = True) -> "FieldParams":
        for tensor in self.parameters().values():
            tensor.requires_grad_(flag)
        return self

    def project_(self, grid: TetGrid) -> None:
        """Aplica la cota de deformación y los rangos PBR en el lugar."""
        bound = grid.deform_bound
        with torch.no_grad():
            self.deform.copy_(torch.maximum(torch.minimum(self.deform, bound), -bound))
        self.pbr.project_()

    def detach(self) -> "FieldParams":
        return FieldParams(
            sdf=self.sdf.detach().clone(),
            deform=self.deform.detach().clone(),
            pbr=self.pbr.detach(),
            fit_loss=self.fit_loss,
        )


@dataclass
class Provenance:
    """Para cada vértice de superficie: arista de la rejilla, extremos (i, j) y peso t."""

    edge_ids: torch.Tensor  # (V,)
    endpoints: torch.Tensor  # (V, 2)
    t: torch.Tensor  # (V,)


@dataclass
class TriangleMesh:
    positions: torch.Tensor  # (V, 3)
    faces: torch.Tensor  # (F, 3) long
    normals: Optional[torch.Tensor] = None
    attributes: Optional[MaterialSample] = None
    provenance: Optional[Provenance] = None

    @classmethod
    def from_numpy(cls, positions, faces, attributes: Optional[MaterialSample] = None) -> "TriangleMesh":
        return cls(
            positions=as_tensor(positions),
            faces=torch.as_tensor(np.asarray(faces), dtype=torch.long).reshape(-1, 3),
            attributes=attributes,
        )

    @property
    def num_vertices(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])

    def is_empty(self) -> bool:
        return self.num_faces == 0

    def vertices_np(self) -> np.ndarray:
        return self.positions.detach().cpu().numpy()

    def faces_np(self) -> np.ndarray:
        return self.faces.cpu().numpy()

    def with_attributes(self, attributes: Optional[MaterialSample]) -> "TriangleMesh":
        return replace(self, attributes=attributes)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray, scale: float = 1.0) -> "TriangleMesh":
        pos = self.vertices_np() @ np.asarray(rotation).T * scale + np.asarray(translation)
        return replace(self, positions=as_tensor(pos), normals=None, provenance=None)

    def detach(self) -> "TriangleMesh":
        return TriangleMesh(
            positions=self.positions.detach().clone(),
            faces=self.faces.clone(),
            normals=None if self.normals is None else self.normals.detach().clone(),
            attributes=None if self.attributes is None else self.attributes.detach(),
            provenance=self.provenance,
        )


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3)
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("la nube contiene coordenadas no finitas")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass
class PoseVariables:
    """Pose de la cámara como escalares torch (grados) para la ruta diferenciable."""

    elevation: torch.Tensor
    azimuth: torch.Tensor
    radius: torch.Tensor

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {"elevation": self.elevation, "azimuth": self.azimuth, "radius": self.radius}


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3) lineal
    mask: torch.Tensor  # (H, W) cobertura suave
    depth: torch.Tensor  # (H, W) profundidad de vista, +inf sin cobertura
    boundary: torch.Tensor  # (H, W) bool, a <= 2 px de una discontinuidad
    # Entradas del grafo retenido para render_backward (None si no hay grafo)
    graph_inputs: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)


@dataclass
class RigidTransform:
    rotation: np.ndarray  # (3, 3), ortonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise ValueError("la rotación no es ortonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("la rotación debe tener determinante +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: primero `other`, después `self`."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def angle_degrees(self) -> float:
        cos = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos)))
