"""
Mallas analíticas (esfera, caja, toro, elipsoide) y sus SDF exactos.
Sirven como entradas sintéticas ("preset:<nombre>") y como oráculos en las pruebas.
"""
import logging
from typing import Dict, Tuple

import numpy as np

from tetta.core.exceptions import ConfigurationError
from tetta.models.domain import TriangleMesh

logger = logging.getLogger(__name__)

_GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Orienta hacia afuera las caras de una forma estrellada respecto al centroide."""
    center = vertices.mean(axis=0)
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.einsum("fi,fi->f", normal, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def icosphere_arrays(subdivisions: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    vertices = np.array(
        [
            [-1, _GOLDEN, 0], [1, _GOLDEN, 0], [-1, -_GOLDEN, 0], [1, -_GOLDEN, 0],
            [0, -1, _GOLDEN], [0, 1, _GOLDEN], [0, -1, -_GOLDEN], [0, 1, -_GOLDEN],
            [_GOLDEN, 0, -1], [_GOLDEN, 0, 1], [-_GOLDEN, 0, -1], [-_GOLDEN, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
        edges = np.sort(edges, axis=1)
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        midpoints = vertices[unique].mean(axis=1)
        midpoints /= np.linalg.norm(midpoints, axis=1, keepdims=True)
        mid = inverse.reshape(3, -1).T + vertices.shape[0]
        vertices = np.concatenate([vertices, midpoints], axis=0)
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
        faces = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([b, bc, ab], axis=1),
                np.stack([c, ca, bc], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ],
            axis=0,
        )
    return vertices, _orient_outward(vertices, faces)


def sphere_mesh(radius: float = 0.6, subdivisions: int = 4, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    vertices, faces = icosphere_arrays(subdivisions)
    return TriangleMesh.from_numpy(vertices * radius + np.asarray(center), faces)


def ellipsoid_mesh(radii=(0.5, 0.4, 0.35), subdivisions: int = 4) -> TriangleMesh:
    vertices, faces = icosphere_arrays(subdivisions)
    return TriangleMesh.from_numpy(vertices * np.asarray(radii, dtype=np.float64), faces)


def box_mesh(half_size=(0.4, 0.3, 0.25), divisions: int = 8) -> TriangleMesh:
    """Caja cerrada con caras subdivididas; vértices compartidos en las aristas."""
    n = int(divisions)
    lattice = np.stack(np.meshgrid(*[np.arange(n + 1)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    on_surface = np.any((lattice == 0) | (lattice == n), axis=1)
    index = np.full(lattice.shape[0], -1, dtype=np.int64)
    index[on_surface] = np.arange(on_surface.sum())

    def lid(i, j, k):
        return index[(i * (n + 1) + j) * (n + 1) + k]

    faces = []
    grid = np.arange(n)
    u, v = np.meshgrid(grid, grid, indexing="ij")
    u, v = u.reshape(-1), v.reshape(-1)
    for axis in range(3):
        a1, a2 = [a for a in range(3) if a != axis]
        for level in (0, n):
            corners = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                ijk = np.zeros((u.shape[0], 3), dtype=np.int64)
                ijk[:, axis] = level
                ijk[:, a1] = u + du
                ijk[:, a2] = v + dv
                corners.append(lid(ijk[:, 0], ijk[:, 1], ijk[:, 2]))
            q0, q1, q2, q3 = corners
            faces.append(np.stack([q0, q1, q2], axis=1))
            faces.append(np.stack([q0, q2, q3], axis=1))
    faces = np.concatenate(faces, axis=0)
    half = np.asarray(half_size, dtype=np.float64)
    vertices = (lattice[on_surface] / n * 2.0 - 1.0) * half
    return TriangleMesh.from_numpy(vertices, _orient_outward(vertices, faces))


def torus_mesh(major: float = 0.5, minor: float = 0.2, n_major: int = 48, n_minor: int = 24) -> TriangleMesh:
    """Toro en el plano xy; la parametrización (u, v) ya da normales hacia afuera."""
    u = np.arange(n_major) * (2.0 * np.pi / n_major)
    v = np.arange(n_minor) * (2.0 * np.pi / n_minor)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    vertices = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)

    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.reshape(-1), j.reshape(-1)
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)], axis=0)
    return TriangleMesh.from_numpy(vertices, faces)


# --- SDF ANALÍTICOS (oráculos) ---


def sphere_sdf(points: np.ndarray, radius: float = 0.6) -> np.ndarray:
    return np.linalg.norm(points, axis=-1) - radius


def box_sdf(points: np.ndarray, half_size=(0.4, 0.3, 0.25)) -> np.ndarray:
    q = np.abs(points) - np.asarray(half_size)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def torus_sdf(points: np.ndarray, major: float = 0.5, minor: float = 0.2) -> np.ndarray:
    ring = np.linalg.norm(points[..., :2], axis=-1) - major
    return np.sqrt(ring ** 2 + points[..., 2] ** 2) - minor


# --- PRESETS ("preset:<nombre>") ---

_PRESETS = {
    "sphere": sphere_mesh,
    "ellipsoid": ellipsoid_mesh,
    "box": box_mesh,
    "torus": torus_mesh,
}


def _parse_preset(spec: str) -> Tuple[str, Dict[str, object]]:
    """'preset:sphere?radius=0.5' -> ('sphere', {'radius': 0.5})."""
    body = spec.split(":", 1)[1] if spec.startswith("preset:") else spec
    name, _, query = body.partition("?")
    params: Dict[str, object] = {}
    for item in filter(None, query.split("&")):
        key, _, raw = item.partition("=")
        values = [float(x) for x in raw.split(",")]
        params[key] = values[0] if len(values) == 1 else tuple(values)
    return name, params


def is_preset(spec: str) -> bool:
    return isinstance(spec, str) and spec.startswith("preset:")


def preset_mesh(spec: str) -> TriangleMesh:
    name, params = _parse_preset(spec)
    if name not in _PRESETS:
        raise ConfigurationError(f"Preset de malla desconocido: '{name}'. Opciones: {sorted(_PRESETS)}")
    for key in ("subdivisions", "divisions", "n_major", "n_minor"):
        if key in params:
            params[key] = int(params[key])
    logger.info(f"Generando malla analítica '{name}' con parámetros {params}")
    return _PRESETS[name](**params)
