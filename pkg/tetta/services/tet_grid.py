"""
Rejilla tetraédrica deformable (6 tetraedros de Freudenthal por celda) y
extracción de la superficie por marching tetrahedra con procedencia por vértice.
"""
import itertools
import logging
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from tetta.core.exceptions import ConfigurationError, ContractError
from tetta.models.domain import DTYPE, FieldParams, MaterialSample, Provenance, TetGrid, TriangleMesh

logger = logging.getLogger(__name__)

# Aristas locales de un tetraedro (pares de índices locales)
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)
_LOCAL_EDGE_ID = np.full((4, 4), -1, dtype=np.int64)
for _k, (_a, _b) in enumerate(LOCAL_EDGES):
    _LOCAL_EDGE_ID[_a, _b] = _LOCAL_EDGE_ID[_b, _a] = _k

# Los 6 tetraedros de Freudenthal por cubo: 000 -> e_a -> e_a + e_b -> 111
AXIS_ORDERS = list(itertools.permutations((0, 1, 2)))

# Perturbación de SDF exactamente cero antes de extraer
ZERO_SDF_NUDGE = 1e-12


def _as_resolution(resolution: Union[int, Sequence[int]]) -> Tuple[int, int, int]:
    if isinstance(resolution, (int, np.integer)):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(r) for r in resolution)
    if len(res) != 3:
        raise ConfigurationError(f"La resolución debe tener 3 ejes, se recibió {resolution!r}")
    if min(res) < 2:
        raise ConfigurationError(f"La resolución debe ser >= 2 por eje, se recibió {res}")
    return res


def _lattice_index(ijk: np.ndarray, res: Tuple[int, int, int]) -> np.ndarray:
    ny, nz = res[1] + 1, res[2] + 1
    return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]


def build_grid(resolution: Union[int, Sequence[int]], bounds) -> TetGrid:
    """
    Construye la rejilla tetraédrica: cada cubo se divide en 6 tetraedros que
    comparten la diagonal 000-111 (descomposición consistente entre vecinos).
    """
    res = _as_resolution(resolution)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    lo, hi = bounds
    if not np.all(np.isfinite(bounds)) or np.any(hi - lo <= 0.0):
        raise ConfigurationError(f"Caja degenerada: {bounds.tolist()}")

    axes = [np.linspace(lo[a], hi[a], res[a] + 1) for a in range(3)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vertices = mesh.reshape(-1, 3)

    # Esquinas inferiores de cada cubo
    cubes = np.stack(
        np.meshgrid(*[np.arange(r) for r in res], indexing="ij"), axis=-1
    ).reshape(-1, 1, 1, 3)

    eye = np.eye(3, dtype=np.int64)
    paths = np.zeros((len(AXIS_ORDERS), 4, 3), dtype=np.int64)
    for p, (a, b, _c) in enumerate(AXIS_ORDERS):
        paths[p, 1] = eye[a]
        paths[p, 2] = eye[a] + eye[b]
        paths[p, 3] = 1

    # Orientación: se fija sobre el cubo unitario (todas las celdas son traslaciones)
    v = paths.astype(np.float64)
    vol = np.einsum("pi,pi->p", v[:, 1] - v[:, 0], np.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]))
    flip = vol < 0
    paths[flip, 2], paths[flip, 3] = paths[flip, 3].copy(), paths[flip, 2].copy()

    tets = _lattice_index(cubes + paths[None], res).reshape(-1, 4)

    # Aristas únicas (clave entera i * N + j con i < j)
    n = vertices.shape[0]
    local = tets[:, LOCAL_EDGES]
    keys = (local.min(axis=-1) * n + local.max(axis=-1)).reshape(-1)
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    edges = np.stack([unique_keys // n, unique_keys % n], axis=-1)

    logger.info(f"Rejilla {res}: {n} vértices, {tets.shape[0]} tetraedros, {edges.shape[0]} aristas")
    return TetGrid(
        vertices=torch.as_tensor(vertices, dtype=DTYPE),
        tets=torch.as_tensor(tets, dtype=torch.long),
        edges=torch.as_tensor(edges, dtype=torch.long),
        tet_edges=torch.as_tensor(inverse.reshape(-1, 6), dtype=torch.long),
        bounds=torch.as_tensor(bounds, dtype=DTYPE),
        resolution=res,
    )


def grid_for_bound(resolution: Union[int, Sequence[int]], half_extent: float) -> TetGrid:
    """Rejilla sobre la caja centrada [-h, h]^3."""
    h = float(half_extent)
    return build_grid(resolution, [[-h, -h, -h], [h, h, h]])


def tet_volumes(grid: TetGrid, positions: torch.Tensor = None) -> torch.Tensor:
    pos = grid.vertices if positions is None else positions
    v = pos[grid.tets]
    return torch.einsum(
        "mi,mi->m", v[:, 1] - v[:, 0], torch.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0], dim=-1)
    ) / 6.0


def default_field(grid: TetGrid, sdf=None) -> FieldParams:
    n = grid.num_vertices
    sdf = torch.zeros(n, dtype=DTYPE) if sdf is None else torch.as_tensor(sdf, dtype=DTYPE).clone()
    return FieldParams(sdf=sdf, deform=torch.zeros((n, 3), dtype=DTYPE), pbr=MaterialSample.constant(n))


def _check_field(grid: TetGrid, field: FieldParams) -> None:
    n = grid.num_vertices
    sizes = (field.sdf.shape[0], field.deform.shape[0], len(field.pbr))
    if any(size != n for size in sizes):
        raise ContractError(f"El campo {sizes} no coincide con la rejilla ({n} vértices)")


def _nudged_sdf(sdf: torch.Tensor) -> torch.Tensor:
    return torch.where(sdf == 0, sdf + ZERO_SDF_NUDGE, sdf)


def marching_tetrahedra(grid: TetGrid, field: FieldParams) -> TriangleMesh:
    """
    Extracción diferenciable de la superficie de nivel cero.

    Un vértice por arista con cambio de signo (compartido entre tetraedros),
    p = lerp(v_i + Δv_i, v_j + Δv_j; t) con t = s_i / (s_i - s_j). Los triángulos
    se orientan con la normal hacia el SDF positivo.
    """
    _check_field(grid, field)
    sdf = _nudged_sdf(field.sdf)
    positions = grid.vertices + field.deform

    with torch.no_grad():
        occ = (sdf > 0).cpu().numpy()
        pos_np = positions.detach().cpu().numpy()
        edges = grid.edges.cpu().numpy()
        tets = grid.tets.cpu().numpy()
        tet_edges = grid.tet_edges.cpu().numpy()

        crossing = occ[edges[:, 0]] != occ[edges[:, 1]]
        crossing_ids = np.nonzero(crossing)[0]
        edge_to_vertex = np.full(edges.shape[0], -1, dtype=np.int64)
        edge_to_vertex[crossing_ids] = np.arange(crossing_ids.shape[0])

        occ_tet = occ[tets]
        count = occ_tet.sum(axis=1)
        faces = [np.zeros((0, 3), dtype=np.int64)]
        owners = [np.zeros(0, dtype=np.int64)]

        # Caso 1-3: un vértice "impar" separado de los otros tres
        odd_case = np.nonzero((count == 1) | (count == 3))[0]
        if odd_case.size:
            occ_odd = occ_tet[odd_case]
            lonely = np.where(count[odd_case, None] == 1, occ_odd, ~occ_odd)
            odd = np.argmax(lonely, axis=1)
            others = np.stack([np.delete(np.arange(4), k) for k in range(4)])[odd]
            local_ids = _LOCAL_EDGE_ID[odd[:, None], others]
            tri_edges = np.take_along_axis(tet_edges[odd_case], local_ids, axis=1)
            faces.append(edge_to_vertex[tri_edges])
            owners.append(odd_case)

        # Caso 2-2: cuadrilátero dividido por la diagonal que contiene la arista de menor id
        quad_case = np.nonzero(count == 2)[0]
        if quad_case.size:
            order = np.argsort(~occ_tet[quad_case], axis=1, kind="stable")
            p0, p1, n0, n1 = order[:, 0], order[:, 1], order[:, 2], order[:, 3]
            cycle_local = np.stack(
                [
                    _LOCAL_EDGE_ID[p0, n0],
                    _LOCAL_EDGE_ID[p0, n1],
                    _LOCAL_EDGE_ID[p1, n1],
                    _LOCAL_EDGE_ID[p1, n0],
                ],
                axis=1,
            )
            cycle_edges = np.take_along_axis(tet_edges[quad_case], cycle_local, axis=1)
            q = edge_to_vertex[cycle_edges]
            first_diag = np.isin(np.argmin(cycle_edges, axis=1), (0, 2))
            tri_a = np.where(first_diag[:, None], q[:, [0, 1, 2]], q[:, [1, 2, 3]])
            tri_b = np.where(first_diag[:, None], q[:, [0, 2, 3]], q[:, [1, 3, 0]])
            faces.append(np.stack([tri_a, tri_b], axis=1).reshape(-1, 3))
            owners.append(np.repeat(quad_case, 2))

        faces = np.concatenate(faces, axis=0)
        owners = np.concatenate(owners, axis=0)
        # Orden determinista por tetraedro de origen
        order = np.argsort(owners, kind="stable")
        faces, owners = faces[order], owners[order]

    endpoints = torch.as_tensor(edges[crossing_ids], dtype=torch.long)
    i, j = endpoints[:, 0], endpoints[:, 1]
    s_i, s_j = sdf[i], sdf[j]
    t = s_i / (s_i - s_j)
    surface = positions[i] + t[:, None] * (positions[j] - positions[i])

    if faces.shape[0]:
        with torch.no_grad():
            verts = surface.detach().cpu().numpy()
            tri = verts[faces]
            normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            occ_owner = occ_tet[owners]
            corners = pos_np[tets[owners]]
            n_pos = occ_owner.sum(axis=1, keepdims=True)
            c_pos = (corners * occ_owner[..., None]).sum(axis=1) / n_pos
            c_neg = (corners * ~occ_owner[..., None]).sum(axis=1) / (4 - n_pos)
            wrong = np.einsum("fi,fi->f", normal, c_pos - c_neg) < 0
            faces[wrong] = faces[wrong][:, [0, 2, 1]]

    provenance = Provenance(
        edge_ids=torch.as_tensor(crossing_ids, dtype=torch.long),
        endpoints=endpoints,
        t=t.detach().clone(),
    )
    logger.debug(f"Marching tets: {surface.shape[0]} vértices, {faces.shape[0]} triángulos")
    return TriangleMesh(
        positions=surface,
        faces=torch.as_tensor(faces, dtype=torch.long),
        provenance=provenance,
    )


def surface_attributes(grid: TetGrid, field: FieldParams, mesh: TriangleMesh) -> MaterialSample:
    """Transporta k_PBR a la superficie con los mismos pesos t de la extracción."""
    if mesh.provenance is None:
        raise ContractError("La malla no tiene procedencia (no fue extraída de la rejilla)")
    _check_field(grid, field)
    sdf = _nudged_sdf(field.sdf)
    i, j = mesh.provenance.endpoints[:, 0], mesh.provenance.endpoints[:, 1]
    t = (sdf[i] / (sdf[i] - sdf[j]))[:, None]
    a, b = field.pbr.select(i), field.pbr.select(j)
    blended = MaterialSample(
        kd=a.kd + t * (b.kd - a.kd),
        roughness=a.roughness + t[:, 0] * (b.roughness - a.roughness),
        metalness=a.metalness + t[:, 0] * (b.metalness - a.metalness),
        kn=a.kn + t * (b.kn - a.kn),
    )
    return blended.clamped()


def extract_surface(grid: TetGrid, field: FieldParams) -> TriangleMesh:
    """Malla extraída con atributos PBR de superficie ya adjuntos."""
    mesh = marching_tetrahedra(grid, field)
    return mesh.with_attributes(surface_attributes(grid, field, mesh))


def face_normals(positions: torch.Tensor, faces: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    tri = positions[faces]
    normal = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)
    if not normalize:
        return normal
    return normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-20)


def vertex_normals(mesh: TriangleMesh) -> torch.Tensor:
    """Normales suaves ponderadas por área (diferenciables)."""
    weighted = face_normals(mesh.positions, mesh.faces, normalize=False)
    accum = torch.zeros_like(mesh.positions)
    for k in range(3):
        accum = accum.index_add(0, mesh.faces[:, k], weighted)
    return accum / accum.norm(dim=-1, keepdim=True).clamp_min(1e-20)


def locate_in_grid(grid: TetGrid, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tetraedro contenedor (rejilla sin deformar) y pesos baricéntricos.
    El orden descendente de las coordenadas fraccionarias elige el tetraedro.
    """
    res = np.array(grid.resolution)
    lo = grid.bounds[0].numpy()
    cell = grid.cell_size.numpy()
    f = (np.asarray(points, dtype=np.float64) - lo) / cell
    base = np.clip(np.floor(f).astype(np.int64), 0, res - 1)
    frac = np.clip(f - base, 0.0, 1.0)

    order = np.argsort(-frac, axis=1, kind="stable")
    sorted_frac = np.take_along_axis(frac, order, axis=1)
    eye = np.eye(3, dtype=np.int64)
    c1 = base + eye[order[:, 0]]
    c2 = c1 + eye[order[:, 1]]
    c3 = base + 1
    ids = np.stack([_lattice_index(c, grid.resolution) for c in (base, c1, c2, c3)], axis=1)
    weights = np.stack(
        [
            1.0 - sorted_frac[:, 0],
            sorted_frac[:, 0] - sorted_frac[:, 1],
            sorted_frac[:, 1] - sorted_frac[:, 2],
            sorted_frac[:, 2],
        ],
        axis=1,
    )
    return ids, weights


def edge_manifold_report(faces: np.ndarray) -> Tuple[bool, bool]:
    """(cerrada y de 2 triángulos por arista, orientación consistente)."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return False, False
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected, axis=0, return_counts=True)
    closed = bool(np.all(counts == 2))
    _, directed_counts = np.unique(directed, axis=0, return_counts=True)
    consistent = bool(np.all(directed_counts == 1))
    return closed, consistent
