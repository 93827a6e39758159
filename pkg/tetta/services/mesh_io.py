"""
Lectura/escritura de mallas Wavefront OBJ con MTL acompañante.

Los atributos PBR viajan por vértice en líneas de comentario con el esquema
`#pbr v_idx kd_r kd_g kd_b rough metal nx ny nz` (v_idx en base 1).
"""
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from tetta.core.exceptions import MeshParseError
from tetta.core.storage import atomic_write_text
from tetta.models.domain import MaterialSample, TriangleMesh

logger = logging.getLogger(__name__)

PBR_TAG = "#pbr"
PBR_SCHEMA = "#pbr-schema v_idx kd_r kd_g kd_b rough metal nx ny nz"
MATERIAL_NAME = "tetta_pbr"


def _fmt(value: float) -> str:
    return f"{float(value):.9g}"


# --- LECTURA ---


def _resolve_index(token: str, n_vertices: int, line_no: int, path: str) -> int:
    raw = token.split("/")[0]
    try:
        index = int(raw)
    except ValueError:
        raise MeshParseError(f"Índice de vértice inválido '{token}'", line_no, path)
    # Índices negativos: relativos a los vértices leídos hasta esta línea
    resolved = n_vertices + index if index < 0 else index - 1
    if index == 0 or not 0 <= resolved < n_vertices:
        raise MeshParseError(f"Índice de vértice fuera de rango: {index} ({n_vertices} vértices)", line_no, path)
    return resolved


def parse_obj(text: str, path: str = "") -> TriangleMesh:
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    pbr_rows = {}

    for line_no, line in enumerate(text.splitlines(), start=1):
        strip = line.strip()
        if not strip:
            continue
        split = strip.split()

        if split[0] == PBR_TAG:
            if len(split) != 10:
                raise MeshParseError(f"Línea #pbr con {len(split) - 1} campos, se esperaban 9", line_no, path)
            try:
                v_idx = int(split[1])
                values = [float(item) for item in split[2:]]
            except ValueError:
                raise MeshParseError("Línea #pbr con valores no numéricos", line_no, path)
            pbr_rows[v_idx - 1] = (values, line_no)
        elif strip[0] == "#":
            continue
        elif split[0] == "v":
            if len(split) < 4:
                raise MeshParseError("Vértice con menos de 3 coordenadas", line_no, path)
            try:
                vertices.append([float(item) for item in split[1:4]])
            except ValueError:
                raise MeshParseError("Coordenada de vértice no numérica", line_no, path)
        elif split[0] == "f":
            polygon = [_resolve_index(item, len(vertices), line_no, path) for item in split[1:]]
            if len(polygon) < 3:
                raise MeshParseError("Cara con menos de 3 vértices", line_no, path)
            # Triangulación en abanico
            for k in range(1, len(polygon) - 1):
                faces.append([polygon[0], polygon[k], polygon[k + 1]])
        else:
            # vn, vt, o, g, s, mtllib, usemtl: sin efecto en la geometría
            pass

    positions = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    attributes = _pbr_attributes(pbr_rows, len(vertices), path)
    return TriangleMesh.from_numpy(positions, np.asarray(faces, dtype=np.int64).reshape(-1, 3), attributes)


def _pbr_attributes(rows: dict, n_vertices: int, path: str) -> Optional[MaterialSample]:
    if not rows:
        return None
    for index, (_, line_no) in rows.items():
        if not 0 <= index < n_vertices:
            raise MeshParseError(f"#pbr para el vértice {index + 1}, la malla tiene {n_vertices}", line_no, path)
    if len(rows) != n_vertices:
        raise MeshParseError(f"Atributos #pbr para {len(rows)} de {n_vertices} vértices", path=path)
    packed = np.array([rows[i][0] for i in range(n_vertices)], dtype=np.float64)
    return MaterialSample.from_array(packed)


def load_mesh(path: Union[str, Path]) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe la malla: {path}")
    if path.suffix.lower() != ".obj":
        raise MeshParseError(f"Formato de malla no soportado '{path.suffix}' (se espera .obj)", path=str(path))
    mesh = parse_obj(path.read_text(encoding="utf-8"), str(path))
    logger.info(f"Malla cargada desde {path}: {mesh.num_vertices} vértices, {mesh.num_faces} caras")
    return mesh


# --- ESCRITURA ---


def format_obj(mesh: TriangleMesh, mtl_name: Optional[str] = None) -> str:
    lines = ["# tetta"]
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
    for x, y, z in mesh.vertices_np():
        lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    if mtl_name:
        lines.append(f"usemtl {MATERIAL_NAME}")
    for a, b, c in mesh.faces_np() + 1:
        lines.append(f"f {a} {b} {c}")
    if mesh.attributes is not None:
        lines.append(PBR_SCHEMA)
        for index, row in enumerate(mesh.attributes.to_array(), start=1):
            lines.append(" ".join([PBR_TAG, str(index), *(_fmt(value) for value in row)]))
    return "\n".join(lines) + "\n"


def format_mtl(mesh: TriangleMesh) -> str:
    """Material promedio (los valores por vértice viven en el OBJ)."""
    if mesh.attributes is not None and len(mesh.attributes):
        packed = mesh.attributes.to_array()
        kd, roughness, metalness = packed[:, 0:3].mean(axis=0), packed[:, 3].mean(), packed[:, 4].mean()
    else:
        kd, roughness, metalness = np.full(3, 0.5), 0.5, 0.0
    return "\n".join([
        f"newmtl {MATERIAL_NAME}",
        f"Kd {_fmt(kd[0])} {_fmt(kd[1])} {_fmt(kd[2])}",
        "Ks 0.04 0.04 0.04",
        f"Pr {_fmt(roughness)}",
        f"Pm {_fmt(metalness)}",
        "",
    ])


def save_mesh(mesh: TriangleMesh, path: Union[str, Path]) -> Path:
    """Escribe OBJ + MTL (mismo nombre base) de forma atómica."""
    path = Path(path)
    mtl_path = path.with_suffix(".mtl")
    atomic_write_text(mtl_path, format_mtl(mesh))
    atomic_write_text(path, format_obj(mesh, mtl_path.name))
    logger.info(f"Malla guardada en {path} ({mesh.num_vertices} vértices, {mesh.num_faces} caras)")
    return path
