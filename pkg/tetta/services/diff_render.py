"""
Rasterizador diferenciable (torch, CPU, float64).

1. Pares píxel-triángulo candidatos: caja del triángulo ampliada 6γ píxeles.
2. Máscara suave: 1 - Π (1 - sigmoid(d_j / γ)) = 1 - exp(-Σ softplus(d_j / γ)),
   con d_j la distancia con signo en pantalla al borde del triángulo (positiva dentro).
3. Z-buffer duro (empates por menor índice de triángulo) y baricéntricas con
   corrección de perspectiva para interpolar posición, normal y material.
4. Sombreado PBR por píxel y composición sobre el fondo con la máscara suave.

La visibilidad se trata como localmente constante: el gradiente no atraviesa
el cambio de triángulo ganador en el z-buffer.
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from tetta.core.exceptions import ContractError
from tetta.models.domain import DTYPE, MaterialSample, PoseVariables, RenderOutput, TriangleMesh
from tetta.models.schemas import Intrinsics
from tetta.services.envlight import EnvironmentLight
from tetta.services.shading import shade_pbr
from tetta.services.tet_grid import face_normals, vertex_normals
from tetta.services.virtual_camera import PoseLike, camera_from_spherical, project_points

logger = logging.getLogger(__name__)

WHITE = (1.0, 1.0, 1.0)
DEFAULT_SIGMA = 1.5
CUTOFF_SIGMAS = 6.0
# Píxeles con Σ softplus mayor se toman como saturados (máscara constante)
SATURATION = 15.0
BOUNDARY_RADIUS = 2
DEPTH_JUMP = 0.02
PAIR_CHUNK = 1_000_000


def _cross2(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _segment_distance(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    edge = b - a
    t = ((p - a) * edge).sum(dim=-1) / (edge * edge).sum(dim=-1).clamp_min(1e-30)
    closest = a + t.clamp(0.0, 1.0)[..., None] * edge
    return torch.sqrt(((p - closest) ** 2).sum(dim=-1) + 1e-24)


def signed_screen_distance(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Distancia con signo del punto p al borde del triángulo (a, b, c); positiva dentro."""
    sign = torch.sign(_cross2(b - a, c - a))
    inside = (
        (_cross2(b - a, p - a) * sign >= 0)
        & (_cross2(c - b, p - b) * sign >= 0)
        & (_cross2(a - c, p - c) * sign >= 0)
    )
    dist = torch.minimum(
        torch.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)), _segment_distance(p, c, a)
    )
    return torch.where(inside, dist, -dist)


def screen_barycentrics(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    area = _cross2(b - a, c - a)
    b0 = _cross2(b - p, c - p) / area
    b1 = _cross2(c - p, a - p) / area
    return torch.stack([b0, b1, 1.0 - b0 - b1], dim=-1)


def _pixel_centers(pixels: torch.Tensor, width: int) -> torch.Tensor:
    return torch.stack([(pixels % width).to(DTYPE) + 0.5, (pixels // width).to(DTYPE) + 0.5], dim=-1)


def _candidate_pairs(
    xy: np.ndarray, faces: np.ndarray, tri_ids: np.ndarray, width: int, height: int, cutoff: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Enumera (triángulo, píxel) dentro de la caja ampliada de cada triángulo."""
    tri = xy[faces[tri_ids]]
    x0 = np.clip(np.ceil(tri[..., 0].min(axis=1) - cutoff - 0.5), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(tri[..., 0].max(axis=1) + cutoff - 0.5), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(tri[..., 1].min(axis=1) - cutoff - 0.5), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(tri[..., 1].max(axis=1) + cutoff - 0.5), 0, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    total = int(count.sum())
    rep = np.repeat(np.arange(tri_ids.shape[0]), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    px = x0[rep] + local % nx[rep]
    py = y0[rep] + local // nx[rep]
    return tri_ids[rep], py * width + px


def _visible_triangles(xy: np.ndarray, depth: np.ndarray, faces: np.ndarray, intrinsics: Intrinsics, cutoff: float):
    tri_xy = xy[faces]
    tri_depth = depth[faces]
    area = (tri_xy[:, 1, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 2, 1] - tri_xy[:, 0, 1]) - (
        tri_xy[:, 1, 1] - tri_xy[:, 0, 1]
    ) * (tri_xy[:, 2, 0] - tri_xy[:, 0, 0])
    keep = np.all(tri_depth > intrinsics.near, axis=1) & np.all(np.isfinite(tri_xy), axis=(1, 2))
    keep &= np.abs(area) > 1e-12
    keep &= (tri_xy[..., 0].max(axis=1) > -cutoff) & (tri_xy[..., 0].min(axis=1) < intrinsics.width + cutoff)
    keep &= (tri_xy[..., 1].max(axis=1) > -cutoff) & (tri_xy[..., 1].min(axis=1) < intrinsics.height + cutoff)
    return np.nonzero(keep)[0]


def _boundary_flags(covered: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Píxeles a <= 2 px de una discontinuidad de cobertura o profundidad."""
    edge = np.zeros_like(covered)
    for axis in (0, 1):
        a = covered
        b = np.roll(covered, -1, axis=axis)
        da = depth
        db = np.roll(depth, -1, axis=axis)
        with np.errstate(invalid="ignore"):
            jump = (a != b) | (a & b & (np.abs(da - db) > DEPTH_JUMP * np.minimum(da, db)))
        # Sin envolver en el borde de la imagen
        if axis == 0:
            jump[-1, :] = False
        else:
            jump[:, -1] = False
        edge |= jump | np.roll(jump, 1, axis=axis)
    kernel = 2 * BOUNDARY_RADIUS + 1
    dilated = F.max_pool2d(
        torch.as_tensor(edge, dtype=torch.float32)[None, None], kernel, stride=1, padding=BOUNDARY_RADIUS
    )
    return dilated[0, 0].numpy() > 0.5


def _interpolate_material(material: MaterialSample, faces: torch.Tensor, weights: torch.Tensor) -> MaterialSample:
    def lerp(values: torch.Tensor) -> torch.Tensor:
        corner = values[faces]
        if corner.ndim == 3:
            return (corner * weights[..., None]).sum(dim=1)
        return (corner * weights).sum(dim=1)

    return MaterialSample(
        kd=lerp(material.kd),
        roughness=lerp(material.roughness),
        metalness=lerp(material.metalness),
        kn=lerp(material.kn),
    ).clamped()


def _graph_inputs(mesh: TriangleMesh, camera: PoseLike, material: MaterialSample) -> Optional[Dict[str, torch.Tensor]]:
    candidates = {"positions": mesh.positions}
    candidates.update({k: v for k, v in zip(("kd", "roughness", "metalness", "kn"), (
        material.kd, material.roughness, material.metalness, material.kn))})
    if isinstance(camera, PoseVariables):
        candidates.update(camera.parameters())
    tracked = {name: t for name, t in candidates.items() if t.requires_grad}
    return tracked or None


def render(
    mesh: TriangleMesh,
    camera: PoseLike,
    intrinsics: Intrinsics,
    env: EnvironmentLight,
    background: Sequence[float] = WHITE,
    sigma: float = DEFAULT_SIGMA,
    smooth_normals: bool = True,
    roughness: Optional[float] = None,
    metalness: Optional[float] = None,
) -> RenderOutput:
    """
    Renderiza la malla (con atributos PBR por vértice) desde la cámara.
    roughness / metalness fijan un valor global (edición de material).
    """
    width, height = intrinsics.width, intrinsics.height
    n_pixels = width * height
    bg = torch.as_tensor(background, dtype=DTYPE).reshape(3)

    material = mesh.attributes if mesh.attributes is not None else MaterialSample.constant(mesh.num_vertices)
    if len(material) != mesh.num_vertices:
        raise ContractError(f"Atributos para {len(material)} vértices, la malla tiene {mesh.num_vertices}")
    if roughness is not None:
        material = MaterialSample(material.kd, torch.full_like(material.roughness, roughness), material.metalness, material.kn)
    if metalness is not None:
        material = MaterialSample(material.kd, material.roughness, torch.full_like(material.metalness, metalness), material.kn)

    cam = camera_from_spherical(camera, intrinsics)
    xy, depth = project_points(mesh.positions, cam) if mesh.num_vertices else (
        torch.zeros((0, 2), dtype=DTYPE), torch.zeros(0, dtype=DTYPE))
    cutoff = CUTOFF_SIGMAS * sigma

    faces_np = mesh.faces_np()
    xy_np = xy.detach().numpy()
    depth_np = depth.detach().numpy()
    visible = _visible_triangles(xy_np, depth_np, faces_np, intrinsics, cutoff) if faces_np.size else np.zeros(0, np.int64)

    # 1. Pares candidatos y distancias (sin gradiente) por bloques de triángulos
    pair_tri, pair_pix, pair_d = [], [], []
    if visible.size:
        tri_xy = xy_np[faces_np[visible]]
        span = (tri_xy.max(axis=1) - tri_xy.min(axis=1) + 2.0 * cutoff + 1.0).prod(axis=1)
        blocks = np.split(visible, np.nonzero(np.diff(np.floor(np.cumsum(span) / PAIR_CHUNK)))[0] + 1)
        with torch.no_grad():
            for block in blocks:
                tris, pixels = _candidate_pairs(xy_np, faces_np, block, width, height, cutoff)
                if not tris.size:
                    continue
                corners = xy[mesh.faces[torch.as_tensor(tris)]]
                p = _pixel_centers(torch.as_tensor(pixels), width)
                d = signed_screen_distance(p, corners[:, 0], corners[:, 1], corners[:, 2]).numpy()
                near = d > -cutoff
                pair_tri.append(tris[near])
                pair_pix.append(pixels[near])
                pair_d.append(d[near])
    pair_tri = np.concatenate(pair_tri) if pair_tri else np.zeros(0, np.int64)
    pair_pix = np.concatenate(pair_pix) if pair_pix else np.zeros(0, np.int64)
    pair_d = np.concatenate(pair_d) if pair_d else np.zeros(0)

    # 2. Máscara suave
    softplus_np = np.logaddexp(0.0, pair_d / sigma)
    total_np = np.bincount(pair_pix, weights=softplus_np, minlength=n_pixels)
    saturated = total_np > SATURATION
    active = ~saturated[pair_pix]
    act_tri = torch.as_tensor(pair_tri[active])
    act_pix = torch.as_tensor(pair_pix[active])
    corners = xy[mesh.faces[act_tri]] if act_tri.numel() else torch.zeros((0, 3, 2), dtype=DTYPE)
    d_active = signed_screen_distance(
        _pixel_centers(act_pix, width), corners[:, 0], corners[:, 1], corners[:, 2]
    )
    total = torch.as_tensor(np.where(saturated, total_np, 0.0), dtype=DTYPE)
    total = total.index_add(0, act_pix, F.softplus(d_active / sigma))
    mask = 1.0 - torch.exp(-total)

    # 3. Z-buffer
    inside = pair_d >= 0.0
    cov_tri, cov_pix = pair_tri[inside], pair_pix[inside]
    depth_img = np.full(n_pixels, np.inf)
    win_tri = np.zeros(0, np.int64)
    win_pix = np.zeros(0, np.int64)
    if cov_tri.size:
        with torch.no_grad():
            c = xy[mesh.faces[torch.as_tensor(cov_tri)]]
            bary = screen_barycentrics(_pixel_centers(torch.as_tensor(cov_pix), width), c[:, 0], c[:, 1], c[:, 2])
            w = depth[mesh.faces[torch.as_tensor(cov_tri)]]
            pix_depth = (1.0 / (bary / w).sum(dim=-1)).numpy()
        order = np.lexsort((cov_tri, pix_depth, cov_pix))
        first = np.unique(cov_pix[order], return_index=True)[1]
        win_tri, win_pix = cov_tri[order][first], cov_pix[order][first]
        depth_img[win_pix] = pix_depth[order][first]

    # 4. Sombreado de los píxeles cubiertos
    color_img = bg.expand(n_pixels, 3).clone()
    depth_t = torch.as_tensor(depth_img, dtype=DTYPE)
    if win_tri.size:
        wt = torch.as_tensor(win_tri)
        wp = torch.as_tensor(win_pix)
        faces = mesh.faces[wt]
        c = xy[faces]
        bary = screen_barycentrics(_pixel_centers(wp, width), c[:, 0], c[:, 1], c[:, 2])
        persp = bary / depth[faces]
        inv_depth = persp.sum(dim=-1)
        weights = persp / inv_depth[:, None]
        depth_t = depth_t.index_put((wp,), 1.0 / inv_depth)

        points = (mesh.positions[faces] * weights[..., None]).sum(dim=1)
        if smooth_normals:
            normals = (vertex_normals(mesh)[faces] * weights[..., None]).sum(dim=1)
            normals = normals / normals.norm(dim=-1, keepdim=True).clamp_min(1e-20)
        else:
            normals = face_normals(mesh.positions, mesh.faces)[wt]
        view_dirs = cam.eye - points
        view_dirs = view_dirs / view_dirs.norm(dim=-1, keepdim=True).clamp_min(1e-20)
        shaded = shade_pbr(_interpolate_material(material, faces, weights), normals, view_dirs, env)
        color_img = color_img.index_put((wp,), shaded.color)

    rgb = mask[:, None] * color_img + (1.0 - mask[:, None]) * bg
    covered = np.zeros(n_pixels, dtype=bool)
    covered[win_pix] = True
    boundary = _boundary_flags(covered.reshape(height, width), depth_img.reshape(height, width))

    logger.debug(
        f"Render {width}x{height}: {visible.size} triángulos visibles, {pair_tri.size} pares, "
        f"{int(active.sum())} activos, {win_pix.size} píxeles cubiertos"
    )
    return RenderOutput(
        rgb=rgb.reshape(height, width, 3),
        mask=mask.reshape(height, width),
        depth=depth_t.reshape(height, width),
        boundary=torch.as_tensor(boundary),
        graph_inputs=_graph_inputs(mesh, camera, material),
    )


def render_backward(
    output: RenderOutput,
    grad_rgb: Optional[torch.Tensor],
    grad_mask: Optional[torch.Tensor],
    wrt: Optional[Dict[str, torch.Tensor]] = None,
) -> Dict[str, torch.Tensor]:
    """
    Gradientes de <grad_rgb, rgb> + <grad_mask, mask> respecto a `wrt`
    (por defecto, las entradas registradas en el render: posiciones, material y pose).
    Pasar en `wrt` los tensores del campo (s, Δv, k_PBR) compone la cadena a
    través de la extracción de la superficie.
    """
    inputs = wrt if wrt is not None else output.graph_inputs
    if not inputs:
        raise ContractError("El render no conserva el grafo (no hay entradas con gradiente)")
    if output.rgb.grad_fn is None and output.mask.grad_fn is None:
        raise ContractError("El render no conserva el grafo de la pasada directa")

    outputs, grad_outputs = [], []
    for tensor, grad in ((output.rgb, grad_rgb), (output.mask, grad_mask)):
        if grad is None or tensor.grad_fn is None:
            continue
        grad = torch.as_tensor(grad, dtype=DTYPE)
        if grad.shape != tensor.shape:
            raise ContractError(f"Gradiente de forma {tuple(grad.shape)} para salida {tuple(tensor.shape)}")
        outputs.append(tensor)
        grad_outputs.append(grad)

    names = list(inputs)
    if not outputs:
        return {name: torch.zeros_like(inputs[name]) for name in names}
    grads = torch.autograd.grad(
        outputs, [inputs[n] for n in names], grad_outputs=grad_outputs, retain_graph=True, allow_unused=True
    )
    return {
        name: torch.zeros_like(inputs[name]) if grad is None else grad for name, grad in zip(names, grads)
    }
