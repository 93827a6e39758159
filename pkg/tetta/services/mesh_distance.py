"""
Consultas de distancia sobre mallas de triángulos: BVH de cajas alineadas,
distancia sin signo vectorizada y número de giro generalizado jerárquico
(aproximación dipolar en campo lejano).
"""
import logging
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from tetta.core.exceptions import ContractError
from tetta.models.domain import TriangleMesh
from tetta.services.tet_grid import edge_manifold_report

logger = logging.getLogger(__name__)


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Punto más cercano de cada triángulo (a, b, c) a p; todo (K, 3)."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("ki,ki->k", ab, ap)
    d2 = np.einsum("ki,ki->k", ac, ap)
    d3 = np.einsum("ki,ki->k", ab, bp)
    d4 = np.einsum("ki,ki->k", ac, bp)
    d5 = np.einsum("ki,ki->k", ab, cp)
    d6 = np.einsum("ki,ki->k", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        result = a + ab * (vb * denom)[:, None] + ac * (vc * denom)[:, None]

        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        result = np.where(on_bc[:, None], b + (c - b) * w_bc[:, None], result)

        w_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        result = np.where(on_ac[:, None], a + ac * w_ac[:, None], result)

        result = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, result)

        v_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        result = np.where(on_ab[:, None], a + ab * v_ab[:, None], result)

        result = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, result)
        result = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, result)

    # Triángulos degenerados: el vértice más cercano
    bad = ~np.all(np.isfinite(result), axis=1)
    if np.any(bad):
        cand = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.linalg.norm(cand - p[bad][:, None], axis=-1), axis=1)
        result[bad] = cand[np.arange(cand.shape[0]), k]
    return result


def triangle_solid_angles(q: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Ángulo sólido con signo de cada triángulo visto desde q."""
    ra, rb, rc = a - q, b - q, c - q
    la, lb, lc = (np.linalg.norm(r, axis=1) for r in (ra, rb, rc))
    det = np.einsum("ki,ki->k", ra, np.cross(rb, rc))
    denom = (
        la * lb * lc
        + np.einsum("ki,ki->k", ra, rb) * lc
        + np.einsum("ki,ki->k", ra, rc) * lb
        + np.einsum("ki,ki->k", rb, rc) * la
    )
    return 2.0 * np.arctan2(det, denom)


class TriangleBVH:
    """BVH de cajas alineadas a los ejes con división por la mediana."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 8):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        if self.faces.shape[0] == 0:
            raise ContractError("No se puede construir un BVH sobre una malla vacía")
        self.leaf_size = leaf_size
        tri = self.vertices[self.faces]
        self.triangles = tri
        centroids = tri.mean(axis=1)
        tri_min, tri_max = tri.min(axis=1), tri.max(axis=1)

        order = np.arange(tri.shape[0])
        starts, ends, lefts, rights = [], [], [], []
        stack = [(0, tri.shape[0], -1, False)]
        while stack:
            start, end, parent, is_right = stack.pop()
            node = len(starts)
            starts.append(start)
            ends.append(end)
            lefts.append(-1)
            rights.append(-1)
            if parent >= 0:
                if is_right:
                    rights[parent] = node
                else:
                    lefts[parent] = node
            if end - start <= leaf_size:
                continue
            idx = order[start:end]
            extent = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
            axis = int(np.argmax(extent))
            mid = (end - start) // 2
            part = np.argpartition(centroids[idx, axis], mid, kind="introselect")
            order[start:end] = idx[part]
            stack.append((start + mid, end, node, True))
            stack.append((start, start + mid, node, False))

        self.order = order
        self.start = np.asarray(starts)
        self.end = np.asarray(ends)
        self.left = np.asarray(lefts)
        self.right = np.asarray(rights)
        self.is_leaf = self.left < 0

        # Cajas por nodo
        n_nodes = self.start.shape[0]
        sorted_min, sorted_max = tri_min[order], tri_max[order]
        self.box_min = np.empty((n_nodes, 3))
        self.box_max = np.empty((n_nodes, 3))
        for k in range(n_nodes):
            self.box_min[k] = sorted_min[self.start[k]:self.end[k]].min(axis=0)
            self.box_max[k] = sorted_max[self.start[k]:self.end[k]].max(axis=0)

        # Triángulos de cada hoja (relleno -1)
        self.leaf_tris = np.full((n_nodes, leaf_size), -1, dtype=np.int64)
        for k in np.nonzero(self.is_leaf)[0]:
            members = order[self.start[k]:self.end[k]]
            self.leaf_tris[k, : members.shape[0]] = members

        # Datos dipolares: normal de área total, centro ponderado y radio
        area_normal = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = np.linalg.norm(area_normal, axis=1)
        prefix_an = np.concatenate([np.zeros((1, 3)), np.cumsum(area_normal[order], axis=0)])
        prefix_a = np.concatenate([[0.0], np.cumsum(area[order])])
        prefix_ac = np.concatenate([np.zeros((1, 3)), np.cumsum((area[:, None] * centroids)[order], axis=0)])
        self.node_area_normal = prefix_an[self.end] - prefix_an[self.start]
        node_area = prefix_a[self.end] - prefix_a[self.start]
        box_center = 0.5 * (self.box_min + self.box_max)
        weighted = (prefix_ac[self.end] - prefix_ac[self.start]) / np.maximum(node_area, 1e-300)[:, None]
        self.node_center = np.where((node_area > 0)[:, None], weighted, box_center)
        corners = np.stack(
            [np.where(np.array([(c >> k) & 1 for k in range(3)], dtype=bool), self.box_max, self.box_min) for c in range(8)],
            axis=1,
        )
        self.node_radius = np.linalg.norm(corners - self.node_center[:, None], axis=-1).max(axis=1)

        self._centroid_tree = cKDTree(centroids)

    def _box_distance2(self, points: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        below = np.maximum(self.box_min[nodes] - points, 0.0)
        above = np.maximum(points - self.box_max[nodes], 0.0)
        return np.einsum("ki,ki->k", below + above, below + above)

    def _triangle_distance2(self, points: np.ndarray, tris: np.ndarray) -> np.ndarray:
        t = self.triangles[tris]
        closest = closest_point_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])
        diff = closest - points
        return np.einsum("ki,ki->k", diff, diff)

    def distance2(self, points: np.ndarray) -> np.ndarray:
        """Distancia cuadrada sin signo a la superficie (poda por cota superior)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, nearest = self._centroid_tree.query(points)
        best = self._triangle_distance2(points, nearest)

        q = np.arange(points.shape[0])
        nodes = np.zeros_like(q)
        while q.size:
            keep = self._box_distance2(points[q], nodes) < best[q]
            q, nodes = q[keep], nodes[keep]
            leaf = self.is_leaf[nodes]

            lq, ln = q[leaf], nodes[leaf]
            if lq.size:
                tris = self.leaf_tris[ln]
                valid = tris >= 0
                qq = np.broadcast_to(lq[:, None], tris.shape)[valid]
                d2 = self._triangle_distance2(points[qq], tris[valid])
                np.minimum.at(best, qq, d2)

            iq, inner = q[~leaf], nodes[~leaf]
            q = np.concatenate([iq, iq])
            nodes = np.concatenate([self.left[inner], self.right[inner]])
        return best

    def winding_number(self, points: np.ndarray, beta: float = 2.0) -> np.ndarray:
        """Número de giro generalizado; nodos lejanos (dist > beta * radio) como dipolos."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        total = np.zeros(points.shape[0])
        q = np.arange(points.shape[0])
        nodes = np.zeros_like(q)
        while q.size:
            diff = self.node_center[nodes] - points[q]
            dist = np.linalg.norm(diff, axis=1)
            far = dist > beta * self.node_radius[nodes]
            if np.any(far):
                contrib = np.einsum("ki,ki->k", diff[far], self.node_area_normal[nodes[far]]) / dist[far] ** 3
                np.add.at(total, q[far], contrib)

            near_leaf = ~far & self.is_leaf[nodes]
            if np.any(near_leaf):
                tris = self.leaf_tris[nodes[near_leaf]]
                valid = tris >= 0
                qq = np.broadcast_to(q[near_leaf][:, None], tris.shape)[valid]
                t = self.triangles[tris[valid]]
                np.add.at(total, qq, triangle_solid_angles(points[qq], t[:, 0], t[:, 1], t[:, 2]))

            inner = ~far & ~self.is_leaf[nodes]
            iq, inn = q[inner], nodes[inner]
            q = np.concatenate([iq, iq])
            nodes = np.concatenate([self.left[inn], self.right[inn]])
        return total / (4.0 * np.pi)


class MeshDistanceField:
    """SDF de una malla: distancia sin signo por BVH, signo por número de giro > 0.5."""

    def __init__(self, mesh: TriangleMesh, chunk: int = 32768):
        if mesh.is_empty():
            raise ContractError("La malla está vacía")
        self.vertices = mesh.vertices_np()
        self.faces = mesh.faces_np()
        self.chunk = chunk
        self.bvh = TriangleBVH(self.vertices, self.faces)
        closed, consistent = edge_manifold_report(self.faces)
        self.reliable = closed and consistent
        if not self.reliable:
            logger.warning("La malla no es cerrada/variedad por aristas: el signo del SDF no es confiable")

    def _chunked(self, fn, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = [fn(points[k:k + self.chunk]) for k in range(0, points.shape[0], self.chunk)]
        return np.concatenate(out) if out else np.zeros(0)

    def unsigned(self, points: np.ndarray) -> np.ndarray:
        return np.sqrt(self._chunked(self.bvh.distance2, points))

    def winding(self, points: np.ndarray) -> np.ndarray:
        return self._chunked(self.bvh.winding_number, points)

    def signed(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(sdf, dentro) con sdf negativo en el interior."""
        distance = self.unsigned(points)
        inside = self.winding(points) > 0.5
        return np.where(inside, -distance, distance), inside
