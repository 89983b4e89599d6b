"""Structured triangulations of the unit square.

Meshes are uniform right-triangle grids: the square is divided into
``n x n`` cells (``n = 2**level``) and every cell is split along the
lower-left to upper-right diagonal.  This family is shape-regular,
quasi-uniform and nested under dyadic refinement, which the convergence
studies rely on for exact coarse-to-fine transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Mesh",
    "build_unit_square_mesh",
    "refine_uniform",
    "boundary_arc_length",
    "mesh_to_off_text",
]


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation of the unit square.

    Attributes
    ----------
    vertices : (nv, 2) float array, ordered lexicographically by (y, x).
    triangles : (nt, 3) int array of vertex indices, positively oriented.
    boundary_edges : (nb, 2) int array of vertex pairs lying on the boundary.
    boundary_edge_tri : (nb,) int array, parent triangle of each boundary edge.
    level : refinement depth (h = 2**-level).
    divisions : cells per side, 2**level.
    parent : the coarser mesh this one was refined from, if any.
    parent_triangle : (nt,) map from each triangle to its parent triangle.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_edge_tri: np.ndarray
    level: int
    divisions: int
    parent: Optional["Mesh"] = None
    parent_triangle: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_edges,
                    self.boundary_edge_tri):
            arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def h(self) -> float:
        """Longest edge length (the cell diagonal)."""
        return np.sqrt(2.0) / self.divisions

    def triangle_areas(self) -> np.ndarray:
        """Signed areas of all triangles (positive by construction)."""
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def boundary_edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def boundary_vertices(self) -> np.ndarray:
        """Sorted indices of the vertices lying on the boundary."""
        return np.unique(self.boundary_edges)

    def locate_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Find containing triangles and barycentric coordinates.

        Points on inter-cell boundaries are assigned to one of the adjacent
        triangles; the returned barycentric coordinates are exact for the
        structured geometry.  Returns ``(tri_index, lambdas)`` with shapes
        ``(m,)`` and ``(m, 3)``.
        """
        pts = np.asarray(points, dtype=float)
        n = self.divisions
        ix = np.clip(np.floor(pts[:, 0] * n).astype(int), 0, n - 1)
        iy = np.clip(np.floor(pts[:, 1] * n).astype(int), 0, n - 1)
        lx = pts[:, 0] * n - ix
        ly = pts[:, 1] * n - iy
        lower = ly <= lx
        tri = 2 * (iy * n + ix) + np.where(lower, 0, 1)
        lam = np.empty((pts.shape[0], 3))
        # lower triangle (ll, lr, ur): lam = (1-lx, lx-ly, ly)
        lam[lower, 0] = 1.0 - lx[lower]
        lam[lower, 1] = lx[lower] - ly[lower]
        lam[lower, 2] = ly[lower]
        up = ~lower
        # upper triangle (ll, ur, ul): lam = (1-ly, lx, ly-lx)
        lam[up, 0] = 1.0 - ly[up]
        lam[up, 1] = lx[up]
        lam[up, 2] = ly[up] - lx[up]
        return tri, lam


def build_unit_square_mesh(level: int) -> Mesh:
    """Build the level-``level`` structured mesh of (0,1)^2.

    The mesh has ``(n+1)^2`` vertices, ``2 n^2`` triangles and ``4 n``
    boundary edges for ``n = 2**level``.
    """
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    n = 2 ** level
    coords = np.arange(n + 1) / n
    xx, yy = np.meshgrid(coords, coords)  # row index = y, col index = x
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    ii = ii.ravel()
    jj = jj.ravel()
    ll = jj * (n + 1) + ii
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    edges = []
    edge_tri = []
    for k in range(n):
        # bottom side, edge (k, k+1) belongs to lower triangle of cell (k, 0)
        edges.append((k, k + 1))
        edge_tri.append(2 * k)
        # right side, edge of lower triangle of cell (n-1, k)
        edges.append((k * (n + 1) + n, (k + 1) * (n + 1) + n))
        edge_tri.append(2 * (k * n + n - 1))
        # top side, edge of upper triangle of cell (k, n-1)
        edges.append((n * (n + 1) + k, n * (n + 1) + k + 1))
        edge_tri.append(2 * ((n - 1) * n + k) + 1)
        # left side, edge of upper triangle of cell (0, k)
        edges.append((k * (n + 1), (k + 1) * (n + 1)))
        edge_tri.append(2 * (k * n) + 1)
    boundary_edges = np.asarray(edges, dtype=np.int64)
    boundary_edge_tri = np.asarray(edge_tri, dtype=np.int64)

    return Mesh(vertices, triangles, boundary_edges, boundary_edge_tri,
                level=level, divisions=n)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four via edge midpoints.

    On this structured family the midpoint refinement reproduces the next
    structured level exactly (the middle child of a lower triangle is the
    upper triangle of a subcell and vice versa), so the result is
    ``build_unit_square_mesh(level + 1)`` with parent links attached.
    """
    fine = build_unit_square_mesh(mesh.level + 1)
    n_f = fine.divisions
    t = np.arange(fine.num_triangles)
    cell = t // 2
    is_upper = (t % 2).astype(bool)
    cx = cell % n_f
    cy = cell // n_f
    px = cx // 2
    py = cy // 2
    dx = cx % 2
    dy = cy % 2
    # children keep the parent's orientation except the middle child, which
    # flips: subcell (0,1) of an upper parent holds its middle (lower) child
    # and subcell (1,0) of a lower parent holds its middle (upper) child.
    parent_is_upper = np.where(
        is_upper,
        ~((dx == 1) & (dy == 0)),  # fine upper: parent lower only in (1,0)
        (dx == 0) & (dy == 1),     # fine lower: parent upper only in (0,1)
    )
    parent_tri = 2 * (py * mesh.divisions + px) + parent_is_upper.astype(np.int64)
    return Mesh(fine.vertices, fine.triangles, fine.boundary_edges,
                fine.boundary_edge_tri, level=fine.level, divisions=n_f,
                parent=mesh, parent_triangle=parent_tri)


def boundary_arc_length(mesh: Mesh) -> float:
    """Total length of the boundary polygon (4 for the unit square)."""
    return float(mesh.boundary_edge_lengths().sum())


def mesh_to_off_text(mesh: Mesh) -> str:
    """Plain-text OFF-like listing of the mesh, for debugging."""
    lines = ["OFF", f"{mesh.num_vertices} {mesh.num_triangles} 0"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    return "\n".join(lines) + "\n"
