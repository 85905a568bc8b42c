"""Fixed triangular background mesh and per-parameter cut classification.

The background rectangle is tiled by a structured grid of cells, each split
along the same diagonal, so meshes are byte-reproducible across platforms.
Per parameter, triangles are classified against the P1 vertex interpolant of
the oriented levelset into fluid, solid and cut elements; the active mesh is
fluid + cut, and ghost facets are the interior facets of the active mesh that
touch at least one cut element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRect

STATUS_FLUID = 0
STATUS_CUT = 1
STATUS_SOLID = 2

#: vertex values closer to zero than SNAP_REL * h are pushed off the interface
SNAP_REL = 1e-10

GHOST_CUT_ANY = "cut_any"    # facets with at least one cut neighbor
GHOST_CUT_CUT = "cut_cut"    # facets between two cut elements only

TAG_INLET = 0
TAG_OUTLET = 1
TAG_WALL = 2


@dataclass(frozen=True)
class BackgroundMesh:
    """Structured triangulation of the background rectangle."""

    rect: tuple
    h_target: float
    nx: int
    ny: int
    hx: float
    hy: float
    vertices: np.ndarray      # (nv, 2)
    triangles: np.ndarray     # (ntri, 3) ccw vertex ids
    edges: np.ndarray         # (ne, 2) sorted vertex pairs, lexicographic
    tri_edges: np.ndarray     # (ntri, 3), edge opposite local vertex i
    edge_tris: np.ndarray     # (ne, 2), -1 marks a boundary edge second slot
    boundary_tag: np.ndarray  # (ne,), -1 interior, else TAG_*

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def h_char(self):
        return max(self.hx, self.hy)

    @property
    def interior_edges(self):
        return np.where(self.edge_tris[:, 1] >= 0)[0]

    def tri_coords(self, t):
        return self.vertices[self.triangles[t]]

    def triangle_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def content_bytes(self):
        """Deterministic byte serialization used by reproducibility checks."""
        return b"".join(
            [np.ascontiguousarray(a).tobytes() for a in
             (self.vertices, self.triangles, self.edges, self.tri_edges,
              self.edge_tris, self.boundary_tag)])


def build_background_mesh(rect, h):
    """Tile rect=(x0, y0, x1, y1) with cells of size <= h, split into triangles."""
    x0, y0, x1, y1 = (float(v) for v in rect)
    if not (x0 < x1 and y0 < y1) or h <= 0.0:
        raise ValueError("rect must satisfy x0 < x1, y0 < y1 and h > 0")
    if (x1 - x0) < h or (y1 - y0) < h:
        raise DegenerateRect(f"rectangle side shorter than h={h}")

    nx = math.ceil((x1 - x0) / h)
    ny = math.ceil((y1 - y0) / h)
    hx = (x1 - x0) / nx
    hy = (y1 - y0) / ny

    xs = x0 + hx * np.arange(nx + 1)
    ys = y0 + hy * np.arange(ny + 1)
    xs[-1] = x1
    ys[-1] = y1
    xg, yg = np.meshgrid(xs, ys)
    vertices = np.column_stack([xg.ravel(), yg.ravel()])

    # cell (i, j) corners; both triangles keep the same SW-NE diagonal
    i = np.arange(nx)
    j = np.arange(ny)
    ii, jj = np.meshgrid(i, j)
    v00 = (jj * (nx + 1) + ii).ravel()
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    # unique edges, sorted pairs, in lexicographic order
    raw = np.concatenate([
        triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]])
    raw.sort(axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(3, -1).T.copy()

    ne = edges.shape[0]
    edge_tris = np.full((ne, 2), -1, dtype=np.int64)
    tri_ids = np.tile(np.arange(triangles.shape[0]), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_edges = inverse[order]
    sorted_tris = tri_ids[order]
    starts = np.searchsorted(sorted_edges, np.arange(ne))
    ends = np.searchsorted(sorted_edges, np.arange(ne), side="right")
    for e in range(ne):
        incident = sorted_tris[starts[e]:ends[e]]
        edge_tris[e, :len(incident)] = incident

    boundary_tag = np.full(ne, -1, dtype=np.int8)
    bnd = edge_tris[:, 1] < 0
    exy = vertices[edges[bnd]]
    tol_x = 1e-9 * hx
    tol_y = 1e-9 * hy
    on_left = np.all(np.abs(exy[:, :, 0] - x0) <= tol_x, axis=1)
    on_right = np.all(np.abs(exy[:, :, 0] - x1) <= tol_x, axis=1)
    on_wall = (np.all(np.abs(exy[:, :, 1] - y0) <= tol_y, axis=1)
               | np.all(np.abs(exy[:, :, 1] - y1) <= tol_y, axis=1))
    tags = np.full(on_left.shape, TAG_WALL, dtype=np.int8)
    tags[on_left] = TAG_INLET
    tags[on_right] = TAG_OUTLET
    if not np.all(on_left | on_right | on_wall):
        raise RuntimeError("boundary edge off the rectangle outline")
    boundary_tag[bnd] = tags

    return BackgroundMesh(
        rect=(x0, y0, x1, y1), h_target=float(h), nx=nx, ny=ny, hx=hx, hy=hy,
        vertices=vertices, triangles=triangles, edges=edges,
        tri_edges=tri_edges, edge_tris=edge_tris, boundary_tag=boundary_tag)


@dataclass
class CutClassification:
    """Per-parameter element status against the oriented levelset."""

    mesh: BackgroundMesh
    oriented: object
    vertex_values: np.ndarray   # snapped P1 interpolant values at vertices
    status: np.ndarray          # (ntri,) STATUS_*
    ghost_mode: str = GHOST_CUT_ANY
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def active(self):
        return self.status != STATUS_SOLID

    @property
    def active_ids(self):
        return np.where(self.status != STATUS_SOLID)[0]

    @property
    def fluid_ids(self):
        return np.where(self.status == STATUS_FLUID)[0]

    @property
    def cut_ids(self):
        return np.where(self.status == STATUS_CUT)[0]

    @property
    def solid_ids(self):
        return np.where(self.status == STATUS_SOLID)[0]

    @property
    def ghost_facet_ids(self):
        if "ghost" not in self._cache:
            self._cache["ghost"] = ghost_facets(self, self.ghost_mode)
        return self._cache["ghost"]

    def tri_vertex_values(self, t=None):
        if t is None:
            return self.vertex_values[self.mesh.triangles]
        return self.vertex_values[self.mesh.triangles[t]]

    def counts(self):
        return {
            "fluid": int(np.sum(self.status == STATUS_FLUID)),
            "cut": int(np.sum(self.status == STATUS_CUT)),
            "solid": int(np.sum(self.status == STATUS_SOLID)),
        }


def classify_elements(mesh, oriented_levelset, ghost_mode=GHOST_CUT_ANY):
    """Classify triangles from vertex signs of the oriented P1 interpolant.

    Vertex values within SNAP_REL * h of zero are snapped off the interface,
    zeros to the solid side, so the fluid region stays open and cut
    decompositions never produce sliver sub-triangles.
    """
    raw = np.asarray(
        oriented_levelset.values(mesh.vertices[:, 0], mesh.vertices[:, 1]),
        dtype=float)
    eps = SNAP_REL * mesh.h_char
    toward_solid = np.where(raw >= 0.0, eps, -eps)
    snapped = np.where(np.abs(raw) < eps, toward_solid, raw)

    tri_vals = snapped[mesh.triangles]
    n_neg = np.sum(tri_vals < 0.0, axis=1)
    status = np.full(mesh.n_triangles, STATUS_CUT, dtype=np.int8)
    status[n_neg == 3] = STATUS_FLUID
    status[n_neg == 0] = STATUS_SOLID

    return CutClassification(
        mesh=mesh, oriented=oriented_levelset, vertex_values=snapped,
        status=status, ghost_mode=ghost_mode)


def ghost_facets(classification, mode=GHOST_CUT_ANY):
    """Interior facets of the active mesh with a cut neighbor.

    Both neighbors must be active; mode GHOST_CUT_CUT keeps only facets
    between two cut elements.
    """
    mesh = classification.mesh
    status = classification.status
    interior = mesh.interior_edges
    t1 = mesh.edge_tris[interior, 0]
    t2 = mesh.edge_tris[interior, 1]
    both_active = (status[t1] != STATUS_SOLID) & (status[t2] != STATUS_SOLID)
    if mode == GHOST_CUT_ANY:
        near_cut = (status[t1] == STATUS_CUT) | (status[t2] == STATUS_CUT)
    elif mode == GHOST_CUT_CUT:
        near_cut = (status[t1] == STATUS_CUT) & (status[t2] == STATUS_CUT)
    else:
        raise ValueError(f"unknown ghost facet mode {mode!r}")
    return interior[both_active & near_cut]
