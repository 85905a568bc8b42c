"""Taylor-Hood spaces on the background mesh.

P2 vector velocity (nodes at vertices and edge midpoints, two interleaved
components per node) and P1 scalar pressure share a parameter-independent
numbering, so coefficient vectors of different parameters live in the same
space.  Strong boundary conditions and the constant inlet lifting are handled
here as well.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .background_mesh import TAG_INLET, TAG_OUTLET, TAG_WALL
from .errors import IncompatibleLifting

# reference P2 element: local nodes [v0, v1, v2, m12, m20, m01]
_EDGE_OF_NODE = [(1, 2), (2, 0), (0, 1)]

_GRAD_LAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _lambdas(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


def p1_values(pts):
    """P1 basis values at reference points, shape (n, 3)."""
    return _lambdas(pts)


P1_GRADS = _GRAD_LAMBDA.copy()


def p2_values(pts):
    """P2 basis values at reference points, shape (n, 6)."""
    lam = _lambdas(pts)
    out = np.empty((lam.shape[0], 6))
    out[:, :3] = lam * (2.0 * lam - 1.0)
    for k, (a, b) in enumerate(_EDGE_OF_NODE):
        out[:, 3 + k] = 4.0 * lam[:, a] * lam[:, b]
    return out


def p2_grads(pts):
    """P2 basis gradients at reference points, shape (n, 6, 2)."""
    lam = _lambdas(pts)
    out = np.empty((lam.shape[0], 6, 2))
    for i in range(3):
        out[:, i, :] = (4.0 * lam[:, i] - 1.0)[:, None] * _GRAD_LAMBDA[i]
    for k, (a, b) in enumerate(_EDGE_OF_NODE):
        out[:, 3 + k, :] = 4.0 * (lam[:, a][:, None] * _GRAD_LAMBDA[b]
                                  + lam[:, b][:, None] * _GRAD_LAMBDA[a])
    return out


def p2_reference_hessians():
    """Constant reference Hessians of the P2 basis, shape (6, 2, 2)."""
    out = np.empty((6, 2, 2))
    for i in range(3):
        out[i] = 4.0 * np.outer(_GRAD_LAMBDA[i], _GRAD_LAMBDA[i])
    for k, (a, b) in enumerate(_EDGE_OF_NODE):
        out[3 + k] = 4.0 * (np.outer(_GRAD_LAMBDA[a], _GRAD_LAMBDA[b])
                            + np.outer(_GRAD_LAMBDA[b], _GRAD_LAMBDA[a]))
    return out


P2_HESSIANS = p2_reference_hessians()


@dataclass(frozen=True)
class DofSystem:
    """Parameter-independent dof numbering for P2 vector / P1 scalar spaces."""

    mesh: object
    node_coords: np.ndarray    # (n_nodes, 2): vertices then edge midpoints
    tri_nodes: np.ndarray      # (ntri, 6) scalar node ids
    tri_vel_dofs: np.ndarray   # (ntri, 12) interleaved velocity dofs
    n_nodes: int
    n_u: int                   # 2 * (vertices + edges)
    n_p: int                   # vertices

    @property
    def n_system(self):
        return self.n_u + self.n_p

    def vel_dofs_of_nodes(self, nodes):
        nodes = np.asarray(nodes)
        return np.column_stack([2 * nodes, 2 * nodes + 1])

    def content_bytes(self):
        return b"".join(np.ascontiguousarray(a).tobytes() for a in
                        (self.node_coords, self.tri_nodes, self.tri_vel_dofs))

    def dump_csv(self, path):
        """Debug dump of the scalar node map (index, kind, x, y)."""
        nv = self.mesh.n_vertices
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "kind", "x", "y"])
            for k in range(self.n_nodes):
                kind = "vertex" if k < nv else "edge"
                w.writerow([k, kind,
                            repr(self.node_coords[k, 0]),
                            repr(self.node_coords[k, 1])])


def build_dof_maps(mesh):
    """Deterministic numbering: vertices first, then edge midpoints."""
    nv = mesh.n_vertices
    ne = mesh.n_edges
    midpoints = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                       + mesh.vertices[mesh.edges[:, 1]])
    node_coords = np.vstack([mesh.vertices, midpoints])

    tri_nodes = np.empty((mesh.n_triangles, 6), dtype=np.int64)
    tri_nodes[:, :3] = mesh.triangles
    tri_nodes[:, 3:] = nv + mesh.tri_edges

    tri_vel = np.empty((mesh.n_triangles, 12), dtype=np.int64)
    tri_vel[:, 0::2] = 2 * tri_nodes
    tri_vel[:, 1::2] = 2 * tri_nodes + 1

    return DofSystem(mesh=mesh, node_coords=node_coords, tri_nodes=tri_nodes,
                     tri_vel_dofs=tri_vel, n_nodes=nv + ne,
                     n_u=2 * (nv + ne), n_p=nv)


@dataclass
class ActiveDofs:
    """Dofs carried by at least one active element."""

    u_mask: np.ndarray
    p_mask: np.ndarray

    @property
    def n_active_u(self):
        return int(np.sum(self.u_mask))

    @property
    def n_active_p(self):
        return int(np.sum(self.p_mask))

    def system_mask(self):
        return np.concatenate([self.u_mask, self.p_mask])

    def restrict(self, vec, kind="u"):
        mask = self.u_mask if kind == "u" else self.p_mask
        return np.asarray(vec)[mask]

    def extend(self, vec, kind="u"):
        mask = self.u_mask if kind == "u" else self.p_mask
        out = np.zeros(mask.shape[0])
        out[mask] = vec
        return out


def active_dofs(dofsys, classification):
    """Union of element-local dofs over the active mesh."""
    u_mask = np.zeros(dofsys.n_u, dtype=bool)
    p_mask = np.zeros(dofsys.n_p, dtype=bool)
    act = classification.active_ids
    u_mask[dofsys.tri_vel_dofs[act].ravel()] = True
    p_mask[dofsys.mesh.triangles[act].ravel()] = True
    return ActiveDofs(u_mask=u_mask, p_mask=p_mask)


def extend_to_background(active_vector, active, kind="u"):
    """Zero-extend an active-dof vector to the background numbering."""
    return active.extend(np.asarray(active_vector, dtype=float), kind=kind)


def restrict_to_active(vector, active, kind="u"):
    return active.restrict(np.asarray(vector, dtype=float), kind=kind)


def _boundary_nodes(dofsys, tags):
    """Scalar node ids on boundary edges with one of the given tags."""
    mesh = dofsys.mesh
    nv = mesh.n_vertices
    sel = np.isin(mesh.boundary_tag, tags)
    edge_ids = np.where(sel)[0]
    nodes = set()
    for e in edge_ids:
        nodes.update(mesh.edges[e].tolist())
        nodes.add(nv + e)
    return np.array(sorted(nodes), dtype=np.int64)


@dataclass
class BcSpec:
    """Strong velocity (and optional pressure) constraints.

    vel_dofs index the velocity space; values are the physical prescribed
    values.  The homogeneous variant (test space) uses the same dofs with
    zero values.
    """

    dofsys: DofSystem
    vel_dofs: np.ndarray
    vel_values: np.ndarray
    p_dofs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    p_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    inlet_nodes: np.ndarray = None
    wall_nodes: np.ndarray = None

    def system_dofs(self):
        """Constraint indices in the coupled [u; p] layout."""
        return np.concatenate([self.vel_dofs, self.dofsys.n_u + self.p_dofs])

    def system_values(self, homogeneous=False):
        vals = np.concatenate([self.vel_values, self.p_values])
        return np.zeros_like(vals) if homogeneous else vals

    def homogeneous(self):
        return BcSpec(dofsys=self.dofsys, vel_dofs=self.vel_dofs,
                      vel_values=np.zeros_like(self.vel_values),
                      p_dofs=self.p_dofs, p_values=np.zeros_like(self.p_values),
                      inlet_nodes=self.inlet_nodes, wall_nodes=self.wall_nodes)

    @classmethod
    def channel(cls, dofsys, u_in):
        """Paper setup: full inlet velocity, zero normal component on walls.

        Inlet wins over the wall constraint at shared corners.
        """
        inlet_nodes = _boundary_nodes(dofsys, [TAG_INLET])
        wall_nodes = _boundary_nodes(dofsys, [TAG_WALL])
        wall_nodes = np.setdiff1d(wall_nodes, inlet_nodes)

        dofs = []
        vals = []
        for n in inlet_nodes:
            dofs += [2 * n, 2 * n + 1]
            vals += [u_in[0], u_in[1]]
        for n in wall_nodes:
            dofs.append(2 * n + 1)   # walls are horizontal: n_D = (0, +-1)
            vals.append(0.0)
        return cls(dofsys=dofsys, vel_dofs=np.array(dofs, dtype=np.int64),
                   vel_values=np.array(vals, dtype=float),
                   inlet_nodes=inlet_nodes, wall_nodes=wall_nodes)

    @classmethod
    def all_boundary(cls, dofsys, fn=None, pin_pressure=None):
        """Both velocity components on the whole outer boundary.

        fn(x, y) -> (u, v) supplies the values (zero when omitted); used by
        the supremizer solve and by manufactured-solution setups.
        pin_pressure=(vertex, value) removes the constant pressure mode for
        fully Dirichlet problems.
        """
        nodes = _boundary_nodes(dofsys, [TAG_INLET, TAG_OUTLET, TAG_WALL])
        dofs = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
        if fn is None:
            vals = np.zeros(dofs.shape[0])
        else:
            xy = dofsys.node_coords[nodes]
            uv = np.array([fn(p[0], p[1]) for p in xy], dtype=float)
            vals = uv.ravel()
        p_dofs = np.empty(0, dtype=np.int64)
        p_vals = np.empty(0)
        if pin_pressure is not None:
            p_dofs = np.array([pin_pressure[0]], dtype=np.int64)
            p_vals = np.array([pin_pressure[1]], dtype=float)
        return cls(dofsys=dofsys, vel_dofs=dofs, vel_values=vals,
                   p_dofs=p_dofs, p_values=p_vals)


@dataclass(frozen=True)
class LiftingField:
    """Background coefficient vector carrying the inlet data."""

    coefficients: np.ndarray

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.coefficients
        return self.coefficients.astype(dtype)


def lifting_field(dofsys, u_in):
    """Constant interpolant of the inlet velocity on every velocity dof.

    With horizontal walls the wall condition l . n_D = 0 requires a vanishing
    vertical inlet component; one field then serves every parameter.
    """
    u_in = np.asarray(u_in, dtype=float)
    if abs(u_in[1]) > 0.0:
        raise IncompatibleLifting(
            "constant lifting of a vertical inlet component violates the "
            "wall condition")
    coeff = np.empty(dofsys.n_u)
    coeff[0::2] = u_in[0]
    coeff[1::2] = u_in[1]
    return LiftingField(coefficients=coeff)


def interpolate_velocity(dofsys, fn):
    """Nodal interpolant of a velocity field fn(x, y) -> (u, v)."""
    xy = dofsys.node_coords
    uv = np.array([fn(p[0], p[1]) for p in xy], dtype=float)
    return uv.ravel()


def apply_strong_bcs(matrix, rhs, bcspec, mode="trial", extra_fixed=None):
    """Impose strong constraints by symmetric elimination.

    Constrained rows become identity rows with the prescribed value on the
    right-hand side; the matching columns are moved to the right-hand side so
    the remaining equations are untouched.  mode="test" homogenizes the
    prescribed values.  extra_fixed adds dof indices pinned to zero (used for
    inactive dofs).  Works on the velocity-only or the coupled [u; p] layout,
    depending on the matrix size.
    """
    n = matrix.shape[0]
    if n == bcspec.dofsys.n_system:
        dofs = bcspec.system_dofs()
        values = bcspec.system_values(homogeneous=(mode == "test"))
    elif n == bcspec.dofsys.n_u:
        dofs = bcspec.vel_dofs
        values = (np.zeros_like(bcspec.vel_values) if mode == "test"
                  else bcspec.vel_values)
    else:
        raise ValueError("matrix size matches neither layout")
    if extra_fixed is not None and len(extra_fixed):
        extra = np.setdiff1d(np.asarray(extra_fixed, dtype=np.int64), dofs)
        dofs = np.concatenate([dofs, extra])
        values = np.concatenate([values, np.zeros(extra.shape[0])])

    A = matrix.tocsr().copy()
    b = np.array(rhs, dtype=float)

    # move prescribed columns to the rhs, then blank rows and columns
    b -= A[:, dofs] @ values
    keep_col = np.ones(n, dtype=bool)
    keep_col[dofs] = False
    A.data *= keep_col[A.indices]

    keep_row = np.ones(n, dtype=bool)
    keep_row[dofs] = False
    row_scale = sparse.diags(keep_row.astype(float))
    A = row_scale @ A
    A = A + sparse.coo_matrix(
        (np.ones(dofs.shape[0]), (dofs, dofs)), shape=A.shape).tocsr()
    b[dofs] = values
    return A.tocsr(), b


def dump_dof_csv(dofsys, path):
    dofsys.dump_csv(path)
