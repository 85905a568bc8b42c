"""Quadrature on fluid parts of cut triangles and on interface segments.

Cut triangles are decomposed by marching the zero line of the P1 levelset
interpolant: the zero set crosses exactly two edges, leaving the fluid side
as one or two sub-triangles.  Interface rules carry the segment length in
their weights and a per-point unit normal oriented fluid to solid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .background_mesh import STATUS_CUT, STATUS_FLUID, STATUS_SOLID
from .errors import NotCut, SolidElement

_MAX_ORDER = 6

# symmetric positive-weight Gauss rules on the reference triangle, stored as
# (barycentric point groups, normalized weights summing to one)
_TRI_RULES = {
    1: [((1 / 3, 1 / 3, 1 / 3), 1.0, 1)],
    2: [((2 / 3, 1 / 6, 1 / 6), 1 / 3, 3)],
    4: [
        ((0.108103018168070, 0.445948490915965, 0.445948490915965),
         0.223381589678011, 3),
        ((0.816847572980459, 0.091576213509771, 0.091576213509771),
         0.109951743655322, 3),
    ],
    5: [
        ((1 / 3, 1 / 3, 1 / 3), 0.225, 1),
        ((0.059715871789770, 0.470142064105115, 0.470142064105115),
         0.132394152788506, 3),
        ((0.797426985353087, 0.101286507323456, 0.101286507323456),
         0.125939180544827, 3),
    ],
    6: [
        ((0.501426509658179, 0.249286745170910, 0.249286745170910),
         0.116786275726379, 3),
        ((0.873821971016996, 0.063089014491502, 0.063089014491502),
         0.050844906370207, 3),
        ((0.053145049844816, 0.310352451033785, 0.636502499121399),
         0.082851075618374, 6),
    ],
}
# rules of these degrees also serve the lower odd/even orders
_TRI_DEGREE_FOR_ORDER = {1: 1, 2: 2, 3: 4, 4: 4, 5: 5, 6: 6}


@dataclass(frozen=True)
class QuadratureRule:
    """Physical-space quadrature points and weights.

    Interface rules carry a unit normal per point, oriented fluid to solid.
    """

    points: np.ndarray            # (n, 2)
    weights: np.ndarray           # (n,)
    normals: np.ndarray = None    # (n, 2) for interface rules

    def integrate(self, fn):
        vals = np.asarray(fn(self.points[:, 0], self.points[:, 1]), dtype=float)
        return float(np.dot(self.weights, vals))

    @property
    def total_weight(self):
        return float(np.sum(self.weights))


@dataclass(frozen=True)
class CutDecomposition:
    """Fluid sub-triangles of a cut triangle plus its interface segment."""

    fluid_triangles: np.ndarray   # (k, 3, 2), k in {1, 2}
    segment: np.ndarray           # (2, 2) endpoints on parent edges
    normal: np.ndarray            # (2,) unit, fluid -> solid

    @property
    def fluid_area(self):
        return float(np.sum([_signed_area(t) for t in self.fluid_triangles]))

    @property
    def segment_length(self):
        return float(np.linalg.norm(self.segment[1] - self.segment[0]))


def _signed_area(tri):
    d1 = tri[1] - tri[0]
    d2 = tri[2] - tri[0]
    return 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])


def _bary_to_xy(groups):
    pts = []
    wts = []
    for bary, w, mult in groups:
        if mult == 1:
            perms = [bary]
        elif mult == 3:
            a, b, c = bary
            perms = [(a, b, c), (b, a, c), (b, c, a)] if b == c else None
            if perms is None:
                raise ValueError("3-point group needs two equal coordinates")
        else:
            a, b, c = bary
            perms = [(a, b, c), (a, c, b), (b, a, c), (b, c, a),
                     (c, a, b), (c, b, a)]
        for lam in perms:
            pts.append((lam[1], lam[2]))   # reference coords (xi, eta)
            wts.append(w)
    return np.array(pts), 0.5 * np.array(wts)


def reference_triangle_rule(order):
    """Gauss rule on the unit reference triangle, exact to the given degree."""
    if order not in range(1, _MAX_ORDER + 1):
        raise ValueError("order must be in 1..6")
    return _bary_to_xy(_TRI_RULES[_TRI_DEGREE_FOR_ORDER[order]])


def reference_segment_rule(order):
    """Gauss-Legendre rule on [0, 1], exact to the given degree."""
    if order not in range(1, _MAX_ORDER + 1):
        raise ValueError("order must be in 1..6")
    n = (order + 2) // 2
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


def reference_rules(order):
    """Reference (triangle, segment) rules exact for the given total degree."""
    return reference_triangle_rule(order), reference_segment_rule(order)


def map_triangle_rule(tri, ref_pts, ref_wts):
    """Map a reference rule to a physical triangle (weights carry the area)."""
    tri = np.asarray(tri, dtype=float)
    jac = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    det = abs(jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0])
    pts = tri[0] + ref_pts @ jac.T
    return pts, ref_wts * det


def decompose_cut_triangle(tri, vertex_values):
    """Split a cut triangle into its fluid sub-triangles and interface segment.

    vertex_values are the (snapped, nonzero) P1 interpolant values; fluid is
    the negative side.  With two fluid vertices the quad is split along its
    shorter diagonal for deterministic conditioning.
    """
    tri = np.asarray(tri, dtype=float)
    vals = np.asarray(vertex_values, dtype=float)
    neg = np.where(vals < 0.0)[0]
    if len(neg) in (0, 3):
        raise NotCut("vertex signs are uniform")

    def crossing(a, b):
        t = vals[a] / (vals[a] - vals[b])
        return tri[a] + t * (tri[b] - tri[a])

    # P1 gradient points from fluid (negative) into solid (positive)
    jac = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    grad = np.linalg.solve(jac.T, vals[1:] - vals[0])
    normal = grad / np.linalg.norm(grad)

    if len(neg) == 1:
        a = int(neg[0])
        b, c = [i for i in range(3) if i != a]
        qb = crossing(a, b)
        qc = crossing(a, c)
        subs = [np.array([tri[a], qb, qc])]
        segment = np.array([qb, qc])
    else:
        a, b = (int(neg[0]), int(neg[1]))
        c = [i for i in range(3) if i not in (a, b)][0]
        qa = crossing(a, c)
        qb = crossing(b, c)
        # quad (Pa, Pb, Qb, Qa); shorter diagonal decides the split
        if np.linalg.norm(qb - tri[a]) <= np.linalg.norm(qa - tri[b]):
            subs = [np.array([tri[a], tri[b], qb]),
                    np.array([tri[a], qb, qa])]
        else:
            subs = [np.array([tri[a], tri[b], qa]),
                    np.array([tri[b], qb, qa])]
        segment = np.array([qa, qb])

    fixed = []
    for s in subs:
        if _signed_area(s) < 0.0:
            s = s[[0, 2, 1]]
        fixed.append(s)
    return CutDecomposition(
        fluid_triangles=np.array(fixed), segment=segment, normal=normal)


def element_decomposition(classification, element):
    """Cached CutDecomposition of a cut element."""
    cache = classification._cache.setdefault("decomp", {})
    if element not in cache:
        mesh = classification.mesh
        cache[element] = decompose_cut_triangle(
            mesh.tri_coords(element), classification.tri_vertex_values(element))
    return cache[element]


def physical_quadrature(element, classification, order):
    """Quadrature over the fluid part of an active element."""
    status = classification.status[element]
    if status == STATUS_SOLID:
        raise SolidElement(f"element {element} is solid")
    ref_pts, ref_wts = reference_triangle_rule(order)
    mesh = classification.mesh
    if status == STATUS_FLUID:
        pts, wts = map_triangle_rule(mesh.tri_coords(element), ref_pts, ref_wts)
        return QuadratureRule(points=pts, weights=wts)
    decomp = element_decomposition(classification, element)
    all_pts = []
    all_wts = []
    for sub in decomp.fluid_triangles:
        pts, wts = map_triangle_rule(sub, ref_pts, ref_wts)
        all_pts.append(pts)
        all_wts.append(wts)
    return QuadratureRule(points=np.vstack(all_pts),
                          weights=np.concatenate(all_wts))


def interface_quadrature(element, classification, order):
    """Quadrature along the interface segment of a cut element."""
    if classification.status[element] != STATUS_CUT:
        raise NotCut(f"element {element} is not cut")
    decomp = element_decomposition(classification, element)
    t, w = reference_segment_rule(order)
    p0, p1 = decomp.segment
    pts = p0 + np.outer(t, p1 - p0)
    length = np.linalg.norm(p1 - p0)
    normals = np.tile(decomp.normal, (len(t), 1))
    return QuadratureRule(points=pts, weights=w * length, normals=normals)


def fluid_area(classification, order=2):
    """Total fluid area: full areas of fluid elements plus cut fluid parts."""
    mesh = classification.mesh
    areas = mesh.triangle_areas()
    total = float(np.sum(areas[classification.fluid_ids]))
    for e in classification.cut_ids:
        total += element_decomposition(classification, e).fluid_area
    return total


def interface_length(classification):
    """Total length of the piecewise-straight interface."""
    return float(np.sum(
        [element_decomposition(classification, e).segment_length
         for e in classification.cut_ids]))


def per_element_fluid_areas(classification):
    """Fluid area per active element, for the debug CSV dump."""
    mesh = classification.mesh
    areas = mesh.triangle_areas()
    out = np.zeros(mesh.n_triangles)
    out[classification.fluid_ids] = areas[classification.fluid_ids]
    for e in classification.cut_ids:
        out[e] = element_decomposition(classification, e).fluid_area
    return out
