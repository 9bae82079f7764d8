"""Reference elements, quadrature, affine facet maps, and interpolation.

Vector unknowns live in the lowest Raviart-Thomas space (``rt0``) or the
lowest Brezzi-Douglas-Marini space (``bdm1``) on the reference triangle with
vertices (0,0), (1,0), (0,1); scalars are piecewise constants (``p0``) or
linears (``p1``).  Vector degrees of freedom are edge-normal moments against
constants (rt0) or constants and the odd linear weight 2*t - 1 (bdm1), which
keeps the cross-facet orientation bookkeeping to a single sign per edge even
when adjacent facets are not coplanar.

Physical facets are images of the reference triangle under affine maps with
a 3x2 derivative; vector fields are pushed with the flux-preserving scaling
A / jac, scalars by plain composition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "REF_VERTICES",
    "REF_EDGES",
    "triangle_rule",
    "gauss_01",
    "VectorElement",
    "ScalarElement",
    "MixedSpace",
    "mixed_space",
    "AffineMap",
    "push_forward_vector",
    "element_interpolate_hdiv",
    "interpolate_hdiv",
    "local_vector_coefficients",
    "project_l2",
    "interpolate_lagrange",
    "eval_vector",
    "eval_divergence",
    "eval_p1",
]

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# Local edge k is opposite vertex k, directed along the counterclockwise
# boundary: (1->2), (2->0), (0->1).
REF_EDGES = ((1, 2), (2, 0), (0, 1))
_REF_EDGE_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
_REF_EDGE_NORMALS[0] /= np.sqrt(2.0)
_REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


@lru_cache(maxsize=None)
def gauss_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] with n points (exact to degree 2n-1)."""
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on the reference triangle, exact for polynomials of ``degree``.

    Collapsed tensor Gauss rule: x = u (1 - v), y = v with the extra (1 - v)
    Jacobian absorbed into the weights.  All weights positive, summing to the
    reference area 1/2.
    """
    if degree < 0:
        raise ValueError("quadrature degree must be nonnegative")
    xu, wu = gauss_01((degree + 2) // 2)
    xv, wv = gauss_01((degree + 3) // 2)
    u, v = np.meshgrid(xu, xv, indexing="ij")
    pts = np.stack([(u * (1.0 - v)).ravel(), v.ravel()], axis=-1)
    wts = (np.outer(wu, wv) * (1.0 - v)).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def _edge_points(edge: int, t: np.ndarray) -> np.ndarray:
    a, b = REF_EDGES[edge]
    return (1.0 - t)[:, None] * REF_VERTICES[a] + t[:, None] * REF_VERTICES[b]


class VectorElement:
    """Reference H(div) element, either ``rt0`` or ``bdm1``.

    The basis is assembled by inverting the matrix of degree-of-freedom
    functionals applied to a generating set, so the moments of the basis are
    the identity by construction (checked in the test suite).
    """

    def __init__(self, kind: str):
        if kind == "rt0":
            self.edge_dofs = 1
        elif kind == "bdm1":
            self.edge_dofs = 2
        else:
            raise ValueError(f"unknown vector element '{kind}'")
        self.kind = kind
        self.n_dofs = 3 * self.edge_dofs
        dof = np.empty((self.n_dofs, self.n_dofs))
        t, w = gauss_01(6)
        for e in range(3):
            pts = _edge_points(e, t)
            gen = self._generators(pts)                       # (G, q, 2)
            flux = gen @ _REF_EDGE_NORMALS[e]                 # (G, q)
            m0 = _REF_EDGE_LENGTHS[e] * (flux @ w)
            if self.edge_dofs == 1:
                dof[e] = m0
            else:
                m1 = _REF_EDGE_LENGTHS[e] * (flux @ (w * (2.0 * t - 1.0)))
                dof[2 * e] = m0
                dof[2 * e + 1] = m1
        self._coeff = np.linalg.inv(dof)                      # (G, K)

    def _generators(self, pts: np.ndarray) -> np.ndarray:
        q = pts.shape[0]
        if self.kind == "rt0":
            gen = np.zeros((3, q, 2))
            gen[0, :, 0] = 1.0
            gen[1, :, 1] = 1.0
            gen[2] = pts
        else:
            gen = np.zeros((6, q, 2))
            gen[0, :, 0] = 1.0
            gen[1, :, 0] = pts[:, 0]
            gen[2, :, 0] = pts[:, 1]
            gen[3, :, 1] = 1.0
            gen[4, :, 1] = pts[:, 0]
            gen[5, :, 1] = pts[:, 1]
        return gen

    def _generator_divs(self) -> np.ndarray:
        if self.kind == "rt0":
            return np.array([0.0, 0.0, 2.0])
        return np.array([0.0, 1.0, 0.0, 0.0, 0.0, 1.0])

    def basis(self, pts: np.ndarray) -> np.ndarray:
        """Basis values at reference points, shape (n_dofs, Q, 2)."""
        gen = self._generators(np.asarray(pts, dtype=float))
        return np.einsum("gqd,gk->kqd", gen, self._coeff)

    def divergence(self) -> np.ndarray:
        """Reference divergence of each basis function (constant), shape (n_dofs,)."""
        return self._coeff.T @ self._generator_divs()


class ScalarElement:
    """Reference scalar element, ``p0`` or ``p1`` (barycentric nodal basis)."""

    def __init__(self, kind: str):
        if kind not in ("p0", "p1"):
            raise ValueError(f"unknown scalar element '{kind}'")
        self.kind = kind
        self.n_dofs = 1 if kind == "p0" else 3

    def basis(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "p0":
            return np.ones((1, pts.shape[0]))
        return np.stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


@dataclass(frozen=True)
class MixedSpace:
    """Vector/scalar/multiplier bundle for the mixed method."""

    name: str
    vector: VectorElement
    scalar: ScalarElement

    @property
    def multiplier_moments(self) -> int:
        """Edge multiplier moments per edge (matches the vector edge dofs)."""
        return self.vector.edge_dofs


@lru_cache(maxsize=None)
def mixed_space(name: str) -> MixedSpace:
    return MixedSpace(name=name, vector=VectorElement(name), scalar=ScalarElement("p0"))


@dataclass(frozen=True)
class AffineMap:
    """Affine maps from the reference triangle onto facets, batched.

    ``A`` is the 3x2 derivative, ``jac`` its (positive) area Jacobian
    sqrt(det(A^T A)); ``metric``/``metric_inv`` are A^T A and its inverse.
    All arrays carry a leading batch axis of length F (one map per facet).
    """

    origin: np.ndarray      # (F, 3)
    A: np.ndarray           # (F, 3, 2)
    jac: np.ndarray         # (F,)
    metric: np.ndarray      # (F, 2, 2)
    metric_inv: np.ndarray  # (F, 2, 2)

    @classmethod
    def from_triangles(cls, verts: np.ndarray) -> "AffineMap":
        verts = np.asarray(verts, dtype=float)
        if verts.ndim == 2:
            verts = verts[None]
        e1 = verts[:, 1] - verts[:, 0]
        e2 = verts[:, 2] - verts[:, 0]
        a = np.stack([e1, e2], axis=-1)
        metric = np.einsum("fia,fib->fab", a, a)
        # det(A^T A) cancels catastrophically on needle facets; the cross
        # product gives the same area Jacobian stably.
        jac = np.linalg.norm(np.cross(e1, e2), axis=-1)
        if np.any(jac <= 0.0) or not np.all(np.isfinite(jac)):
            raise ValueError("degenerate triangle: zero area")
        inv = np.empty_like(metric)
        inv[:, 0, 0] = metric[:, 1, 1]
        inv[:, 1, 1] = metric[:, 0, 0]
        inv[:, 0, 1] = -metric[:, 0, 1]
        inv[:, 1, 0] = -metric[:, 1, 0]
        inv /= (jac * jac)[:, None, None]
        return cls(origin=verts[:, 0], A=a, jac=jac, metric=metric, metric_inv=inv)

    def __len__(self) -> int:
        return self.origin.shape[0]

    def to_physical(self, ref_pts: np.ndarray) -> np.ndarray:
        """Map reference points (Q, 2) to physical points (F, Q, 3)."""
        return self.origin[:, None, :] + np.einsum("fid,qd->fqi", self.A, np.asarray(ref_pts, dtype=float))

    def to_reference(self, x: np.ndarray) -> np.ndarray:
        """Pull physical points (F, Q, 3) on the facet planes back to (F, Q, 2)."""
        rel = np.asarray(x, dtype=float) - self.origin[:, None, :]
        return np.einsum("fde,fie,fqi->fqd", self.metric_inv, self.A, rel)

    def push_vector(self, ref_vals: np.ndarray) -> np.ndarray:
        """Flux-preserving push of reference vectors (F, Q, 2) -> (F, Q, 3)."""
        return np.einsum("fid,fqd->fqi", self.A, ref_vals) / self.jac[:, None, None]

    def push_divergence(self, ref_divs: np.ndarray) -> np.ndarray:
        """Divergence transforms with 1 / jac under the flux-preserving push."""
        return np.asarray(ref_divs, dtype=float) / self.jac[:, None]

    def scalar_gradient(self, ref_grads: np.ndarray) -> np.ndarray:
        """In-plane gradient of a composed scalar: A metric_inv grad_ref."""
        return np.einsum("fid,fde,fqe->fqi", self.A, self.metric_inv, ref_grads)


def push_forward_vector(amap: AffineMap, ref_values: np.ndarray) -> np.ndarray:
    """Module-level alias of the flux-preserving vector push-forward."""
    ref_values = np.asarray(ref_values, dtype=float)
    if ref_values.ndim == 2:
        return amap.push_vector(ref_values[None])[0]
    return amap.push_vector(ref_values)


def _triangle_frame(verts: np.ndarray) -> np.ndarray:
    n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    return n / np.linalg.norm(n)


def element_interpolate_hdiv(space: MixedSpace, verts: np.ndarray, field, n_gauss: int = 8) -> np.ndarray:
    """Edge-moment interpolation of a tangential field on a single facet.

    ``field`` maps points (N, 3) to vectors (N, 3).  Returns the local
    coefficient vector in the element's own edge orientation.
    """
    verts = np.asarray(verts, dtype=float)
    n_face = _triangle_frame(verts)
    t, w = gauss_01(n_gauss)
    coeffs = np.empty(space.vector.n_dofs)
    for e, (a, b) in enumerate(REF_EDGES):
        pa, pb = verts[a], verts[b]
        length = np.linalg.norm(pb - pa)
        tang = (pb - pa) / length
        conormal = np.cross(tang, n_face)
        pts = pa[None, :] + t[:, None] * (pb - pa)[None, :]
        flux = field(pts) @ conormal
        if space.vector.edge_dofs == 1:
            coeffs[e] = length * (w @ flux)
        else:
            coeffs[2 * e] = length * (w @ flux)
            coeffs[2 * e + 1] = length * ((w * (2.0 * t - 1.0)) @ flux)
    return coeffs


def interpolate_hdiv(mesh, space: MixedSpace, field, n_gauss: int = 8) -> np.ndarray:
    """Global edge-moment interpolation on a facet mesh.

    ``field(points, faces)`` evaluates the target field at points (E, q, 3)
    in the context of face indices (E, q); moments are taken from the side
    of the face in which the edge runs with increasing vertex index.
    Conormal-continuous inputs give side-independent values.
    """
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    plus = mesh.edge_faces[:, 0]
    xi, xj = mesh.vertices[i], mesh.vertices[j]
    length = np.linalg.norm(xj - xi, axis=-1)
    tang = (xj - xi) / length[:, None]
    conormal = np.cross(tang, mesh.face_normals[plus])
    conormal /= np.linalg.norm(conormal, axis=-1, keepdims=True)
    t, w = gauss_01(n_gauss)
    pts = xi[:, None, :] + t[None, :, None] * (xj - xi)[:, None, :]
    faces = np.broadcast_to(plus[:, None], pts.shape[:2])
    flux = np.einsum("eqi,ei->eq", field(pts, faces), conormal)
    m0 = length * (flux @ w)
    if space.vector.edge_dofs == 1:
        return m0
    m1 = length * (flux @ (w * (2.0 * t - 1.0)))
    out = np.empty(2 * len(mesh.edges))
    out[0::2] = m0
    out[1::2] = m1
    return out


def local_vector_coefficients(mesh, space: MixedSpace, global_coeffs: np.ndarray) -> np.ndarray:
    """Scatter globally oriented edge coefficients to per-facet local ones.

    Constant moments pick up the edge-direction sign; odd linear moments are
    direction independent (the weight and the flux flip together).
    """
    ge = mesh.face_edges
    sg = mesh.face_edge_signs
    global_coeffs = np.asarray(global_coeffs, dtype=float)
    if space.vector.edge_dofs == 1:
        return sg * global_coeffs[ge]
    out = np.empty((len(mesh.triangles), 6))
    out[:, 0::2] = sg * global_coeffs[2 * ge]
    out[:, 1::2] = global_coeffs[2 * ge + 1]
    return out


def project_l2(mesh, kind: str, fn, degree: int = 6) -> np.ndarray:
    """Elementwise L2 projection of a scalar onto p0 or p1.

    ``fn(points, faces)`` evaluates the scalar at physical points.  Returns
    means (F,) for p0 and reference-vertex nodal coefficients (F, 3) for p1.
    """
    maps = AffineMap.from_triangles(mesh.vertices[mesh.triangles])
    pts, wts = triangle_rule(degree)
    x = maps.to_physical(pts)
    faces = np.broadcast_to(np.arange(len(mesh.triangles))[:, None], x.shape[:2])
    vals = fn(x, faces)
    if kind == "p0":
        return 2.0 * (vals @ wts)
    if kind != "p1":
        raise ValueError(f"unknown scalar element '{kind}'")
    bary = ScalarElement("p1").basis(pts)                      # (3, Q)
    mass = np.einsum("q,iq,jq->ij", wts, bary, bary)           # jac cancels
    rhs = np.einsum("q,iq,fq->fi", wts, bary, vals)
    return rhs @ np.linalg.inv(mass).T


def interpolate_lagrange(mesh, fn) -> np.ndarray:
    """Vertex interpolant into the conforming piecewise linears."""
    return np.asarray(fn(mesh.vertices), dtype=float)


def eval_vector(maps: AffineMap, space: MixedSpace, local_coeffs: np.ndarray, ref_pts: np.ndarray) -> np.ndarray:
    """Evaluate a broken H(div) field at reference points, giving (F, Q, 3)."""
    bas = space.vector.basis(ref_pts)
    return maps.push_vector(np.einsum("kqd,fk->fqd", bas, local_coeffs))


def eval_divergence(maps: AffineMap, space: MixedSpace, local_coeffs: np.ndarray) -> np.ndarray:
    """Facet-wise (constant) surface divergence of a broken H(div) field."""
    return (local_coeffs @ space.vector.divergence()) / maps.jac


def eval_p1(nodal: np.ndarray, ref_pts: np.ndarray) -> np.ndarray:
    """Evaluate facet-wise linear scalars given nodal values (F, 3) -> (F, Q)."""
    bary = ScalarElement("p1").basis(ref_pts)
    return np.einsum("fv,vq->fq", np.asarray(nodal, dtype=float), bary)
