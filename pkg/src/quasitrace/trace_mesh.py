"""Background tetrahedral meshes and level-set facet extraction.

The background box is split into cubes and every cube into the six path
tetrahedra along its main diagonal; all cubes use the same diagonal, so the
decomposition is conforming.  The zero set of the piecewise linear
interpolant of a level function cuts each tetrahedron in a triangle or a
planar quadrilateral.  Quadrilaterals are bisected along the diagonal that
minimizes the larger maximum interior angle, the triangulation is oriented
consistently outward, and full edge connectivity is wired up.

Cut vertices are deduplicated by the background edge that carries them (not
by floating-point position), so shared facets are exactly conforming and
repeated runs are bit-reproducible.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import SurfaceField, area_ratio, consistency_matrix, frame_at

__all__ = [
    "BulkMesh",
    "build_bulk_mesh",
    "RawTraceSurface",
    "extract_trace_surface",
    "split_quad",
    "bisect_quads",
    "TraceMesh",
    "MeshStats",
    "mesh_stats",
    "write_off",
    "read_vertex_values",
]

# Vertex values closer to zero than this (relative to the bulk mesh size)
# are nudged positive so every tetrahedron has a strict sign pattern and no
# extracted face degenerates to zero area.  The shift bounds the aspect
# ratio of the needle facets created when the surface passes through a
# bulk vertex by roughly its reciprocal; 1e-4 keeps their mass matrices
# invertible in double precision while staying orders of magnitude below
# the second-order geometric error at any practical resolution.
ZERO_VALUE_SHIFT = 1e-4

# Cut quadrilaterals are zero sets of affine functions and hence exactly
# planar; the bisection asserts this within an absolute tolerance.
PLANARITY_TOL = 1e-10


@dataclass(frozen=True)
class BulkMesh:
    """Tetrahedral decomposition of an axis-aligned box."""

    vertices: np.ndarray  # (V, 3)
    tets: np.ndarray      # (M, 4) vertex indices, positively oriented
    h_bulk: float         # maximum tetrahedron diameter


def _perm_sign(perm: tuple[int, ...]) -> int:
    inv = sum(1 for a in range(3) for b in range(a + 1, 3) if perm[a] > perm[b])
    return -1 if inv % 2 else 1


def build_bulk_mesh(box, n: int) -> BulkMesh:
    """Kuhn subdivision of ``box`` into n^3 cubes of 6 tetrahedra each."""
    box = np.asarray(box, dtype=float).reshape(3, 2)
    if n < 1:
        raise ValueError("need at least one subdivision per axis")
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("degenerate bounding box")
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack(grid, axis=-1).reshape(-1, 3)

    idx = np.arange(n)
    ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
    base = ((ii * (n + 1) + jj) * (n + 1) + kk).ravel()
    stride = np.array([(n + 1) * (n + 1), n + 1, 1])

    chunks = []
    for perm in itertools.permutations(range(3)):
        offsets = np.zeros((4, 3), dtype=int)
        step = np.zeros(3, dtype=int)
        for m, axis in enumerate(perm):
            step = step.copy()
            step[axis] = 1
            offsets[m + 1] = step
        corner = offsets @ stride
        tet = base[:, None] + corner[None, :]
        if _perm_sign(perm) < 0:
            tet = tet[:, [0, 1, 3, 2]]
        chunks.append(tet)
    tets = np.concatenate(chunks, axis=0)
    spacing = (box[:, 1] - box[:, 0]) / n
    return BulkMesh(vertices=vertices, tets=tets, h_bulk=float(np.linalg.norm(spacing)))


@dataclass
class RawTraceSurface:
    """Per-tetrahedron cut polygons before quad bisection."""

    vertices: np.ndarray           # (W, 3) cut points, one per cut background edge
    faces: list[tuple[int, ...]]   # length-3 or length-4 vertex index tuples
    parent_tet: np.ndarray         # (len(faces),) background element of each polygon
    values: np.ndarray             # (V,) perturbed level values actually cut


def extract_trace_surface(bulk: BulkMesh, psi) -> RawTraceSurface:
    """Cut the zero set of the vertex-interpolated level function out of ``bulk``.

    ``psi`` is either a callable evaluated at the bulk vertices or an array of
    per-vertex values (ordering = bulk vertex order).  Vertex values within
    ``ZERO_VALUE_SHIFT * h_bulk`` of zero are shifted positive first, which
    makes the sign patterns exhaustive: one vertex against three yields a
    triangle, two against two a planar quadrilateral.
    """
    if callable(psi):
        values = np.asarray(psi(bulk.vertices), dtype=float)
    else:
        values = np.array(psi, dtype=float).ravel()
    if values.shape != (len(bulk.vertices),):
        raise ValueError("need one level value per bulk vertex")
    if not np.all(np.isfinite(values)):
        raise ValueError("level values must be finite")
    tiny = ZERO_VALUE_SHIFT * bulk.h_bulk
    values = np.where(np.abs(values) < tiny, tiny, values)

    neg = values < 0.0
    counts = neg[bulk.tets].sum(axis=1)
    cut_ids = np.nonzero((counts > 0) & (counts < 4))[0]

    positions: list[np.ndarray] = []
    by_edge: dict[tuple[int, int], int] = {}
    verts = bulk.vertices

    def cut_point(a: int, b: int) -> int:
        lo, hi = (a, b) if a < b else (b, a)
        idx = by_edge.get((lo, hi))
        if idx is None:
            s = values[lo] / (values[lo] - values[hi])
            positions.append(verts[lo] + s * (verts[hi] - verts[lo]))
            idx = len(positions) - 1
            by_edge[(lo, hi)] = idx
        return idx

    faces: list[tuple[int, ...]] = []
    parents: list[int] = []
    for t in cut_ids:
        corners = bulk.tets[t]
        minus = [int(g) for g in corners if neg[g]]
        plus = [int(g) for g in corners if not neg[g]]
        if len(minus) == 1 or len(plus) == 1:
            lone, rest = (minus[0], plus) if len(minus) == 1 else (plus[0], minus)
            face = (cut_point(lone, rest[0]), cut_point(lone, rest[1]), cut_point(lone, rest[2]))
        else:
            a, b = minus
            c, d = plus
            # Consecutive cut edges share a tetrahedron face, so this cyclic
            # order traces the planar quadrilateral without self-crossing.
            face = (cut_point(a, c), cut_point(a, d), cut_point(b, d), cut_point(b, c))
        faces.append(face)
        parents.append(int(t))

    return RawTraceSurface(
        vertices=np.array(positions) if positions else np.zeros((0, 3)),
        faces=faces,
        parent_tet=np.array(parents, dtype=int),
        values=values,
    )


def _max_interior_angle(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    worst = 0.0
    for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
        u, v = q - p, r - p
        cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        worst = max(worst, float(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return worst


def split_quad(points: np.ndarray, ids: tuple[int, ...]) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Bisect a planar quadrilateral given in cyclic order.

    Chooses the diagonal minimizing the larger of the two resulting maximum
    interior angles; exact ties (within 1e-12) go to the diagonal with the
    lexicographically smaller vertex-index pair.
    """
    p = np.asarray(points, dtype=float)
    split_a = ((0, 1, 2), (0, 2, 3))
    split_b = ((0, 1, 3), (1, 2, 3))
    worst_a = max(_max_interior_angle(*p[list(tri)]) for tri in split_a)
    worst_b = max(_max_interior_angle(*p[list(tri)]) for tri in split_b)
    if worst_a < worst_b - 1e-12:
        pick = split_a
    elif worst_b < worst_a - 1e-12:
        pick = split_b
    else:
        diag_a = tuple(sorted((ids[0], ids[2])))
        diag_b = tuple(sorted((ids[1], ids[3])))
        pick = split_a if diag_a < diag_b else split_b
    return tuple(tuple(ids[k] for k in tri) for tri in pick)


def _orient_consistently(triangles: np.ndarray) -> np.ndarray:
    """Flip triangles so every shared edge is traversed in opposite directions."""
    tri = triangles.copy()
    edge_map: dict[tuple[int, int], list[int]] = {}
    for f, (a, b, c) in enumerate(tri):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_map.setdefault(key, []).append(f)
    for key, fs in edge_map.items():
        if len(fs) != 2:
            raise RuntimeError(f"non-manifold surface: edge {key} borders {len(fs)} facet(s)")

    def directed(f: int) -> tuple[tuple[int, int], ...]:
        a, b, c = tri[f]
        return ((a, b), (b, c), (c, a))

    seen = np.zeros(len(tri), dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        f = queue.popleft()
        for u, v in directed(f):
            key = (u, v) if u < v else (v, u)
            for g in edge_map[key]:
                if g == f:
                    continue
                if not seen[g]:
                    if (u, v) in directed(g):
                        tri[g, 1], tri[g, 2] = tri[g, 2], tri[g, 1]
                    seen[g] = True
                    queue.append(g)
                elif (u, v) in directed(g):
                    raise RuntimeError("surface is not orientable")
    if not seen.all():
        raise RuntimeError("surface is not connected")
    return tri


@dataclass(frozen=True)
class TraceMesh:
    """Conforming triangulation of an extracted level surface.

    Triangles are stored counterclockwise with respect to the outward facet
    normals.  Edges are stored with increasing vertex indices; for each edge
    the first adjacent face is the one traversing it in that direction
    (``face_edge_signs`` records the per-facet agreement, one sign per local
    edge).  Treated as immutable by all consumers.
    """

    vertices: np.ndarray           # (V, 3)
    triangles: np.ndarray          # (F, 3)
    edges: np.ndarray              # (E, 2), increasing vertex ids
    edge_faces: np.ndarray         # (E, 2): [agreeing face, opposing face]
    edge_local: np.ndarray         # (E, 2): local edge index within those faces
    face_edges: np.ndarray         # (F, 3): global edge id of each local edge
    face_edge_signs: np.ndarray    # (F, 3): +1 if local direction has increasing ids
    face_normals: np.ndarray       # (F, 3) outward unit normals
    h: float                       # maximum triangle diameter
    parent_tet: np.ndarray         # (F,) background element, -1 if not applicable

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles

    def corner_points(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        p = self.corner_points()
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=-1)

    def centroids(self) -> np.ndarray:
        return self.corner_points().mean(axis=1)

    def max_interior_angles(self) -> np.ndarray:
        p = self.corner_points()
        angles = np.empty((self.n_triangles, 3))
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            cosang = np.einsum("fi,fi->f", u, v) / (
                np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1)
            )
            angles[:, k] = np.arccos(np.clip(cosang, -1.0, 1.0))
        return angles.max(axis=1)

    @staticmethod
    def from_arrays(
        vertices: np.ndarray,
        triangles: np.ndarray,
        surface: SurfaceField | None = None,
        parent_tet: np.ndarray | None = None,
    ) -> "TraceMesh":
        """Wire up a closed triangle soup: orientation, normals, connectivity.

        Outwardness is decided against the surface normal field when given,
        otherwise against rays from the mesh centroid.
        """
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=int)
        triangles = _orient_consistently(triangles)

        p = vertices[triangles]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        areas2 = np.linalg.norm(cross, axis=-1)
        if np.any(areas2 <= 0.0):
            raise ValueError("degenerate triangle: zero area")
        normals = cross / areas2[:, None]
        centroids = p.mean(axis=1)
        if surface is not None:
            outward_ref = surface.gradient(centroids)
        else:
            outward_ref = centroids - vertices.mean(axis=0)
        if np.einsum("f,fi,fi->", areas2, normals, outward_ref) < 0.0:
            triangles = triangles[:, [0, 2, 1]].copy()
            normals = -normals

        edge_map: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
        for f, (a, b, c) in enumerate(triangles):
            for k, (u, v) in enumerate(((b, c), (c, a), (a, b))):
                key = (u, v) if u < v else (v, u)
                sign = 1 if u < v else -1
                edge_map.setdefault(key, []).append((f, k, sign))

        keys = sorted(edge_map)
        edges = np.array(keys, dtype=int).reshape(-1, 2)
        edge_faces = np.empty((len(keys), 2), dtype=int)
        edge_local = np.empty((len(keys), 2), dtype=int)
        face_edges = np.empty((len(triangles), 3), dtype=int)
        face_edge_signs = np.empty((len(triangles), 3))
        for e, key in enumerate(keys):
            entries = edge_map[key]
            if len(entries) != 2 or entries[0][2] + entries[1][2] != 0:
                raise RuntimeError("inconsistent facet orientation around an edge")
            for f, k, sign in entries:
                slot = 0 if sign > 0 else 1
                edge_faces[e, slot] = f
                edge_local[e, slot] = k
                face_edges[f, k] = e
                face_edge_signs[f, k] = sign

        edge_vec = vertices[edges[:, 1]] - vertices[edges[:, 0]]
        h = float(np.linalg.norm(edge_vec, axis=-1).max())
        if parent_tet is None:
            parent_tet = np.full(len(triangles), -1, dtype=int)
        return TraceMesh(
            vertices=vertices,
            triangles=triangles,
            edges=edges,
            edge_faces=edge_faces,
            edge_local=edge_local,
            face_edges=face_edges,
            face_edge_signs=face_edge_signs,
            face_normals=normals,
            h=h,
            parent_tet=np.asarray(parent_tet, dtype=int),
        )


def bisect_quads(raw: RawTraceSurface, surface: SurfaceField | None = None) -> TraceMesh:
    """Turn the raw cut polygons into an oriented conforming triangulation."""
    tris: list[tuple[int, int, int]] = []
    parents: list[int] = []
    verts = raw.vertices
    for face, parent in zip(raw.faces, raw.parent_tet):
        if len(face) == 3:
            tris.append(face)
            parents.append(parent)
            continue
        p = verts[list(face)]
        diag_cross = np.cross(p[2] - p[0], p[3] - p[1])
        nrm = np.linalg.norm(diag_cross)
        if nrm > 1e-300:
            defect = abs(np.dot(p[1] - p[0], diag_cross / nrm))
            if defect > PLANARITY_TOL:
                raise RuntimeError(f"cut quadrilateral is not planar (defect {defect:.3e})")
        for tri in split_quad(p, face):
            tris.append(tri)
            parents.append(parent)
    return TraceMesh.from_arrays(
        verts, np.array(tris, dtype=int), surface=surface, parent_tet=np.array(parents, dtype=int)
    )


@dataclass(frozen=True)
class MeshStats:
    """Quality and geometric-consistency summary of a trace mesh."""

    h: float
    n_vertices: int
    n_edges: int
    n_triangles: int
    euler_characteristic: int
    max_interior_angle: float
    max_abs_dist: float
    max_normal_gap: float
    min_transversality: float
    min_area: float
    max_area: float
    max_area_mismatch: float       # sup |1 - area ratio| over quadrature points
    max_consistency_gap: float     # sup |P - B| (Frobenius) over quadrature points


def mesh_stats(mesh: TraceMesh, surface: SurfaceField, degree: int = 4) -> MeshStats:
    """Measure the mesh against the continuous surface at quadrature points."""
    from .elements import AffineMap, triangle_rule

    maps = AffineMap.from_triangles(mesh.corner_points())
    pts, _ = triangle_rule(degree)
    x = maps.to_physical(pts)
    nu_h = np.broadcast_to(mesh.face_normals[:, None, :], x.shape)
    frames = frame_at(surface, x, nu_h)

    mu = area_ratio(frames)
    bgap = frames.tangent_projector - consistency_matrix(frames)
    gap_norm = np.sqrt(np.einsum("...ij,...ij->...", bgap, bgap))

    nu_c = surface.gradient(mesh.centroids())
    normal_gap = np.linalg.norm(nu_c - mesh.face_normals, axis=-1)
    cos_all = min(float(frames.transversality.min()),
                  float(np.einsum("fi,fi->f", nu_c, mesh.face_normals).min()))

    areas = mesh.areas()
    return MeshStats(
        h=mesh.h,
        n_vertices=mesh.n_vertices,
        n_edges=mesh.n_edges,
        n_triangles=mesh.n_triangles,
        euler_characteristic=mesh.euler_characteristic,
        max_interior_angle=float(mesh.max_interior_angles().max()),
        max_abs_dist=float(np.abs(frames.dist).max()),
        max_normal_gap=float(normal_gap.max()),
        min_transversality=cos_all,
        min_area=float(areas.min()),
        max_area=float(areas.max()),
        max_area_mismatch=float(np.abs(1.0 - mu).max()),
        max_consistency_gap=float(gap_norm.max()),
    )


def write_off(mesh: TraceMesh, path) -> None:
    """ASCII OFF export for external viewers."""
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} {mesh.n_edges}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vertex_values(path) -> np.ndarray:
    """Read whitespace-separated level values, one per bulk vertex."""
    with open(path) as fh:
        return np.array(fh.read().split(), dtype=float)
