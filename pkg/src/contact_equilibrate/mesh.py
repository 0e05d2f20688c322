"""Conforming triangle meshes with tagged boundary faces.

Conventions
-----------
* Triangles are stored counter-clockwise.
* Local face ``i`` of a triangle is the edge opposite its local vertex ``i``.
* Faces are unique vertex pairs ``(a, b)`` with ``a < b``.  The unit normal
  of an interior face is the tangent ``x_b - x_a`` rotated clockwise; the
  normal of a boundary face always points out of the domain.

Refinement keeps a red-refinement forest: the *leaves* are the triangles of
the forest, and each leaf with exactly one split edge is shown in the
conforming mesh as a green pair.  Green pairs are never refined further;
when one of them is marked, its leaf is red-refined instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree


class Tag(IntEnum):
    """Face classification."""

    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2
    CONTACT = 3


_LETTER_TO_TAG = {"D": Tag.DIRICHLET, "N": Tag.NEUMANN, "C": Tag.CONTACT}
_TAG_TO_LETTER = {v: k for k, v in _LETTER_TO_TAG.items()}


def parse_tag(value) -> Tag:
    """Accept a ``Tag``, its integer value or one of the letters D, N, C."""
    if isinstance(value, str):
        try:
            return _LETTER_TO_TAG[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown boundary tag {value!r}") from None
    tag = Tag(int(value))
    if tag == Tag.INTERIOR:
        raise ValueError("boundary faces cannot be tagged INTERIOR")
    return tag


def tag_letter(tag: Tag) -> str:
    return _TAG_TO_LETTER[Tag(tag)]


@dataclass(frozen=True)
class _Forest:
    """Refinement history needed for red-green closure."""

    leaves: np.ndarray  # (L, 3) counter-clockwise leaf triangles
    tri_leaf: np.ndarray  # (M,) leaf index of each conforming triangle
    midpoints: dict = field(default_factory=dict)  # (a, b) sorted -> vertex


class TriMesh:
    """Immutable conforming triangulation with tagged boundary faces.

    Parameters
    ----------
    vertices : array_like, shape (N, 2)
    triangles : array_like, shape (M, 3)
        Vertex indices.  Clockwise triangles are reoriented.
    boundary_faces : array_like, shape (K, 2)
        Vertex pairs of the boundary faces, any order within a pair.
    boundary_tags : sequence
        One tag per boundary face (``Tag`` or letter).

    Raises
    ------
    ValueError
        On degenerate triangles, non-manifold edges, or boundary faces that
        are untagged, tagged twice, or not on the boundary.
    """

    def __init__(self, vertices, triangles, boundary_faces, boundary_tags, *, _forest=None):
        verts = np.array(vertices, dtype=float).reshape(-1, 2)
        tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle refers to a missing vertex")
        area2 = _signed_area2(verts, tris)
        scale = np.max(np.ptp(verts, axis=0)) if len(verts) else 1.0
        if np.any(np.abs(area2) <= 1e-14 * scale**2):
            raise ValueError("degenerate triangle with zero area")
        flip = area2 < 0
        if np.any(flip):
            tris[flip] = tris[flip][:, [0, 2, 1]]
        verts.setflags(write=False)
        tris.setflags(write=False)
        self.vertices = verts
        self.triangles = tris
        self._build_faces()
        self._apply_tags(np.asarray(boundary_faces, dtype=np.int64).reshape(-1, 2), boundary_tags)
        if _forest is None:
            _forest = _Forest(tris.copy(), np.arange(len(tris)), {})
        self._forest = _forest

    # ------------------------------------------------------------------ setup
    def _build_faces(self) -> None:
        tris = self.triangles
        n_tri = len(tris)
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = tris[:, loc]  # (M, 3, 2)
        lo = pairs.min(axis=2).ravel()
        hi = pairs.max(axis=2).ravel()
        keys = lo * len(self.vertices) + hi
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise ValueError("non-manifold edge shared by more than two triangles")
        n_faces = len(uniq)
        self.faces = np.column_stack([uniq // len(self.vertices), uniq % len(self.vertices)])
        self.tri_faces = inverse.reshape(n_tri, 3)
        order = np.argsort(inverse, kind="stable")
        cell = order // 3
        local = order % 3
        first = np.searchsorted(inverse[order], np.arange(n_faces))
        self.face_cells = np.full((n_faces, 2), -1, dtype=np.int64)
        self.face_local = np.full((n_faces, 2), -1, dtype=np.int64)
        self.face_cells[:, 0] = cell[first]
        self.face_local[:, 0] = local[first]
        two = counts == 2
        self.face_cells[two, 1] = cell[first[two] + 1]
        self.face_local[two, 1] = local[first[two] + 1]

        xa = self.vertices[self.faces[:, 0]]
        xb = self.vertices[self.faces[:, 1]]
        tangent = xb - xa
        self.h_F = np.linalg.norm(tangent, axis=1)
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / self.h_F[:, None]
        bnd = ~two
        opposite = self.vertices[tris[self.face_cells[bnd, 0], self.face_local[bnd, 0]]]
        outward = np.einsum("ij,ij->i", normal[bnd], xa[bnd] - opposite) > 0
        nb = normal[bnd]
        nb[~outward] *= -1.0
        normal[bnd] = nb
        self.face_normals = normal
        # +1 where the stored face normal points out of the cell.
        sign = np.empty((n_tri, 3))
        for i in range(3):
            f = self.tri_faces[:, i]
            opp = self.vertices[tris[:, i]]
            sign[:, i] = np.sign(np.einsum("ij,ij->i", normal[f], self.vertices[self.faces[f, 0]] - opp))
        self.cell_face_sign = sign
        for arr in (self.faces, self.tri_faces, self.face_cells, self.face_local, self.h_F,
                    self.face_normals, self.cell_face_sign):
            arr.setflags(write=False)

    def _apply_tags(self, bfaces: np.ndarray, btags) -> None:
        n_faces = len(self.faces)
        tags = np.zeros(n_faces, dtype=np.int8)
        btags = [parse_tag(t) for t in btags]
        if len(btags) != len(bfaces):
            raise ValueError("one tag is required per boundary face")
        nv = len(self.vertices)
        keys = self.faces[:, 0] * nv + self.faces[:, 1]
        bkeys = bfaces.min(axis=1) * nv + bfaces.max(axis=1)
        pos = np.searchsorted(keys, bkeys)
        pos = np.minimum(pos, n_faces - 1)
        if np.any(keys[pos] != bkeys):
            raise ValueError("tagged face is not an edge of the mesh")
        if len(np.unique(pos)) != len(pos):
            raise ValueError("boundary face tagged more than once")
        if np.any(self.face_cells[pos, 1] >= 0):
            raise ValueError("tagged face is an interior face")
        tags[pos] = btags
        is_bnd = self.face_cells[:, 1] < 0
        if np.any(tags[is_bnd] == 0):
            raise ValueError("boundary face without tag")
        tags.setflags(write=False)
        self.face_tags = tags

    # ------------------------------------------------------------ properties
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * _signed_area2(self.vertices, self.triangles)

    @cached_property
    def h_T(self) -> np.ndarray:
        """Triangle diameters (longest edge)."""
        return self.h_F[self.tri_faces].max(axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def grad_bary(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape ``(M, 3, 2)``."""
        x = self.vertices[self.triangles]
        g = np.empty((self.n_cells, 3, 2))
        for i in range(3):
            e = x[:, (i + 2) % 3] - x[:, (i + 1) % 3]
            g[:, i, 0] = -e[:, 1]
            g[:, i, 1] = e[:, 0]
        return g / (2.0 * self.areas)[:, None, None]

    def faces_with_tag(self, tag) -> np.ndarray:
        return np.flatnonzero(self.face_tags == int(parse_tag(tag)))

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @cached_property
    def vertex_cells(self) -> list[np.ndarray]:
        """Cells around each vertex, sorted by cell index."""
        flat = self.triangles.ravel()
        order = np.argsort(flat, kind="stable")
        cells = order // 3
        bounds = np.searchsorted(flat[order], np.arange(self.n_vertices + 1))
        return [cells[bounds[a]:bounds[a + 1]] for a in range(self.n_vertices)]

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.faces[self.boundary_faces].ravel()] = True
        return mask

    @cached_property
    def dirichlet_vertex_mask(self) -> np.ndarray:
        """Vertices lying on at least one Dirichlet face (closed faces)."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.faces[self.faces_with_tag(Tag.DIRICHLET)].ravel()] = True
        return mask

    def boundary_records(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary faces and their tags, as accepted by the constructor."""
        b = self.boundary_faces
        return self.faces[b].copy(), self.face_tags[b].copy()

    # ------------------------------------------------------------ geometry
    def locate(self, points: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Find a cell containing each point.

        Returns
        -------
        cells : ndarray of int, shape (n,)
            ``-1`` for points outside the mesh.
        bary : ndarray, shape (n, 3)
            Barycentric coordinates in the returned cell.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        cells = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        tree = self._centroid_tree
        k = min(12, self.n_cells)
        _, cand = tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(len(pts), k)
        best = np.full(len(pts), -np.inf)
        for j in range(k):
            c = cand[:, j]
            lam = self._bary(c, pts)
            score = lam.min(axis=1)
            better = score > best
            best[better] = score[better]
            cells[better] = c[better]
            bary[better] = lam[better]
        miss = np.flatnonzero(best < -tol)
        for i in miss:  # rare: thin or far-away triangles
            lam = self._bary(np.arange(self.n_cells), np.repeat(pts[i][None], self.n_cells, 0))
            c = int(np.argmax(lam.min(axis=1)))
            if lam[c].min() >= -tol:
                cells[i], bary[i] = c, lam[c]
            else:
                cells[i] = -1
        return cells, bary

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    def barycentric(self, cells: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``points[i]`` in ``cells[i]``, shape ``(n, 3)``."""
        cells = np.asarray(cells, dtype=np.int64).ravel()
        return self._bary(cells, np.asarray(points, dtype=float).reshape(-1, 2))

    def _bary(self, cells: np.ndarray, pts: np.ndarray) -> np.ndarray:
        x0 = self.vertices[self.triangles[cells, 0]]
        g = self.grad_bary[cells]
        d = pts - x0
        l1 = np.einsum("ij,ij->i", g[:, 1], d)
        l2 = np.einsum("ij,ij->i", g[:, 2], d)
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def __repr__(self) -> str:
        counts = {tag_letter(t): int(np.sum(self.face_tags == t)) for t in (1, 2, 3)}
        return f"TriMesh(vertices={self.n_vertices}, triangles={self.n_cells}, boundary={counts})"


def _signed_area2(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    x = verts[tris]
    e1 = x[:, 1] - x[:, 0]
    e2 = x[:, 2] - x[:, 0]
    return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]


# ---------------------------------------------------------------- builders
TagRule = Callable[[np.ndarray, np.ndarray], object]


def build_rect_mesh(nx: int, ny: int, rect=(0.0, 1.0, 0.0, 1.0), tag_rule: TagRule | None = None) -> TriMesh:
    """Structured triangulation of a rectangle.

    Each cell is split along its diagonal from lower-left to upper-right, so
    interior vertices have six neighbouring triangles.

    Parameters
    ----------
    nx, ny : int
        Number of cells per direction.
    rect : tuple
        ``(x0, x1, y0, y1)``.
    tag_rule : callable, optional
        ``tag_rule(a, b)`` receives the two endpoints of a boundary face and
        returns its tag.  Every face is Neumann by default.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    x0, x1, y0, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper
    bottom = np.column_stack([idx[0, :-1], idx[0, 1:]])
    right = np.column_stack([idx[:-1, -1], idx[1:, -1]])
    top = np.column_stack([idx[-1, 1:], idx[-1, :-1]])
    left = np.column_stack([idx[1:, 0], idx[:-1, 0]])
    bfaces = np.vstack([bottom, right, top, left])
    rule = tag_rule if tag_rule is not None else (lambda a, b: Tag.NEUMANN)
    tags = [parse_tag(rule(verts[i], verts[j])) for i, j in bfaces]
    return TriMesh(verts, tris, bfaces, tags)


@dataclass(frozen=True)
class Segment:
    """Straight boundary segment carrying a tag."""

    start: tuple[float, float]
    end: tuple[float, float]
    tag: Tag

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        d = b - a
        L2 = float(d @ d)
        s = float((p - a) @ d) / L2
        if s < -tol or s > 1.0 + tol:
            return False
        return float(np.linalg.norm(a + s * d - p)) <= tol * max(1.0, np.sqrt(L2))


def segment_tag_rule(segments: Iterable[Segment], default=Tag.NEUMANN) -> TagRule:
    """Tag rule giving a face the tag of the segment containing both endpoints."""
    segs = list(segments)

    def rule(a: np.ndarray, b: np.ndarray):
        for s in segs:
            if s.contains(a) and s.contains(b):
                return s.tag
        return default

    return rule


# -------------------------------------------------------------- patches
class VertexKind(IntEnum):
    INTERIOR = 0
    BOUNDARY = 1
    DIRICHLET = 2


@dataclass(frozen=True)
class VertexPatch:
    """Element star of a vertex with its boundary classification.

    Attributes
    ----------
    center : int
    cells : ndarray
        Triangles sharing the vertex, ascending.
    inner_faces : ndarray
        Faces through the center shared by two patch cells.
    outer_faces : ndarray
        Faces of the patch boundary lying inside the domain.
    dirichlet_faces, neumann_faces, contact_faces : ndarray
        Patch-cell faces on the respective part of the domain boundary.
    kind : VertexKind
    """

    center: int
    cells: np.ndarray
    inner_faces: np.ndarray
    outer_faces: np.ndarray
    dirichlet_faces: np.ndarray
    neumann_faces: np.ndarray
    contact_faces: np.ndarray
    kind: VertexKind

    @property
    def in_dirichlet_set(self) -> bool:
        return self.kind == VertexKind.DIRICHLET


def vertex_patch(mesh: TriMesh, a: int) -> VertexPatch:
    """Build the patch of vertex ``a``."""
    if not 0 <= a < mesh.n_vertices:
        raise IndexError(f"vertex {a} out of range")
    cells = mesh.vertex_cells[a]
    faces = np.unique(mesh.tri_faces[cells].ravel())
    owner_in = np.isin(mesh.face_cells[faces, 0], cells)
    neigh = mesh.face_cells[faces, 1]
    neigh_in = (neigh >= 0) & np.isin(neigh, cells)
    interior = neigh >= 0
    inner = faces[interior & owner_in & neigh_in]
    outer = faces[interior & ~(owner_in & neigh_in)]
    tags = mesh.face_tags[faces]
    if mesh.dirichlet_vertex_mask[a]:
        kind = VertexKind.DIRICHLET
    elif mesh.boundary_vertex_mask[a]:
        kind = VertexKind.BOUNDARY
    else:
        kind = VertexKind.INTERIOR
    return VertexPatch(
        center=int(a),
        cells=cells,
        inner_faces=inner,
        outer_faces=outer,
        dirichlet_faces=faces[tags == Tag.DIRICHLET],
        neumann_faces=faces[tags == Tag.NEUMANN],
        contact_faces=faces[tags == Tag.CONTACT],
        kind=kind,
    )


@dataclass(frozen=True)
class StarSets:
    """Vertex-neighbour stars of a face and of a cell."""

    face_star: np.ndarray
    cell_star: np.ndarray


def star_sets(mesh: TriMesh, face: int, cell: int) -> StarSets:
    """Cells sharing at least one vertex with ``face`` and with ``cell``."""
    fs = np.unique(np.concatenate([mesh.vertex_cells[v] for v in mesh.faces[face]]))
    cs = np.unique(np.concatenate([mesh.vertex_cells[v] for v in mesh.triangles[cell]]))
    return StarSets(fs, cs)


# ------------------------------------------------------------ refinement
def _red_children(t: Sequence[int], m: Sequence[int]) -> list[tuple[int, int, int]]:
    """Children of leaf ``t = (a, b, c)`` with midpoints ``m = (m_ab, m_bc, m_ca)``."""
    a, b, c = t
    mab, mbc, mca = m
    return [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]


def refine(mesh: TriMesh, marked: Iterable[int]) -> TriMesh:
    """Red-refine the marked triangles and close the mesh with green bisections.

    A green triangle that is marked causes its leaf parent to be red-refined.
    Leaves with two or more split edges, or with a split edge whose half is
    itself split, are red-refined until no such leaf remains.  Boundary tags
    are inherited by the halves of split boundary faces.

    Returns a copy of ``mesh`` when ``marked`` is empty.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_cells):
        raise IndexError("marked element out of range")
    forest = mesh._forest
    bfaces, btags = mesh.boundary_records()
    if marked.size == 0:
        return TriMesh(mesh.vertices, mesh.triangles, bfaces, btags,
                       _forest=_Forest(forest.leaves.copy(), forest.tri_leaf.copy(), dict(forest.midpoints)))

    verts = [tuple(v) for v in mesh.vertices]
    midpoints = dict(forest.midpoints)
    tag_of = {(int(min(a, b)), int(max(a, b))): Tag(t) for (a, b), t in zip(bfaces, btags)}
    leaves = [tuple(int(v) for v in t) for t in forest.leaves]
    alive = [True] * len(leaves)

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        m = midpoints.get(key)
        if m is None:
            m = len(verts)
            pa, pb = verts[a], verts[b]
            verts.append(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0))
            midpoints[key] = m
            tag = tag_of.get(key)
            if tag is not None:
                tag_of[(min(a, m), max(a, m))] = tag
                tag_of[(min(m, b), max(m, b))] = tag
        return m

    def split_edges(t) -> list[int]:
        out = []
        for i in range(3):
            a, b = t[i], t[(i + 1) % 3]
            if (min(a, b), max(a, b)) in midpoints:
                out.append(i)
        return out

    def needs_red(t) -> bool:
        s = split_edges(t)
        if len(s) >= 2:
            return True
        for i in s:
            a, b = t[i], t[(i + 1) % 3]
            m = midpoints[(min(a, b), max(a, b))]
            if (min(a, m), max(a, m)) in midpoints or (min(m, b), max(m, b)) in midpoints:
                return True
        return False

    def red(li: int) -> None:
        t = leaves[li]
        alive[li] = False
        m = (midpoint(t[0], t[1]), midpoint(t[1], t[2]), midpoint(t[2], t[0]))
        for child in _red_children(t, m):
            leaves.append(child)
            alive.append(True)

    for li in sorted({int(forest.tri_leaf[c]) for c in marked}):
        red(li)
    changed = True
    while changed:
        changed = False
        for li in range(len(leaves)):
            if alive[li] and needs_red(leaves[li]):
                red(li)
                changed = True

    new_leaves, tris, tri_leaf = [], [], []
    for li, t in enumerate(leaves):
        if not alive[li]:
            continue
        lidx = len(new_leaves)
        new_leaves.append(t)
        s = split_edges(t)
        if not s:
            tris.append(t)
            tri_leaf.append(lidx)
        else:
            i = s[0]
            a, b, c = t[i], t[(i + 1) % 3], t[(i + 2) % 3]
            m = midpoints[(min(a, b), max(a, b))]
            tris.extend([(a, m, c), (m, b, c)])
            tri_leaf.extend([lidx, lidx])

    tris_arr = np.array(tris, dtype=np.int64)
    verts_arr = np.array(verts, dtype=float)
    # Boundary faces of the new conforming mesh.
    loc = np.array([[1, 2], [2, 0], [0, 1]])
    pairs = np.sort(tris_arr[:, loc].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    new_tags = [tag_of[(int(a), int(b))] for a, b in bnd]
    return TriMesh(verts_arr, tris_arr, bnd, new_tags,
                   _forest=_Forest(np.array(new_leaves, dtype=np.int64), np.array(tri_leaf), midpoints))


def refine_uniform(mesh: TriMesh, times: int = 1) -> TriMesh:
    for _ in range(times):
        mesh = refine(mesh, range(mesh.n_cells))
    return mesh


def conformity_defects(mesh: TriMesh) -> int:
    """Count hanging nodes: vertices lying inside an edge of the mesh."""
    x = mesh.vertices
    a = x[mesh.faces[:, 0]]
    b = x[mesh.faces[:, 1]]
    mid = 0.5 * (a + b)
    tree = cKDTree(x)
    count = 0
    for f, idx in enumerate(tree.query_ball_point(mid, 0.5 * mesh.h_F * (1 + 1e-9))):
        for v in idx:
            if v in mesh.faces[f]:
                continue
            d = b[f] - a[f]
            s = (x[v] - a[f]) @ d / (d @ d)
            if 1e-9 < s < 1 - 1e-9 and abs(d[0] * (x[v, 1] - a[f, 1]) - d[1] * (x[v, 0] - a[f, 0])) <= 1e-9 * (d @ d):
                count += 1
    return count

