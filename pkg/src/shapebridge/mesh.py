"""Triangle meshes and exact geometric queries against them.

Distances are Euclidean point-to-closed-triangle distances in mm. The spatial
index accelerates nearest-face queries but is exact: results are identical to
an exhaustive scan over all faces (ties on distance break toward the lowest
face index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

DEGENERATE_AREA = 1e-12  # mm^2; faces at or below this are rejected

_QUERY_CHUNK = 8192  # points per batch in index queries, bounds pair-array memory


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with vertices in mm.

    ``vertices`` has shape (n, 3) float64 and ``faces`` (m, 3) int64. An
    optional ``normals`` array carries per-vertex unit normals.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DataError(f"vertices must have shape (n, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DataError(f"faces must have shape (m, 3), got {faces.shape}")
        if not np.all(np.isfinite(verts)):
            raise DataError("mesh contains non-finite vertex coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise DataError("face index out of range")
        if faces.size:
            areas = face_areas_of(verts, faces)
            bad = np.flatnonzero(areas <= DEGENERATE_AREA)
            if bad.size:
                raise DataError(
                    f"degenerate (zero-area) faces at indices {bad[:8].tolist()}"
                )
        if self.normals is not None:
            normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if normals.shape != verts.shape:
                raise DataError("normals must match vertex array shape")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise DataError("vertex normals must have unit length")
            object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The three corner arrays (m, 3) of every face."""
        return (
            self.vertices[self.faces[:, 0]],
            self.vertices[self.faces[:, 1]],
            self.vertices[self.faces[:, 2]],
        )

    def face_areas(self) -> np.ndarray:
        return face_areas_of(self.vertices, self.faces)

    def total_area(self) -> float:
        return float(self.face_areas().sum())


def face_areas_of(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    ab = vertices[faces[:, 1]] - a
    ac = vertices[faces[:, 2]] - a
    return 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)


# ---------------------------------------------------------------------------
# OFF file I/O


def load_off(path) -> TriangleMesh:
    """Read an ASCII OFF mesh (triangles only)."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise DataError(f"{path}: not an OFF file")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        cursor = 4  # skip the (unused) edge count
        verts = np.array(tokens[cursor : cursor + 3 * nv], dtype=np.float64).reshape(nv, 3)
        cursor += 3 * nv
        faces = np.empty((nf, 3), dtype=np.int64)
        for i in range(nf):
            arity = int(tokens[cursor])
            if arity != 3:
                raise DataError(f"{path}: face {i} has {arity} vertices, only triangles supported")
            faces[i] = [int(t) for t in tokens[cursor + 1 : cursor + 4]]
            cursor += 4
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed OFF file ({exc})") from exc
    return TriangleMesh(vertices=verts, faces=faces)


def save_off(mesh: TriangleMesh, path):
    """Write an ASCII OFF mesh with full-precision coordinates."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_vertices} {mesh.num_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# Point-to-triangle distance


def closest_points_on_triangles(
    points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Closest point on each closed triangle (a, b, c) to each query point.

    All inputs are (k, 3); pair i is evaluated against triangle i. The Voronoi
    region classification follows the usual vertex/edge/interior case order.
    """
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0.0, (d4 - d3) / denom_bc, 0.0)
        denom = va + vb + vc
        v_in = np.where(denom != 0.0, vb / denom, 0.0)
        w_in = np.where(denom != 0.0, vc / denom, 0.0)

    candidates = [
        a,
        b,
        a + v_ab[:, None] * ab,
        c,
        a + w_ac[:, None] * ac,
        b + w_bc[:, None] * (c - b),
        a + v_in[:, None] * ab + w_in[:, None] * ac,
    ]
    conditions = [
        (d1 <= 0.0) & (d2 <= 0.0),
        (d3 >= 0.0) & (d4 <= d3),
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
        (d6 >= 0.0) & (d5 <= d6),
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
        (va <= 0.0) & (d4 >= d3) & (d5 >= d6),
        np.ones(len(points), dtype=bool),
    ]
    return np.select([cnd[:, None] for cnd in conditions], candidates)


def point_triangle_distance(p, tri) -> tuple[float, np.ndarray]:
    """Distance from a point to one closed triangle, with the closest point."""
    tri = np.asarray(tri, dtype=np.float64)
    if tri.shape != (3, 3):
        raise DataError(f"triangle must be three 3D points, got shape {tri.shape}")
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if area <= DEGENERATE_AREA:
        raise DataError("degenerate triangle")
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    closest = closest_points_on_triangles(p, tri[None, 0], tri[None, 1], tri[None, 2])[0]
    return float(np.linalg.norm(p[0] - closest)), closest


# ---------------------------------------------------------------------------
# Accelerated nearest-face queries


@dataclass(frozen=True)
class SpatialIndex:
    """KD-tree acceleration for exact nearest-face queries.

    A vertex tree gives an upper bound on the surface distance; a centroid
    tree then yields every face whose closest point could beat that bound
    (centroid within bound + max centroid-to-corner radius), and the exact
    minimum is taken over those candidates only. The candidate set provably
    contains every distance-minimizing face, so results match an exhaustive
    scan exactly.
    """

    mesh: TriangleMesh
    vertex_tree: cKDTree = field(repr=False)
    centroid_tree: cKDTree = field(repr=False)
    max_face_radius: float


def build_index(mesh: TriangleMesh) -> SpatialIndex:
    if mesh.num_faces == 0:
        raise DataError("cannot index an empty mesh")
    used = np.unique(mesh.faces)
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    corner_dist = np.linalg.norm(
        mesh.vertices[mesh.faces] - centroids[:, None, :], axis=2
    )
    return SpatialIndex(
        mesh=mesh,
        vertex_tree=cKDTree(mesh.vertices[used]),
        centroid_tree=cKDTree(centroids),
        max_face_radius=float(corner_dist.max()),
    )


def distances_to_mesh(
    points: np.ndarray, index: SpatialIndex
) -> tuple[np.ndarray, np.ndarray]:
    """Exact distances (n,) and nearest face ids (n,) for many points."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must have shape (n, 3), got {pts.shape}")
    corners = index.mesh.face_corners()
    out_dist = np.empty(len(pts), dtype=np.float64)
    out_face = np.empty(len(pts), dtype=np.int64)
    for start in range(0, len(pts), _QUERY_CHUNK):
        chunk = pts[start : start + _QUERY_CHUNK]
        upper, _ = index.vertex_tree.query(chunk)
        radii = upper + index.max_face_radius + 1e-9
        groups = index.centroid_tree.query_ball_point(chunk, radii)
        counts = np.array([len(g) for g in groups])
        point_ids = np.repeat(np.arange(len(chunk)), counts)
        face_ids = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
        closest = closest_points_on_triangles(
            chunk[point_ids],
            corners[0][face_ids],
            corners[1][face_ids],
            corners[2][face_ids],
        )
        dists = np.linalg.norm(chunk[point_ids] - closest, axis=1)
        # lowest face id among exact distance ties, then per-point minimum
        order = np.lexsort((face_ids, dists, point_ids))
        firsts = np.searchsorted(point_ids[order], np.arange(len(chunk)))
        out_dist[start : start + len(chunk)] = dists[order[firsts]]
        out_face[start : start + len(chunk)] = face_ids[order[firsts]]
    return out_dist, out_face


def distance_to_mesh(p, mesh: TriangleMesh, index: SpatialIndex | None = None):
    """Distance from one point to the mesh surface, with the nearest face id."""
    if mesh.num_faces == 0:
        raise DataError("cannot query an empty mesh")
    if index is None:
        index = build_index(mesh)
    dist, face = distances_to_mesh(np.asarray(p, dtype=np.float64).reshape(1, 3), index)
    return float(dist[0]), int(face[0])


# ---------------------------------------------------------------------------
# Surface sampling


class SurfaceSampler:
    """Area-uniform random point sampling on a mesh surface.

    Faces are drawn with probability proportional to area via the cumulative
    area table; points are uniform in barycentric coordinates. All draws come
    from a generator seeded once at construction, so sequences are
    reproducible for a fixed seed.
    """

    def __init__(self, mesh: TriangleMesh, seed: int):
        if mesh.num_faces == 0:
            raise DataError("cannot sample an empty mesh")
        areas = mesh.face_areas()
        total = areas.sum()
        if total <= 0.0:
            raise DataError("mesh has zero total area")
        self.mesh = mesh
        self.seed = int(seed)
        self.cumulative_area = np.cumsum(areas)
        self._rng = np.random.default_rng(self.seed)

    def sample(self, n: int) -> np.ndarray:
        """Draw n surface points, shape (n, 3)."""
        if n < 1:
            raise DataError(f"sample count must be >= 1, got {n}")
        total = self.cumulative_area[-1]
        u = self._rng.random(n) * total
        face = np.minimum(
            np.searchsorted(self.cumulative_area, u, side="right"),
            len(self.cumulative_area) - 1,
        )
        a, b, c = self.mesh.face_corners()
        s = np.sqrt(self._rng.random(n))
        t = self._rng.random(n)
        wa = 1.0 - s
        wb = s * (1.0 - t)
        wc = s * t
        return (
            wa[:, None] * a[face] + wb[:, None] * b[face] + wc[:, None] * c[face]
        )


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """One-shot area-uniform surface sampling (see SurfaceSampler)."""
    return SurfaceSampler(mesh, seed).sample(n)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Whether the mesh is a closed, consistently oriented 2-manifold.

    Holds exactly when every directed edge appears once, i.e. each
    undirected edge is shared by two faces with opposite winding.
    """
    if mesh.num_faces == 0:
        return False
    f = mesh.faces
    if (f[:, 0] == f[:, 1]).any() or (f[:, 1] == f[:, 2]).any() or (f[:, 2] == f[:, 0]).any():
        return False
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    if len(np.unique(directed, axis=0)) != len(directed):
        return False
    flipped = directed[:, ::-1]
    both = np.concatenate([directed, flipped])
    return 2 * len(np.unique(both, axis=0)) == len(both)


# ---------------------------------------------------------------------------
# Normals and normal-offset deformation


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted per-vertex unit normals following the face winding."""
    a, b, c = mesh.face_corners()
    face_cross = np.cross(b - a, c - a)  # length = 2 * area, so summing is area-weighted
    accum = np.zeros_like(mesh.vertices)
    counts = np.zeros(mesh.num_vertices, dtype=np.int64)
    for col in range(3):
        np.add.at(accum, mesh.faces[:, col], face_cross)
        np.add.at(counts, mesh.faces[:, col], 1)
    if np.any(counts == 0):
        isolated = np.flatnonzero(counts == 0)
        raise DataError(f"isolated vertices at indices {isolated[:8].tolist()}")
    lengths = np.linalg.norm(accum, axis=1)
    if np.any(lengths == 0.0):
        raise DataError("vertex with exactly cancelling incident face normals")
    return accum / lengths[:, None]


def offset_along_normals(
    mesh: TriangleMesh,
    offset: float,
    floor: TriangleMesh | None = None,
    min_gap: float = 0.0,
) -> TriangleMesh:
    """Move every vertex by ``offset`` mm along its vertex normal.

    Negative offsets move inward (against the normal). When a ``floor`` mesh
    is given, each vertex stops just before its motion segment first comes
    closer than ``min_gap`` to the floor: the segment is marched at 1/64 of
    its length to bracket the first violation (so it cannot tunnel through
    the floor), then a binary search pins the stop point to 1e-3 mm.
    Connectivity is unchanged.
    """
    offset = float(offset)
    if not np.isfinite(offset):
        raise DataError("offset must be finite")
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    moved = mesh.vertices + offset * normals
    if floor is None or offset == 0.0:
        return TriangleMesh(vertices=moved if offset != 0.0 else mesh.vertices.copy(),
                            faces=mesh.faces.copy())
    if floor.num_faces == 0:
        raise DataError("floor mesh is empty")
    floor_index = build_index(floor)
    # the floor distance is 1-Lipschitz along the segment, so vertices with
    # (f(0) + f(1) - length) / 2 >= min_gap can never violate; march only the rest
    dist_start, _ = distances_to_mesh(mesh.vertices, floor_index)
    dist_end, _ = distances_to_mesh(moved, floor_index)
    length = abs(offset)
    candidates = np.flatnonzero((dist_start + dist_end - length) / 2.0 < min_gap)
    if candidates.size:
        starts = mesh.vertices[candidates]
        steps = offset * normals[candidates]
        n_march = 64
        grid = np.linspace(0.0, 1.0, n_march + 1)
        below = np.empty((n_march + 1, len(candidates)), dtype=bool)
        for j, s in enumerate(grid):
            dist_s, _ = distances_to_mesh(starts + s * steps, floor_index)
            below[j] = dist_s < min_gap
        hit = below.any(axis=0)
        first = np.argmax(below, axis=0)
        # bracket [grid[first-1], grid[first]] holds the first crossing;
        # vertices violating already at s=0 stay put
        lo = np.where(hit, grid[np.maximum(first - 1, 0)], 1.0)
        hi = np.where(hit, np.where(first == 0, 0.0, grid[first]), 1.0)
        search = np.flatnonzero(hit & (first > 0))
        if search.size:
            span = length / n_march
            iterations = int(np.ceil(np.log2(max(span / 1e-3, 1.0)))) + 1
            for _ in range(iterations):
                mid = 0.5 * (lo[search] + hi[search])
                dist_mid, _ = distances_to_mesh(
                    starts[search] + mid[:, None] * steps[search], floor_index
                )
                ok = dist_mid >= min_gap
                lo[search] = np.where(ok, mid, lo[search])
                hi[search] = np.where(ok, hi[search], mid)
        stopped = hit
        moved[candidates[stopped]] = starts[stopped] + lo[stopped, None] * steps[stopped]
    return TriangleMesh(vertices=moved, faces=mesh.faces.copy())


# ---------------------------------------------------------------------------
# Icosphere construction

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def icosphere(radius: float, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere, outward winding.

    Each subdivision splits every face in four with shared (deduplicated)
    edge midpoints, so the result is watertight by construction.
    """
    if radius <= 0.0:
        raise DataError(f"radius must be positive, got {radius}")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(int(subdivisions)):
        midpoint: dict[tuple[int, int], int] = {}

        def midpoint_index(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = new_faces
    vertices = np.array(verts) * float(radius) + np.asarray(center, dtype=np.float64)
    return TriangleMesh(vertices=vertices, faces=np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Triangle vs axis-aligned box overlap (separating axis test)


def triangles_overlap_boxes(
    triangles: np.ndarray, centers: np.ndarray, half_sizes: np.ndarray
) -> np.ndarray:
    """Pairwise triangle/box overlap, (k, 3, 3) vs (k, 3) boxes -> (k,) bool.

    Separating-axis test over the 13 candidate axes: 3 box face normals, the
    triangle normal, and the 9 cross products of box axes with triangle edges.
    Touching counts as overlap.
    """
    tri = np.asarray(triangles, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    half = np.broadcast_to(np.asarray(half_sizes, dtype=np.float64), centers.shape)
    v = tri - centers[:, None, :]
    separated = np.zeros(len(tri), dtype=bool)

    # box face normals: AABB overlap of the triangle's bounds
    for axis in range(3):
        lo = v[:, :, axis].min(axis=1)
        hi = v[:, :, axis].max(axis=1)
        separated |= (lo > half[:, axis]) | (hi < -half[:, axis])

    edges = np.stack(
        [v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1
    )  # (k, 3, 3)

    # triangle plane
    normal = np.cross(edges[:, 0], edges[:, 1])
    plane_dist = np.einsum("ij,ij->i", normal, v[:, 0])
    plane_radius = np.einsum("ij,ij->i", np.abs(normal), half)
    separated |= np.abs(plane_dist) > plane_radius

    # cross products of the 3 box axes with the 3 triangle edges
    for box_axis in range(3):
        unit = np.zeros(3)
        unit[box_axis] = 1.0
        axes = np.cross(unit[None, None, :], edges)  # (k, 3, 3)
        for e in range(3):
            axis_vec = axes[:, e]
            proj = np.einsum("kij,kj->ki", v, axis_vec)
            radius = np.einsum("kj,kj->k", np.abs(axis_vec), half)
            separated |= (proj.min(axis=1) > radius) | (proj.max(axis=1) < -radius)

    return ~separated
