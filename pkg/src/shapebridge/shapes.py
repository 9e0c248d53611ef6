"""Voxel shape representations of cortical surface pairs.

Builds the four conditioning grids used by the synthesis model from a pial
and a white-matter surface mesh: per-surface truncated signed distance
fields (negative inside), the fused cortex SDF, the cortical ribbon mask,
and the binary surface edge map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mesh as meshmod
from . import volume
from .errors import DataError, GeometryMismatchError
from .mesh import TriangleMesh
from .volume import GridHeader, VoxelGrid

_PARITY_SEED = 0x5D17  # fixed jitter seed keeps SDFs reproducible per mesh+grid
_MAX_DISAGREEMENT = 1e-3  # fraction of voxels whose axis votes may disagree


def default_truncation(header: GridHeader) -> float:
    """Default SDF truncation: four voxels' worth of mm (coarsest axis)."""
    return 4.0 * float(max(header.spacing))


def containment_votes(mesh: TriangleMesh, header: GridHeader) -> tuple[np.ndarray, float]:
    """Inside/outside votes per axis by ray-casting parity.

    For each of the three axes, every lattice column gets one ray with a
    slightly jittered origin (to dodge edge-grazing); a voxel is inside for
    that axis when the count of surface crossings beyond its center is odd.
    Returns the (3,) + dims boolean vote array and the fraction of voxels
    whose three votes disagree.
    """
    dims = np.array(header.dims)
    origin = np.array(header.origin)
    spacing = np.array(header.spacing)
    a, b, c = mesh.face_corners()
    votes = np.empty((3,) + header.dims, dtype=bool)
    rng = np.random.default_rng(_PARITY_SEED)
    for axis in range(3):
        p, q = (axis + 1) % 3, (axis + 2) % 3
        n_ray, n_p, n_q = dims[axis], dims[p], dims[q]
        jit_p = rng.uniform(-1.0, 1.0, size=(n_p, n_q)) * 1e-3 * spacing[p]
        jit_q = rng.uniform(-1.0, 1.0, size=(n_p, n_q)) * 1e-3 * spacing[q]
        col_p = origin[p] + np.arange(n_p)[:, None] * spacing[p] + jit_p
        col_q = origin[q] + np.arange(n_q)[None, :] * spacing[q] + jit_q

        # candidate (face, column) pairs from face bounding rectangles
        margin = 2e-3 * max(spacing[p], spacing[q])
        fp = np.stack([a[:, p], b[:, p], c[:, p]], axis=1)
        fq = np.stack([a[:, q], b[:, q], c[:, q]], axis=1)
        j0 = np.ceil((fp.min(1) - margin - origin[p]) / spacing[p]).astype(np.int64)
        j1 = np.floor((fp.max(1) + margin - origin[p]) / spacing[p]).astype(np.int64)
        k0 = np.ceil((fq.min(1) - margin - origin[q]) / spacing[q]).astype(np.int64)
        k1 = np.floor((fq.max(1) + margin - origin[q]) / spacing[q]).astype(np.int64)
        j0, j1 = np.clip(j0, 0, n_p - 1), np.clip(j1, 0, n_p - 1)
        k0, k1 = np.clip(k0, 0, n_q - 1), np.clip(k1, 0, n_q - 1)
        nj = np.maximum(j1 - j0 + 1, 0)
        nk = np.maximum(k1 - k0 + 1, 0)
        counts = nj * nk
        face_ids = np.repeat(np.arange(mesh.num_faces), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        rep_nk = np.repeat(nk, counts)
        cols_j = np.repeat(j0, counts) + local // np.maximum(rep_nk, 1)
        cols_k = np.repeat(k0, counts) + local % np.maximum(rep_nk, 1)

        pp = col_p[cols_j, cols_k]
        qq = col_q[cols_j, cols_k]
        ap_, aq_ = a[face_ids, p], a[face_ids, q]
        bp_, bq_ = b[face_ids, p], b[face_ids, q]
        cp_, cq_ = c[face_ids, p], c[face_ids, q]
        det = (bp_ - ap_) * (cq_ - aq_) - (bq_ - aq_) * (cp_ - ap_)
        lam_a = (bp_ - pp) * (cq_ - qq) - (bq_ - qq) * (cp_ - pp)
        lam_b = (cp_ - pp) * (aq_ - qq) - (cq_ - qq) * (ap_ - pp)
        lam_c = (ap_ - pp) * (bq_ - qq) - (aq_ - qq) * (bp_ - pp)
        pos = (lam_a > 0) & (lam_b > 0) & (lam_c > 0)
        neg = (lam_a < 0) & (lam_b < 0) & (lam_c < 0)
        hit = (np.abs(det) > 1e-10) & (pos | neg)

        # crossing coordinate along the ray axis by barycentric interpolation
        fid = face_ids[hit]
        t_cross = (
            lam_a[hit] * a[fid, axis] + lam_b[hit] * b[fid, axis] + lam_c[hit] * c[fid, axis]
        ) / det[hit]
        col_flat = cols_j[hit] * n_q + cols_k[hit]

        # histogram of crossings by the first voxel index past each crossing
        centers = origin[axis] + np.arange(n_ray) * spacing[axis]
        bucket = np.searchsorted(centers, t_cross, side="right")
        hist = np.zeros((n_p * n_q, n_ray + 1), dtype=np.int64)
        np.add.at(hist, (col_flat, bucket), 1)
        beyond = hist[:, ::-1].cumsum(axis=1)[:, ::-1]  # crossings at bucket >= i
        inside = (beyond[:, 1:] % 2 == 1).reshape(n_p, n_q, n_ray)
        # reorder (p, q, ray) axes back to (x, y, z)
        votes[axis] = np.moveaxis(inside, (0, 1, 2), (p, q, axis))
    agree = (votes[0] == votes[1]) & (votes[1] == votes[2])
    return votes, float(1.0 - agree.mean())


def mesh_to_sdf(mesh: TriangleMesh, header: GridHeader, d_max: float | None = None) -> VoxelGrid:
    """Truncated signed distance field of a closed mesh at voxel centers.

    Unsigned distances are exact; the sign comes from ray-parity containment
    with a majority vote across the three axes. Values are clamped to
    ``[-d_max, d_max]``. Raises ``DataError`` when more than 0.1% of voxels
    get inconsistent votes, which indicates a non-watertight mesh.
    """
    if mesh.num_faces == 0:
        raise DataError("cannot build an SDF from an empty mesh")
    if d_max is None:
        d_max = default_truncation(header)
    if d_max <= 0:
        raise DataError(f"truncation distance must be positive, got {d_max}")
    index = meshmod.build_index(mesh)
    points = volume.voxel_centers(header).reshape(-1, 3)
    dist, _ = meshmod.distances_to_mesh(points, index)
    dist = dist.reshape(header.dims)
    votes, _ = containment_votes(mesh, header)
    agree = (votes[0] == votes[1]) & (votes[1] == votes[2])
    # voxel centers sitting on the surface get value 0 whatever the vote says,
    # so only off-surface voxels count toward the watertightness statistic
    off_surface = dist > 1e-6 * max(header.spacing)
    if off_surface.any():
        disagreement = float((~agree & off_surface).mean())
        if disagreement > _MAX_DISAGREEMENT:
            raise DataError(
                f"non-watertight mesh: containment votes disagree on "
                f"{disagreement:.2%} of voxels"
            )
    inside = votes.sum(axis=0) >= 2
    signed = np.where(inside, -dist, dist)
    clipped = np.clip(signed, -d_max, d_max)
    out_header = GridHeader(
        dims=header.dims, spacing=header.spacing, origin=header.origin, kind="sdf"
    )
    return VoxelGrid(header=out_header, data=clipped)


def fuse_cortex_sdf(s_pial: VoxelGrid, s_white: VoxelGrid) -> VoxelGrid:
    """Fuse pial and white SDFs into the single cortex SDF.

    Outside both surfaces the pial distance is closer, so the smaller value
    wins; inside both the white distance is closer, so the larger (less
    negative) wins; the ribbon in between, where signs differ or either
    value is exactly zero, maps to zero.
    """
    _check_geometry(s_pial, s_white)
    sp = s_pial.data
    sw = s_white.data
    fused = np.zeros_like(sp)
    both_pos = (sp > 0) & (sw > 0)
    both_neg = (sp < 0) & (sw < 0)
    fused[both_pos] = np.minimum(sp, sw)[both_pos]
    fused[both_neg] = np.maximum(sp, sw)[both_neg]
    return volume.grid_like(s_pial, fused, kind="sdf")


def ribbon_mask(s_pial: VoxelGrid, s_white: VoxelGrid) -> VoxelGrid:
    """Binary mask of the cortical ribbon: inside pial, outside white."""
    _check_geometry(s_pial, s_white)
    mask = (s_pial.data < 0) & (s_white.data > 0)
    return volume.grid_like(s_pial, mask.astype(np.float32), kind="binary-mask")


def edge_map(mesh_pial: TriangleMesh, mesh_white: TriangleMesh, header: GridHeader) -> VoxelGrid:
    """Binary map of voxels whose box intersects any face of either mesh.

    A voxel's box is centered at its center with size equal to the spacing;
    intersection uses the separating-axis triangle-box test.
    """
    occupied = np.zeros(header.dims, dtype=bool)
    for mesh in (mesh_pial, mesh_white):
        if mesh.num_faces:
            occupied |= _occupied_voxels(mesh, header)
    out_header = GridHeader(
        dims=header.dims, spacing=header.spacing, origin=header.origin, kind="binary-mask"
    )
    return VoxelGrid(header=out_header, data=occupied.astype(np.float32))


def _occupied_voxels(mesh: TriangleMesh, header: GridHeader) -> np.ndarray:
    dims = np.array(header.dims)
    origin = np.array(header.origin)
    spacing = np.array(header.spacing)
    half = spacing / 2.0
    a, b, c = mesh.face_corners()
    tri = np.stack([a, b, c], axis=1)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    # candidate voxels: centers within half a voxel of the face bounding box
    i0 = np.ceil((lo - half - origin) / spacing - 1e-9).astype(np.int64)
    i1 = np.floor((hi + half - origin) / spacing + 1e-9).astype(np.int64)
    i0 = np.clip(i0, 0, dims - 1)
    i1 = np.clip(i1, 0, dims - 1)
    spans = np.maximum(i1 - i0 + 1, 0)
    counts = spans.prod(axis=1)
    keep = counts > 0
    in_extent = np.all(hi >= origin - half, axis=1) & np.all(
        lo <= origin + (dims - 1) * spacing + half, axis=1
    )
    keep &= in_extent
    face_ids = np.repeat(np.flatnonzero(keep), counts[keep])
    kcounts = counts[keep]
    local = np.arange(kcounts.sum()) - np.repeat(np.cumsum(kcounts) - kcounts, kcounts)
    sy = np.repeat(spans[keep][:, 1], kcounts)
    sz = np.repeat(spans[keep][:, 2], kcounts)
    iz = local % sz
    iy = (local // sz) % sy
    ix = local // (sz * sy)
    vox = np.stack(
        [
            np.repeat(i0[keep][:, 0], kcounts) + ix,
            np.repeat(i0[keep][:, 1], kcounts) + iy,
            np.repeat(i0[keep][:, 2], kcounts) + iz,
        ],
        axis=1,
    )
    centers = origin + vox * spacing
    hit = meshmod.triangles_overlap_boxes(tri[face_ids], centers, half)
    occupied = np.zeros(header.dims, dtype=bool)
    occupied[vox[hit, 0], vox[hit, 1], vox[hit, 2]] = True
    return occupied


@dataclass(frozen=True)
class ConditionSet:
    """The four co-registered conditioning grids (S_p, S_w, E, R)."""

    s_pial: VoxelGrid
    s_white: VoxelGrid
    edge: VoxelGrid
    ribbon: VoxelGrid

    def __post_init__(self):
        members = self.members()
        base = members[0].header
        for grid in members[1:]:
            if not base.same_geometry(grid.header):
                raise GeometryMismatchError("condition set members are not co-registered")
        for name in ("edge", "ribbon"):
            values = getattr(self, name).data
            if not np.all((values == 0.0) | (values == 1.0)):
                raise DataError(f"{name} map must be binary")

    def members(self) -> tuple[VoxelGrid, VoxelGrid, VoxelGrid, VoxelGrid]:
        return (self.s_pial, self.s_white, self.edge, self.ribbon)

    @property
    def header(self) -> GridHeader:
        return self.s_pial.header


def build_condition_set(
    mesh_pial: TriangleMesh,
    mesh_white: TriangleMesh,
    header: GridHeader,
    d_max: float | None = None,
) -> tuple[VoxelGrid, ConditionSet]:
    """Fused cortex SDF plus the full condition set for a surface pair."""
    s_pial = mesh_to_sdf(mesh_pial, header, d_max)
    s_white = mesh_to_sdf(mesh_white, header, d_max)
    cset = ConditionSet(
        s_pial=s_pial,
        s_white=s_white,
        edge=edge_map(mesh_pial, mesh_white, header),
        ribbon=ribbon_mask(s_pial, s_white),
    )
    return fuse_cortex_sdf(s_pial, s_white), cset


_MEMBER_FILES = {
    "s_pial": "s_pial.cvg",
    "s_white": "s_white.cvg",
    "edge": "edge.cvg",
    "ribbon": "ribbon.cvg",
}


def save_condition_set(directory, cset: ConditionSet, s_cortex: VoxelGrid | None = None):
    """Write member grids and a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = dict(_MEMBER_FILES)
    for name, filename in _MEMBER_FILES.items():
        volume.save_grid(getattr(cset, name), directory / filename)
    if s_cortex is not None:
        if not cset.header.same_geometry(s_cortex.header):
            raise GeometryMismatchError("fused SDF geometry differs from condition set")
        entries["s_cortex"] = "s_cortex.cvg"
        volume.save_grid(s_cortex, directory / "s_cortex.cvg")
    header = cset.header
    lines = ["condition-set 1"]
    lines.append("dims: {} {} {}".format(*header.dims))
    lines.append("spacing: " + " ".join(repr(s) for s in header.spacing))
    lines.append("origin: " + " ".join(repr(o) for o in header.origin))
    for name, filename in entries.items():
        lines.append(f"member {name}: {filename}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="ascii")


def load_condition_set(directory) -> tuple[ConditionSet, VoxelGrid | None]:
    """Read a condition set (and the fused SDF if present) from a manifest."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"{manifest}: manifest not found")
    lines = manifest.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "condition-set 1":
        raise DataError(f"{manifest}: unrecognized manifest header")
    members: dict[str, VoxelGrid] = {}
    declared: dict[str, str] = {}
    for line in lines[1:]:
        if line.startswith("member "):
            name, filename = line[len("member "):].split(": ", 1)
            declared[name] = filename
    missing = set(_MEMBER_FILES) - set(declared)
    if missing:
        raise DataError(f"{manifest}: missing members {sorted(missing)}")
    for name, filename in declared.items():
        members[name] = volume.load_grid(directory / filename)
    s_cortex = members.pop("s_cortex", None)
    cset = ConditionSet(**{name: members[name] for name in _MEMBER_FILES})
    if s_cortex is not None and not cset.header.same_geometry(s_cortex.header):
        raise GeometryMismatchError("fused SDF geometry differs from condition set")
    return cset, s_cortex


def _check_geometry(a: VoxelGrid, b: VoxelGrid):
    if not a.header.same_geometry(b.header):
        raise GeometryMismatchError(
            f"grid geometry mismatch: {a.dims}/{a.spacing}/{a.origin} "
            f"vs {b.dims}/{b.spacing}/{b.origin}"
        )
