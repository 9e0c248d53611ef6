"""Evaluation: surface distances, image quality, variability, thickness.

Surface accuracy uses the average symmetric surface distance (ASSD) over
area-uniform random samples; each mesh's sample set is keyed by a hash
of its own geometry so swapping the argument order reuses the exact same
point sets and symmetry holds to the bit. Surfaces are recovered from
volumes by threshold isosurfacing after a light Gaussian pre-smooth,
keeping the mesh component nearest the volume center (the phantom's
outer shell also crosses both tissue thresholds and must be ignored).
"""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes

from . import mesh as meshmod
from . import shapes, volume
from .errors import DataError, GeometryMismatchError
from .mesh import TriangleMesh
from .volume import VoxelGrid

_DEFAULT_ASSD_POINTS = 100_000
_SSIM_WINDOW = 7
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
PSNR_INFINITE = math.inf


# ---------------------------------------------------------------------------
# ASSD


def _mesh_hash(mesh: TriangleMesh) -> int:
    h = zlib.crc32(np.ascontiguousarray(mesh.vertices).tobytes())
    return zlib.crc32(np.ascontiguousarray(mesh.faces).tobytes(), h)


def _mesh_sample_seed(seed: int, mesh: TriangleMesh) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_mesh_hash(mesh),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def assd(
    mesh_pred: TriangleMesh,
    mesh_ref: TriangleMesh,
    n_points: int = _DEFAULT_ASSD_POINTS,
    seed: int = 0,
) -> float:
    """Average symmetric surface distance in mm over sampled points.

    Each mesh contributes ``n_points`` samples; the per-mesh RNG stream
    depends only on (seed, mesh content), making the metric exactly
    symmetric in its arguments.
    """
    if n_points < 1:
        raise DataError("need at least one sample point per mesh")
    if mesh_pred.num_faces == 0 or mesh_ref.num_faces == 0:
        raise DataError("cannot evaluate an empty mesh")
    pts_pred = meshmod.sample_surface_points(
        mesh_pred, n_points, seed=_mesh_sample_seed(seed, mesh_pred)
    )
    pts_ref = meshmod.sample_surface_points(
        mesh_ref, n_points, seed=_mesh_sample_seed(seed, mesh_ref)
    )
    d_pred, _ = meshmod.distances_to_mesh(pts_pred, meshmod.build_index(mesh_ref))
    d_ref, _ = meshmod.distances_to_mesh(pts_ref, meshmod.build_index(mesh_pred))
    return float((d_pred.sum() + d_ref.sum()) / (len(d_pred) + len(d_ref)))


# ---------------------------------------------------------------------------
# Image quality


def psnr(a: VoxelGrid, b: VoxelGrid, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; infinite when the grids agree.

    ``b`` is the reference; by default ``peak`` is its dynamic range.
    """
    if not a.header.same_geometry(b.header):
        raise GeometryMismatchError("psnr requires co-registered grids")
    if peak is None:
        peak = float(b.data.max() - b.data.min())
    if peak <= 0:
        raise DataError("peak must be positive (constant reference grid?)")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(peak * peak / mse)


def ssim3d(a: VoxelGrid, b: VoxelGrid, dynamic_range: float | None = None) -> float:
    """Mean local SSIM with a uniform 7-cubed window.

    Follows the standard windowed formulation with sample-normalized
    (co)variances; border voxels without a full window are cropped from
    the mean.
    """
    if not a.header.same_geometry(b.header):
        raise GeometryMismatchError("ssim requires co-registered grids")
    if min(a.header.dims) < _SSIM_WINDOW:
        raise DataError(
            f"grid dims {a.header.dims} smaller than the {_SSIM_WINDOW}-wide window"
        )
    if dynamic_range is None:
        dynamic_range = float(b.data.max() - b.data.min())
    if dynamic_range <= 0:
        raise DataError("dynamic range must be positive")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    n = _SSIM_WINDOW**3
    cov_norm = n / (n - 1)

    def win_mean(v):
        return ndimage.uniform_filter(v, size=_SSIM_WINDOW)

    ux, uy = win_mean(x), win_mean(y)
    uxx, uyy, uxy = win_mean(x * x), win_mean(y * y), win_mean(x * y)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2
    ssim_map = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    pad = (_SSIM_WINDOW - 1) // 2
    core = ssim_map[pad:-pad, pad:-pad, pad:-pad]
    return float(core.mean())


# ---------------------------------------------------------------------------
# Variability maps


@dataclass(frozen=True)
class VariabilityMaps:
    variance: VoxelGrid
    mean_abs_diff: VoxelGrid
    projections: tuple[np.ndarray, np.ndarray, np.ndarray]


def variability_maps(samples, reference: VoxelGrid) -> VariabilityMaps:
    """Per-voxel spread across repeated samples, plus axis-mean summaries.

    Variance is the unbiased (n-1) estimator across samples; the three
    2D projections average the variance grid along each axis.
    """
    if len(samples) < 2:
        raise DataError("need at least 2 samples for variability maps")
    for s in samples:
        if not s.header.same_geometry(reference.header):
            raise GeometryMismatchError("variability samples must be co-registered")
    stack = np.stack([s.data.astype(np.float64) for s in samples])
    variance = stack.var(axis=0, ddof=1)
    mad = np.abs(stack - reference.data.astype(np.float64)[None]).mean(axis=0)
    projections = tuple(variance.mean(axis=axis) for axis in range(3))
    return VariabilityMaps(
        variance=volume.grid_like(reference, variance, kind="intensity"),
        mean_abs_diff=volume.grid_like(reference, mad, kind="intensity"),
        projections=projections,
    )


def write_pgm(array2d: np.ndarray, path):
    """8-bit binary PGM of a 2D array, min-max scaled (deterministic)."""
    arr = np.asarray(array2d, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"PGM output needs a 2D array, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.rint((arr - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    body = scaled.astype(np.uint8).tobytes()
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# Isosurface extraction and surface reconstruction


def isosurface(grid: VoxelGrid, level: float) -> TriangleMesh:
    """Marching-cubes triangulation of a level set, in mm coordinates.

    Orientation: normals point toward increasing values, so extracting
    level 0 from an SDF yields outward normals. A level outside the
    grid's value range yields an empty mesh with a warning.
    """
    data = grid.data
    if not data.min() < level < data.max():
        warnings.warn(
            f"isosurface level {level} outside grid value range "
            f"[{data.min()}, {data.max()}]; returning an empty mesh"
        )
        return TriangleMesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), np.int64))
    verts, faces, _, _ = marching_cubes(
        np.asarray(data, dtype=np.float64),
        level=level,
        spacing=tuple(float(s) for s in grid.header.spacing),
        gradient_direction="descent",
    )
    verts = verts + np.asarray(grid.header.origin, dtype=np.float64)[None, :]
    return TriangleMesh(vertices=verts, faces=faces.astype(np.int64))


def mesh_components(mesh: TriangleMesh) -> list[TriangleMesh]:
    """Split a mesh into vertex-connected components."""
    if mesh.num_faces == 0:
        return []
    parent = np.arange(mesh.num_vertices)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b, c in mesh.faces:
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[rc] = ra
    roots = np.array([find(i) for i in range(mesh.num_vertices)])
    components = []
    for root in np.unique(roots[mesh.faces[:, 0]]):
        face_mask = roots[mesh.faces[:, 0]] == root
        used = np.unique(mesh.faces[face_mask])
        remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        components.append(
            TriangleMesh(
                vertices=mesh.vertices[used], faces=remap[mesh.faces[face_mask]]
            )
        )
    return components


def _innermost_component(mesh: TriangleMesh, center, min_faces: int = 8) -> TriangleMesh:
    """The component whose vertices sit nearest ``center``.

    Tiny speck components (fewer than ``min_faces`` faces) are ignored
    unless nothing else remains.
    """
    components = mesh_components(mesh)
    if not components:
        return mesh
    big = [c for c in components if c.num_faces >= min_faces]
    if not big:
        big = components
    center = np.asarray(center, dtype=np.float64)
    radii = [
        float(np.linalg.norm(c.vertices - center[None, :], axis=1).mean()) for c in big
    ]
    return big[int(np.argmin(radii))]


def grid_center(header) -> np.ndarray:
    dims = np.asarray(header.dims, dtype=np.float64)
    spacing = np.asarray(header.spacing, dtype=np.float64)
    origin = np.asarray(header.origin, dtype=np.float64)
    return origin + (dims - 1.0) * spacing / 2.0


def reconstruct_surfaces(
    image: VoxelGrid,
    thresholds: tuple[float, float] = (0.65, 0.325),
    smooth_sigma: float = 0.5,
    min_component_faces: int = 8,
) -> tuple[TriangleMesh, TriangleMesh]:
    """(white, pial) surfaces from an intensity volume by thresholding.

    The volume is Gaussian-smoothed by ``smooth_sigma`` voxels first;
    the white surface is the isosurface at the white/gray midpoint
    threshold and the pial at the gray/csf midpoint. For each threshold
    the component nearest the volume center is kept.
    """
    tau_wg, tau_gc = thresholds
    if not tau_wg > tau_gc:
        raise DataError(
            f"white/gray threshold {tau_wg} must exceed gray/csf threshold {tau_gc}"
        )
    smoothed = ndimage.gaussian_filter(
        image.data.astype(np.float64), sigma=smooth_sigma
    )
    field = volume.grid_like(image, smoothed, kind="intensity")
    center = grid_center(image.header)
    mesh_w = _innermost_component(
        isosurface(field, tau_wg), center, min_component_faces
    )
    mesh_p = _innermost_component(
        isosurface(field, tau_gc), center, min_component_faces
    )
    return mesh_w, mesh_p


# ---------------------------------------------------------------------------
# Cortical thickness


@dataclass(frozen=True)
class ThicknessResult:
    per_vertex: np.ndarray  # on the pial mesh, mm
    pial_to_white: float
    white_to_pial: float

    @property
    def thickness(self) -> float:
        return 0.5 * (self.pial_to_white + self.white_to_pial)


def _closest_points(points, mesh: TriangleMesh, index) -> np.ndarray:
    """Exact nearest surface points for each query point."""
    dists, faces = meshmod.distances_to_mesh(points, index)
    a, b, c = mesh.face_corners()
    return meshmod.closest_points_on_triangles(
        np.asarray(points, dtype=np.float64), a[faces], b[faces], c[faces]
    )


def cortical_thickness(mesh_white: TriangleMesh, mesh_pial: TriangleMesh) -> ThicknessResult:
    """Symmetric bidirectional vertex-to-surface thickness estimate.

    For each pial vertex: distance to the white surface, averaged with
    the distance from its nearest white-surface point back to the pial
    surface. The scalar summary averages the two directional means.
    """
    if mesh_white.num_faces == 0 or mesh_pial.num_faces == 0:
        raise DataError("cannot measure thickness with an empty mesh")
    index_w = meshmod.build_index(mesh_white)
    index_p = meshmod.build_index(mesh_pial)
    d_pw, _ = meshmod.distances_to_mesh(mesh_pial.vertices, index_w)
    d_wp, _ = meshmod.distances_to_mesh(mesh_white.vertices, index_p)
    nearest_on_white = _closest_points(mesh_pial.vertices, mesh_white, index_w)
    back, _ = meshmod.distances_to_mesh(nearest_on_white, index_p)
    per_vertex = 0.5 * (d_pw + back)
    return ThicknessResult(
        per_vertex=per_vertex,
        pial_to_white=float(d_pw.mean()),
        white_to_pial=float(d_wp.mean()),
    )


# ---------------------------------------------------------------------------
# Metric reports


@dataclass
class MetricReport:
    records: list

    FIELDS = ("item", "assd_white", "assd_pial", "psnr", "ssim")

    def aggregate(self) -> dict:
        """Mean and SD per metric, recomputed from the records."""
        out = {}
        for key in self.FIELDS[1:]:
            values = np.array([float(r[key]) for r in self.records], dtype=np.float64)
            finite = values[np.isfinite(values)]
            if len(finite) == 0:
                out[key] = {"mean": math.inf, "sd": 0.0}
            else:
                out[key] = {
                    "mean": float(finite.mean()),
                    "sd": float(finite.std(ddof=1)) if len(finite) > 1 else 0.0,
                }
        return out

    def to_csv(self, path):
        lines = [",".join(self.FIELDS)]
        for r in self.records:
            lines.append(
                ",".join([str(r["item"])] + [repr(float(r[k])) for k in self.FIELDS[1:]])
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def to_json(self, path):
        payload = {"records": self.records, "aggregate": self.aggregate()}
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, indent=2, default=float) + "\n"
        )


# ---------------------------------------------------------------------------
# Atrophy recovery


@dataclass(frozen=True)
class AtrophyRow:
    offset: float  # requested inward pial offset, mm
    introduced: float  # measured thickness change of the deformed meshes, mm
    recovered: float  # thickness change seen through sample + reconstruct, mm


@dataclass(frozen=True)
class AtrophyResult:
    rows: tuple
    baseline_thickness: float  # mean reconstructed thickness, unmodified phantom
    noise_floor: float  # largest single-run deviation from that mean

    def to_csv(self, path):
        lines = ["offset,introduced,recovered"]
        for row in self.rows:
            lines.append(f"{row.offset!r},{row.introduced!r},{row.recovered!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def atrophy_experiment(
    sample_fn,
    mesh_pial: TriangleMesh,
    mesh_white: TriangleMesh,
    header,
    offsets,
    d_max: float | None = None,
    thresholds: tuple[float, float] = (0.65, 0.325),
    seed: int = 0,
    floor_runs: int = 3,
    min_gap: float = 0.2,
) -> AtrophyResult:
    """Introduced-vs-recovered cortical thinning table.

    For each offset b the pial surface moves inward by b along its
    normals (clamped so it never comes within ``min_gap`` of the white
    surface), the shape grids are rebuilt, ``sample_fn(s_cortex,
    conditions, seed)`` generates a volume, surfaces are reconstructed,
    and the thickness change relative to an unmodified baseline is
    recorded. The baseline is the mean thickness over 1 + ``floor_runs``
    unmodified runs with fresh seeds; the noise floor is the largest
    single-run deviation from that mean.
    """
    offsets = [float(b) for b in offsets]
    if any(b < 0 for b in offsets):
        raise DataError("thinning offsets must be nonnegative")

    def run(pial_mesh, run_seed):
        s_c, cset = shapes.build_condition_set(pial_mesh, mesh_white, header, d_max)
        generated = sample_fn(s_c, cset, run_seed)
        mesh_w_rec, mesh_p_rec = reconstruct_surfaces(generated, thresholds)
        return cortical_thickness(mesh_w_rec, mesh_p_rec).thickness

    seeds = np.random.SeedSequence(entropy=int(seed)).generate_state(
        1 + floor_runs + len(offsets), dtype=np.uint64
    )
    pool = [run(mesh_pial, int(seeds[i])) for i in range(1 + floor_runs)]
    baseline = float(np.mean(pool))
    noise_floor = float(max(abs(t - baseline) for t in pool))

    base_thickness = cortical_thickness(mesh_white, mesh_pial).thickness
    rows = []
    for i, b in enumerate(offsets):
        if b == 0.0:
            deformed = mesh_pial
        else:
            deformed = meshmod.offset_along_normals(
                mesh_pial, -b, floor=mesh_white, min_gap=min_gap
            )
        introduced = base_thickness - cortical_thickness(mesh_white, deformed).thickness
        thickness = run(deformed, int(seeds[1 + floor_runs + i]))
        rows.append(
            AtrophyRow(offset=b, introduced=float(introduced), recovered=float(baseline - thickness))
        )
    return AtrophyResult(
        rows=tuple(rows), baseline_thickness=baseline, noise_floor=float(noise_floor)
    )
