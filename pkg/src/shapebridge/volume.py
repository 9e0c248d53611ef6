"""Dense 3D scalar grids with physical metadata and bit-exact file I/O.

A grid stores float32 voxel values at physical positions ``origin + index *
spacing`` (values live at voxel centers, world axes aligned with index axes).
The on-disk ``.cvg`` container is a small ASCII header followed by a raw
little-endian float32 payload, written x-fastest, so that save/load round
trips are bit-exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, GeometryMismatchError, NumericError

FORMAT_MAGIC = "CVG"
FORMAT_VERSION = 1
VALUE_KINDS = ("intensity", "sdf", "binary-mask")

_OFFSET_WIDTH = 8  # fixed-width payload-offset field keeps the header length stable


@dataclass(frozen=True)
class GridHeader:
    """Geometry and value-kind metadata of a grid, without the payload."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    kind: str = "intensity"
    version: int = FORMAT_VERSION
    norm_offset: float | None = None
    norm_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise DataError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be strictly positive, got {self.spacing}")
        if len(self.origin) != 3:
            raise DataError(f"origin must have three components, got {self.origin}")
        if self.kind not in VALUE_KINDS:
            raise DataError(f"unknown value kind {self.kind!r}, expected one of {VALUE_KINDS}")
        if (self.norm_offset is None) != (self.norm_scale is None):
            raise DataError("norm-offset and norm-scale must be given together")

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def same_geometry(self, other: "GridHeader") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass(frozen=True)
class VoxelGrid:
    """A dense float32 scalar field over an axis-aligned voxel lattice.

    ``data`` has shape ``dims`` and is indexed ``data[i, j, k]`` for the voxel
    whose center is ``origin + (i, j, k) * spacing``. Instances are immutable:
    the array is marked read-only and all operations return new grids.
    """

    header: GridHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != self.header.dims:
            raise DataError(
                f"data shape {arr.shape} does not match dims {self.header.dims}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.header.origin

    @property
    def kind(self) -> str:
        return self.header.kind


def make_grid(header: GridHeader, data) -> VoxelGrid:
    return VoxelGrid(header=header, data=data)


def grid_like(grid: VoxelGrid, data, kind: str | None = None) -> VoxelGrid:
    """New grid sharing geometry with ``grid`` but holding ``data``."""
    header = grid.header if kind is None else replace(grid.header, kind=kind)
    return VoxelGrid(header=header, data=data)


def zeros(header: GridHeader) -> VoxelGrid:
    return VoxelGrid(header=header, data=np.zeros(header.dims, dtype=np.float32))


def voxel_center(grid: VoxelGrid | GridHeader, index) -> np.ndarray:
    """Physical position (mm) of the voxel center at ``index``."""
    header = grid if isinstance(grid, GridHeader) else grid.header
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (3,):
        raise DataError(f"index must have three components, got {index}")
    if np.any(idx < 0) or np.any(idx >= np.array(header.dims)):
        raise DataError(f"index {tuple(idx)} out of range for dims {header.dims}")
    return np.asarray(header.origin, dtype=np.float64) + idx * np.asarray(
        header.spacing, dtype=np.float64
    )


def voxel_centers(header: GridHeader) -> np.ndarray:
    """All voxel centers as an array of shape ``dims + (3,)`` in mm."""
    axes = [
        header.origin[a] + np.arange(header.dims[a], dtype=np.float64) * header.spacing[a]
        for a in range(3)
    ]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X, Y, Z], axis=-1)


def _require_same_geometry(a: VoxelGrid, b: VoxelGrid):
    if not a.header.same_geometry(b.header):
        raise GeometryMismatchError(
            f"grid geometry mismatch: {a.dims}/{a.spacing}/{a.origin} "
            f"vs {b.dims}/{b.spacing}/{b.origin}"
        )


def add(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    _require_same_geometry(a, b)
    return grid_like(a, a.data + b.data)


def sub(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    _require_same_geometry(a, b)
    return grid_like(a, a.data - b.data)


def scale(a: VoxelGrid, factor: float) -> VoxelGrid:
    return grid_like(a, (a.data.astype(np.float64) * float(factor)).astype(np.float32))


def clamp(a: VoxelGrid, lo: float, hi: float) -> VoxelGrid:
    if not lo <= hi:
        raise DataError(f"clamp bounds out of order: {lo} > {hi}")
    return grid_like(a, np.clip(a.data, np.float32(lo), np.float32(hi)))


def abs_diff(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    _require_same_geometry(a, b)
    return grid_like(a, np.abs(a.data - b.data))


def normalize_minmax(grid: VoxelGrid) -> VoxelGrid:
    """Scale values affinely to [-1, 1], recording the map in the header.

    Constant grids map to zero with unit scale so the map stays invertible.
    """
    lo = float(grid.data.min())
    hi = float(grid.data.max())
    offset = (hi + lo) / 2.0
    half = (hi - lo) / 2.0
    if half == 0.0:
        half = 1.0
    data = ((grid.data.astype(np.float64) - offset) / half).astype(np.float32)
    header = replace(grid.header, norm_offset=offset, norm_scale=half)
    return VoxelGrid(header=header, data=data)


def normalize_fixed(grid: VoxelGrid, offset: float, scaling: float) -> VoxelGrid:
    """Apply ``(value - offset) / scaling`` and record the map in the header."""
    if scaling == 0.0:
        raise NumericError("normalization scale must be nonzero")
    data = ((grid.data.astype(np.float64) - offset) / scaling).astype(np.float32)
    header = replace(grid.header, norm_offset=float(offset), norm_scale=float(scaling))
    return VoxelGrid(header=header, data=data)


def denormalize(grid: VoxelGrid) -> VoxelGrid:
    """Invert the normalization recorded in the header."""
    if grid.header.norm_offset is None:
        raise DataError("grid carries no normalization metadata")
    data = (
        grid.data.astype(np.float64) * grid.header.norm_scale + grid.header.norm_offset
    ).astype(np.float32)
    header = replace(grid.header, norm_offset=None, norm_scale=None)
    return VoxelGrid(header=header, data=data)


def resample_trilinear(
    grid: VoxelGrid,
    new_dims,
    new_spacing,
    new_origin,
    kind: str | None = None,
) -> VoxelGrid:
    """Resample onto a new lattice with trilinear interpolation.

    Each output voxel takes the interpolated source value at its physical
    center; sample positions outside the source extent clamp to the edge.
    """
    target = GridHeader(
        dims=tuple(new_dims),
        spacing=tuple(new_spacing),
        origin=tuple(new_origin),
        kind=grid.kind if kind is None else kind,
    )
    pts = voxel_centers(target).reshape(-1, 3)
    values = sample_trilinear(grid, pts)
    return VoxelGrid(header=target, data=values.reshape(target.dims))


def sample_trilinear(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the grid at physical points (n, 3) -> (n,).

    Coordinates are clamped to the grid extent, so out-of-extent points take
    the nearest-edge value.
    """
    pts = np.asarray(points, dtype=np.float64)
    frac = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    nx, ny, nz = grid.dims
    frac = np.clip(frac, 0.0, np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64))
    i0 = np.minimum(np.floor(frac).astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    i0 = np.maximum(i0, 0)
    w = frac - i0
    d = grid.data.astype(np.float64)
    if min(nx, ny, nz) == 1:
        # degenerate axes: fall back to nearest along that axis
        i0 = np.minimum(np.floor(frac).astype(np.int64), np.array([nx - 1, ny - 1, nz - 1]))
        w = np.clip(frac - i0, 0.0, 1.0)
        i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1]))
    else:
        i1 = i0 + 1
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    c000 = d[x0, y0, z0]
    c100 = d[x1, y0, z0]
    c010 = d[x0, y1, z0]
    c110 = d[x1, y1, z0]
    c001 = d[x0, y0, z1]
    c101 = d[x1, y0, z1]
    c011 = d[x0, y1, z1]
    c111 = d[x1, y1, z1]
    c00 = c000 * (1 - wx) + c100 * wx
    c10 = c010 * (1 - wx) + c110 * wx
    c01 = c001 * (1 - wx) + c101 * wx
    c11 = c011 * (1 - wx) + c111 * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    return (c0 * (1 - wz) + c1 * wz).astype(np.float32)


# ---------------------------------------------------------------------------
# .cvg container


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _header_text(header: GridHeader) -> str:
    lines = [
        f"{FORMAT_MAGIC} {header.version}",
        "dims: {} {} {}".format(*header.dims),
        "spacing: " + _format_floats(header.spacing),
        "origin: " + _format_floats(header.origin),
        f"kind: {header.kind}",
        "endian: little",
    ]
    if header.norm_offset is not None:
        lines.append("norm-offset: " + repr(float(header.norm_offset)))
        lines.append("norm-scale: " + repr(float(header.norm_scale)))
    return "\n".join(lines) + "\n"


def save_grid(grid: VoxelGrid, path):
    """Write the grid to ``path`` in the ``.cvg`` container format."""
    head = _header_text(grid.header)
    probe = f"payload-offset: {0:0{_OFFSET_WIDTH}d}\n\n"
    offset = len(head.encode("ascii")) + len(probe.encode("ascii"))
    head += f"payload-offset: {offset:0{_OFFSET_WIDTH}d}\n\n"
    payload = np.asfortranarray(grid.data.astype("<f4")).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(payload)


def grid_bytes(grid: VoxelGrid) -> bytes:
    """Serialized ``.cvg`` bytes (useful for hashing and tests)."""
    buf = io.BytesIO()
    head = _header_text(grid.header)
    probe = f"payload-offset: {0:0{_OFFSET_WIDTH}d}\n\n"
    offset = len(head.encode("ascii")) + len(probe.encode("ascii"))
    head += f"payload-offset: {offset:0{_OFFSET_WIDTH}d}\n\n"
    buf.write(head.encode("ascii"))
    buf.write(np.asfortranarray(grid.data.astype("<f4")).tobytes(order="F"))
    return buf.getvalue()


def load_grid(path) -> VoxelGrid:
    """Read a ``.cvg`` file, validating header and payload length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: not a .cvg file (no header)")
    first = blob[:newline].decode("ascii", errors="replace").split()
    if len(first) != 2 or first[0] != FORMAT_MAGIC:
        raise DataError(f"{path}: bad magic {first!r}")
    if int(first[1]) != FORMAT_VERSION:
        raise DataError(
            f"{path}: version mismatch (file {first[1]}, supported {FORMAT_VERSION})"
        )
    fields = {}
    pos = newline + 1
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise DataError(f"{path}: unterminated header")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "":
            break
        if ": " not in line:
            raise DataError(f"{path}: malformed header line {line!r}")
        key, value = line.split(": ", 1)
        fields[key] = value
    required = ("dims", "spacing", "origin", "kind", "endian", "payload-offset")
    for key in required:
        if key not in fields:
            raise DataError(f"{path}: missing header field {key!r}")
    if fields["endian"] != "little":
        raise DataError(f"{path}: unsupported endianness {fields['endian']!r}")
    dims = tuple(int(v) for v in fields["dims"].split())
    header = GridHeader(
        dims=dims,
        spacing=tuple(float(v) for v in fields["spacing"].split()),
        origin=tuple(float(v) for v in fields["origin"].split()),
        kind=fields["kind"],
        norm_offset=float(fields["norm-offset"]) if "norm-offset" in fields else None,
        norm_scale=float(fields["norm-scale"]) if "norm-scale" in fields else None,
    )
    offset = int(fields["payload-offset"])
    if offset != pos:
        raise DataError(f"{path}: payload-offset {offset} disagrees with header end {pos}")
    payload = blob[offset:]
    expected = header.voxel_count * 4
    if len(payload) < expected:
        raise DataError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise DataError(
            f"{path}: payload/dims mismatch ({len(payload)} bytes, expected {expected})"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return VoxelGrid(header=header, data=data)
