"""Synthetic paired dataset: nested cortical surfaces + intensity volume.

Each phantom is a pair of smooth closed surfaces ("white" inside "pial")
built by radially perturbing an icosphere, plus a matched intensity
volume with tissue-like contrast, Gaussian noise, and an outer "skull"
shell whose geometry draws from a seed stream independent of the
surfaces. Everything is deterministic given (spec, item seed); datasets
are regenerable from their manifest files alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mesh as meshmod
from . import shapes, volume
from .errors import DataError
from .mesh import TriangleMesh
from .shapes import ConditionSet
from .volume import GridHeader, VoxelGrid

_SURFACE_KEY_WHITE = 0
_SURFACE_KEY_PIAL = 1
_SURFACE_KEY_SHRINK = 2
_NOISE_KEY = 0x4E
_DATASET_KEY = 0xD5
_MANIFEST_MAGIC = "phantom-manifest 1"

LABEL_CSF = 0
LABEL_WHITE = 1
LABEL_GRAY = 2
LABEL_SKULL = 3


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, perturbation, and intensity model of one dataset."""

    header: GridHeader
    r_white: float = 7.0
    r_pial: float = 10.0
    amplitude: float = 0.5
    pial_shrink_max: float = 0.8
    bump_count: int = 12
    bump_length: float = 0.35
    subdivisions: int = 3
    mu_white: float = 0.8
    mu_gray: float = 0.5
    mu_csf: float = 0.15
    mu_skull: float = 0.95
    noise_sigma: float = 0.03
    skull_radii: tuple[float, float] = (12.5, 14.5)
    skull_amplitude: float = 0.5
    surface_seed: int = 0
    skull_seed: int = 1
    d_max: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "skull_radii", tuple(float(r) for r in self.skull_radii))
        if self.r_white <= 0 or self.r_pial <= self.r_white:
            raise DataError("need 0 < r_white < r_pial")
        if self.amplitude < 0 or self.skull_amplitude < 0:
            raise DataError("perturbation amplitudes must be nonnegative")
        if self.pial_shrink_max < 0:
            raise DataError("pial_shrink_max must be nonnegative")
        # the per-item pial radius can be as small as r_pial - pial_shrink_max
        if self.r_pial - self.pial_shrink_max - self.r_white < 2.0 * self.amplitude + 0.2:
            raise DataError(
                "surfaces may cross: require r_pial - pial_shrink_max - r_white"
                " >= 2*amplitude + 0.2"
            )
        mus = (self.mu_white, self.mu_gray, self.mu_csf, self.mu_skull)
        for i, a in enumerate(mus):
            for b in mus[i + 1 :]:
                if abs(a - b) < 3.0 * self.noise_sigma:
                    raise DataError(
                        "tissue intensities must be pairwise distinct by >= 3 sigma"
                    )
        r_in, r_out = self.skull_radii
        if not r_in < r_out:
            raise DataError("skull shell radii must be increasing")
        if r_in - self.skull_amplitude < self.r_pial + self.amplitude + 0.2:
            raise DataError("skull shell may touch the pial surface")
        if self.bump_count < 1 or self.bump_length <= 0 or self.subdivisions < 0:
            raise DataError("invalid perturbation parameters")

    @property
    def center(self) -> np.ndarray:
        dims = np.asarray(self.header.dims, dtype=np.float64)
        spacing = np.asarray(self.header.spacing, dtype=np.float64)
        origin = np.asarray(self.header.origin, dtype=np.float64)
        return origin + (dims - 1.0) * spacing / 2.0

    @property
    def truncation(self) -> float:
        if self.d_max is not None:
            return self.d_max
        return shapes.default_truncation(self.header)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.header.dims),
            "spacing": list(self.header.spacing),
            "origin": list(self.header.origin),
            "r_white": self.r_white,
            "r_pial": self.r_pial,
            "amplitude": self.amplitude,
            "pial_shrink_max": self.pial_shrink_max,
            "bump_count": self.bump_count,
            "bump_length": self.bump_length,
            "subdivisions": self.subdivisions,
            "mu_white": self.mu_white,
            "mu_gray": self.mu_gray,
            "mu_csf": self.mu_csf,
            "mu_skull": self.mu_skull,
            "noise_sigma": self.noise_sigma,
            "skull_radii": list(self.skull_radii),
            "skull_amplitude": self.skull_amplitude,
            "surface_seed": self.surface_seed,
            "skull_seed": self.skull_seed,
            "d_max": self.d_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        header = GridHeader(
            dims=tuple(data["dims"]),
            spacing=tuple(data["spacing"]),
            origin=tuple(data["origin"]),
        )
        kwargs = {k: v for k, v in data.items() if k not in ("dims", "spacing", "origin")}
        kwargs["skull_radii"] = tuple(kwargs["skull_radii"])
        return cls(header=header, **kwargs)


def desk32() -> PhantomSpec:
    """Desk-scale default: 32-cubed grid at 1 mm."""
    header = GridHeader(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
    return PhantomSpec(header=header)


def ci16() -> PhantomSpec:
    """Coarse fallback: 16-cubed at 2 mm.

    The cortex shrinks a little relative to :func:`desk32` so that the
    CSF gap and the skull shell each stay wider than a voxel at this
    spacing; with the desk geometry the pial and skull isosurfaces merge.
    """
    header = GridHeader(dims=(16, 16, 16), spacing=(2.0, 2.0, 2.0), origin=(0.0, 0.0, 0.0))
    return PhantomSpec(
        header=header,
        r_white=6.0,
        r_pial=9.0,
        amplitude=0.4,
        pial_shrink_max=1.5,
        skull_radii=(12.5, 14.0),
        skull_amplitude=0.4,
    )


@dataclass(frozen=True)
class PhantomPair:
    """One phantom: surfaces, image, ground-truth shape grids, skull mask."""

    mesh_pial: TriangleMesh
    mesh_white: TriangleMesh
    image: VoxelGrid
    s_cortex: VoxelGrid
    conditions: ConditionSet
    skull_mask: VoxelGrid
    seed: int

    def __post_init__(self):
        for grid in (self.image, self.s_cortex, self.skull_mask):
            if grid.header.dims != self.conditions.header.dims:
                raise DataError("phantom grids must share geometry")


# ---------------------------------------------------------------------------
# Smooth radial perturbation fields


class RadialBumpField:
    """Smooth random field on the unit sphere, scaled to a peak amplitude.

    A sum of Gaussian-like lobes centered at random directions; the scale
    is normalized so the field's extreme over a fixed reference direction
    set equals exactly ``amplitude``.
    """

    def __init__(self, amplitude: float, count: int, length: float, rng, reference_dirs):
        self.dirs = _random_unit_vectors(rng, count)
        self.weights = rng.normal(size=count)
        self.length = length
        raw = self._raw(reference_dirs)
        peak = np.abs(raw).max()
        if amplitude == 0.0 or peak == 0.0:
            self.scale = 0.0
        else:
            self.scale = amplitude / peak

    def _raw(self, units) -> np.ndarray:
        units = np.asarray(units, dtype=np.float64)
        cos = units @ self.dirs.T  # (n, count)
        return np.exp((cos - 1.0) / self.length) @ self.weights

    def __call__(self, units) -> np.ndarray:
        return self.scale * self._raw(units)


def _random_unit_vectors(rng, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _perturbed_sphere(spec: PhantomSpec, base_radius: float, bumps) -> TriangleMesh:
    unit = meshmod.icosphere(1.0, (0.0, 0.0, 0.0), spec.subdivisions)
    dirs = unit.vertices / np.linalg.norm(unit.vertices, axis=1, keepdims=True)
    radii = base_radius + bumps(dirs)
    vertices = spec.center[None, :] + radii[:, None] * dirs
    return TriangleMesh(vertices=vertices, faces=unit.faces)


def _reference_dirs(spec: PhantomSpec) -> np.ndarray:
    unit = meshmod.icosphere(1.0, (0.0, 0.0, 0.0), spec.subdivisions)
    return unit.vertices / np.linalg.norm(unit.vertices, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Generation


def _surface_rng(spec: PhantomSpec, seed: int, which: int):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.surface_seed, spawn_key=(seed, which))
    )


def _skull_rng(spec: PhantomSpec, seed: int):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.skull_seed, spawn_key=(seed,))
    )


def phantom_meshes(spec: PhantomSpec, seed: int):
    """The deterministic (pial, white) surface pair for an item seed.

    The pial base radius shrinks per item by U(0, pial_shrink_max) so the
    dataset spans a range of cortical thicknesses; without that diversity
    a trained model learns thickness as a prior and cannot track thinned
    input shapes.
    """
    ref = _reference_dirs(spec)
    bump_w = RadialBumpField(
        spec.amplitude, spec.bump_count, spec.bump_length,
        _surface_rng(spec, seed, _SURFACE_KEY_WHITE), ref,
    )
    bump_p = RadialBumpField(
        spec.amplitude, spec.bump_count, spec.bump_length,
        _surface_rng(spec, seed, _SURFACE_KEY_PIAL), ref,
    )
    shrink = _surface_rng(spec, seed, _SURFACE_KEY_SHRINK).uniform(
        0.0, spec.pial_shrink_max
    )
    white = _perturbed_sphere(spec, spec.r_white, bump_w)
    pial = _perturbed_sphere(spec, spec.r_pial - shrink, bump_p)
    return pial, white


def skull_shell_mask(spec: PhantomSpec, seed: int) -> VoxelGrid:
    """Binary mask of the outer shell; geometry from the skull seed only."""
    ref = _reference_dirs(spec)
    bump = RadialBumpField(
        spec.skull_amplitude, spec.bump_count, spec.bump_length,
        _skull_rng(spec, seed), ref,
    )
    centers = volume.voxel_centers(spec.header).reshape(-1, 3)
    offsets = centers - spec.center[None, :]
    rho = np.linalg.norm(offsets, axis=1)
    units = np.zeros_like(offsets)
    nonzero = rho > 0
    units[nonzero] = offsets[nonzero] / rho[nonzero, None]
    units[~nonzero] = (0.0, 0.0, 1.0)
    wobble = bump(units)
    r_in, r_out = spec.skull_radii
    inside = (rho >= r_in + wobble) & (rho <= r_out + wobble)
    header = volume.GridHeader(
        dims=spec.header.dims,
        spacing=spec.header.spacing,
        origin=spec.header.origin,
        kind="binary-mask",
    )
    return volume.make_grid(header, inside.reshape(spec.header.dims))


def region_labels(conditions: ConditionSet, skull_mask: VoxelGrid) -> np.ndarray:
    """Integer region map: 0 csf, 1 white, 2 gray, 3 skull."""
    labels = np.full(conditions.header.dims, LABEL_CSF, dtype=np.int8)
    labels[conditions.s_white.data <= 0] = LABEL_WHITE
    labels[conditions.ribbon.data > 0] = LABEL_GRAY
    labels[skull_mask.data > 0] = LABEL_SKULL
    return labels


def generate_phantom(spec: PhantomSpec, seed: int) -> PhantomPair:
    """Deterministic phantom for (spec, seed): surfaces, grids, image."""
    pial, white = phantom_meshes(spec, seed)
    s_cortex, conditions = shapes.build_condition_set(
        pial, white, spec.header, d_max=spec.truncation
    )
    skull = skull_shell_mask(spec, seed)
    labels = region_labels(conditions, skull)
    values = np.choose(
        labels, [spec.mu_csf, spec.mu_white, spec.mu_gray, spec.mu_skull]
    )
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(_NOISE_KEY,))
        )
        values = values + spec.noise_sigma * noise_rng.standard_normal(values.shape)
    image = volume.make_grid(spec.header, values)
    return PhantomPair(
        mesh_pial=pial,
        mesh_white=white,
        image=image,
        s_cortex=s_cortex,
        conditions=conditions,
        skull_mask=skull,
        seed=seed,
    )


def nearest_tissue_labels(image: VoxelGrid, spec: PhantomSpec) -> np.ndarray:
    """Classify voxels by nearest tissue intensity (for consistency checks)."""
    mus = np.array([spec.mu_csf, spec.mu_white, spec.mu_gray, spec.mu_skull])
    dist = np.abs(image.data[..., None] - mus[None, None, None, :])
    return np.argmin(dist, axis=-1).astype(np.int8)


# ---------------------------------------------------------------------------
# Dataset generation and manifests


def split_counts(n: int, ratios=(60, 10, 20)) -> tuple[int, int, int]:
    """Largest-remainder split of n items into train/val/test."""
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    if any(c < 1 for c in counts):
        raise DataError(f"n={n} too small to split into nonempty train/val/test")
    return tuple(counts)


def _item_seeds(seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(_DATASET_KEY,))
    )
    seeds: list[int] = []
    used = set()
    while len(seeds) < n:
        candidate = int(rng.integers(0, 2**63 - 1))
        if candidate not in used:
            used.add(candidate)
            seeds.append(candidate)
    return seeds


def save_pair(directory, pair: PhantomPair):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meshmod.save_off(pair.mesh_pial, directory / "mesh_pial.off")
    meshmod.save_off(pair.mesh_white, directory / "mesh_white.off")
    volume.save_grid(pair.image, directory / "image.cvg")
    volume.save_grid(pair.skull_mask, directory / "skull.cvg")
    shapes.save_condition_set(directory, pair.conditions, s_cortex=pair.s_cortex)
    (directory / "item.txt").write_text(f"phantom-item 1\nseed: {pair.seed}\n")


def load_pair(directory) -> PhantomPair:
    directory = Path(directory)
    item_file = directory / "item.txt"
    if not item_file.exists():
        raise DataError(f"missing phantom item file {item_file}")
    lines = item_file.read_text().splitlines()
    if not lines or lines[0] != "phantom-item 1":
        raise DataError(f"unrecognized phantom item file {item_file}")
    seed = None
    for line in lines[1:]:
        if line.startswith("seed:"):
            seed = int(line.split(":", 1)[1])
    if seed is None:
        raise DataError(f"phantom item file {item_file} lacks a seed")
    conditions, s_cortex = shapes.load_condition_set(directory)
    if s_cortex is None:
        raise DataError(f"phantom item {directory} lacks the fused SDF")
    return PhantomPair(
        mesh_pial=meshmod.load_off(directory / "mesh_pial.off"),
        mesh_white=meshmod.load_off(directory / "mesh_white.off"),
        image=volume.load_grid(directory / "image.cvg"),
        s_cortex=s_cortex,
        conditions=conditions,
        skull_mask=volume.load_grid(directory / "skull.cvg"),
        seed=seed,
    )


def _write_manifest(path, spec: PhantomSpec, items):
    lines = [_MANIFEST_MAGIC]
    lines.append("spec: " + json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")))
    for item_id, seed, relpath in items:
        lines.append(f"{item_id} {seed} {relpath}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path):
    """Parse a split manifest into (spec, [(item_id, seed, relpath), ...])."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_MAGIC:
        raise DataError(f"unrecognized manifest {path}")
    if len(lines) < 2 or not lines[1].startswith("spec: "):
        raise DataError(f"manifest {path} lacks a spec line")
    spec = PhantomSpec.from_dict(json.loads(lines[1][len("spec: ") :]))
    items = []
    for line in lines[2:]:
        if not line.strip():
            continue
        item_id, seed, relpath = line.split()
        items.append((item_id, int(seed), relpath))
    return spec, items


def generate_dataset(spec: PhantomSpec, n: int, seed: int, out_dir, ratios=(60, 10, 20)) -> dict:
    """Write n phantoms plus disjoint train/val/test manifests.

    Returns {"train": [...], "val": [...], "test": [...]} of manifest rows.
    """
    if n < 3:
        raise DataError(f"need at least 3 items to split, got {n}")
    counts = split_counts(n, ratios)
    seeds = _item_seeds(seed, n)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, item_seed in enumerate(seeds):
        item_id = f"item-{index:04d}"
        relpath = f"items/{item_id}"
        pair = generate_phantom(spec, item_seed)
        save_pair(out_dir / relpath, pair)
        rows.append((item_id, item_seed, relpath))
    splits = {
        "train": rows[: counts[0]],
        "val": rows[counts[0] : counts[0] + counts[1]],
        "test": rows[counts[0] + counts[1] :],
    }
    for name, items in splits.items():
        _write_manifest(out_dir / f"manifest-{name}.txt", spec, items)
    return splits


def regenerate_from_manifest(manifest_path, out_dir):
    """Rebuild every item listed in a manifest under ``out_dir``."""
    spec, items = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    for item_id, seed, relpath in items:
        pair = generate_phantom(spec, seed)
        save_pair(out_dir / relpath, pair)
    return spec, items


def load_split(manifest_path, root=None) -> list[PhantomPair]:
    """Load every phantom referenced by a manifest."""
    spec, items = load_manifest(manifest_path)
    root = Path(manifest_path).parent if root is None else Path(root)
    return [load_pair(root / relpath) for _, _, relpath in items]
