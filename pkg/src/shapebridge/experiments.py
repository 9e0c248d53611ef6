"""Experiment drivers: datasets to trained models to generated volumes.

Bridges the data/model modules for the end-to-end workflow: phantoms are
normalized into training examples (intensities min-max scaled to [-1, 1]
per volume, SDFs divided by the truncation distance), trainers are built
for either the shape-anchored bridge process or the Gaussian-endpoint
ablation, and generated volumes are mapped back to raw intensity so the
reconstruction thresholds keep their tissue meaning.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bridge, evaluate, phantom, volume
from . import denoiser as denoisermod
from .denoiser import DenoiserConfig, DenoiserModel, build_model
from .errors import DataError
from .gaussian import GaussianProcess
from .shapes import ConditionSet
from .training import (
    BridgeProcess,
    Trainer,
    TrainerConfig,
    TrainingExample,
    example_from_grids,
)
from .volume import VoxelGrid

PROCESS_KINDS = ("bridge", "gaussian")


# ---------------------------------------------------------------------------
# Normalization plumbing


def condition_grids(
    config: DenoiserConfig, s_cortex: VoxelGrid, cset: ConditionSet, d_max: float
) -> dict:
    """Normalized condition grids for the config's channels, by name."""
    if d_max <= 0:
        raise DataError(f"truncation distance must be positive, got {d_max}")
    out = {}
    for name in config.condition_channels:
        if name == "s_cortex":
            out[name] = volume.normalize_fixed(s_cortex, 0.0, d_max)
        elif name in ("s_pial", "s_white"):
            out[name] = volume.normalize_fixed(getattr(cset, name), 0.0, d_max)
        elif name in ("edge", "ribbon"):
            out[name] = getattr(cset, name)  # binary masks stay as-is
        else:  # unreachable while config validates channel names
            raise DataError(f"unknown condition channel {name!r}")
    return out


def training_example(
    config: DenoiserConfig, pair: phantom.PhantomPair, d_max: float
) -> TrainingExample:
    """Normalized (x0, endpoint, conditions) for one phantom."""
    x0 = volume.normalize_minmax(pair.image)
    endpoint = volume.normalize_fixed(pair.s_cortex, 0.0, d_max)
    conds = condition_grids(config, pair.s_cortex, pair.conditions, d_max)
    return example_from_grids(config, x0, endpoint, conds)


def examples_from_manifest(config: DenoiserConfig, manifest_path) -> list:
    """Load a dataset split and normalize it into training examples."""
    spec, _ = phantom.load_manifest(manifest_path)
    pairs = phantom.load_split(manifest_path)
    return [training_example(config, pair, spec.truncation) for pair in pairs]


def as_intensity(generated: VoxelGrid, reference_image: VoxelGrid) -> VoxelGrid:
    """Map a [-1, 1]-scale generated volume back to raw intensity.

    Uses the reference image's own min-max range as the de-normalization
    map, so generated and reference volumes share an intensity scale.
    """
    lo = float(reference_image.data.min())
    hi = float(reference_image.data.max())
    half = (hi - lo) / 2.0 or 1.0
    header = replace(
        reference_image.header,
        kind="intensity",
        norm_offset=(hi + lo) / 2.0,
        norm_scale=half,
    )
    return volume.denormalize(VoxelGrid(header=header, data=generated.data))


# ---------------------------------------------------------------------------
# Trainer construction


def make_process(kind: str, steps: int):
    if kind == "bridge":
        return BridgeProcess(bridge.build_schedule(steps))
    if kind == "gaussian":
        return GaussianProcess(steps)
    raise DataError(f"unknown process kind {kind!r}, expected one of {PROCESS_KINDS}")


def build_trainer(
    kind: str,
    steps: int,
    model_config: DenoiserConfig,
    trainer_config: TrainerConfig,
    model_seed: int = 0,
) -> Trainer:
    model = build_model(model_config, seed=model_seed)
    return Trainer(model, make_process(kind, steps), trainer_config)


def train_from_manifests(
    trainer: Trainer,
    train_manifest,
    val_manifest,
    epochs: int,
    run_dir=None,
) -> dict:
    """Train on manifest-described splits; checkpoints/log under run_dir."""
    config = trainer.model.config
    train_set = examples_from_manifest(config, train_manifest)
    val_set = examples_from_manifest(config, val_manifest)
    checkpoint_dir = log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_dir = run_dir
        log_path = run_dir / "log.csv"
    return trainer.train(
        train_set, val_set, epochs, checkpoint_dir=checkpoint_dir, log_path=log_path
    )


# ---------------------------------------------------------------------------
# Sampling


def grid_denoiser(model: DenoiserModel):
    """Adapt a trained model to the grid-level sampler callback."""

    def denoise(x_t, conditions, t):
        return denoisermod.forward(model, x_t, conditions, t)

    return denoise


def sample_volume(
    model: DenoiserModel,
    kind: str,
    steps: int,
    plan: bridge.SamplingPlan,
    s_cortex: VoxelGrid,
    cset: ConditionSet,
    d_max: float,
    reference_image: VoxelGrid,
) -> VoxelGrid:
    """One generated volume in raw intensity units.

    For the bridge process the chain starts at the normalized fused SDF;
    for the Gaussian ablation it starts at pure noise and the fused SDF
    enters as a condition channel instead.
    """
    conds = condition_grids(model.config, s_cortex, cset, d_max)
    endpoint = volume.normalize_fixed(s_cortex, 0.0, d_max)
    if kind == "bridge":
        out = bridge.sample(
            bridge.build_schedule(steps), plan, endpoint, conds, grid_denoiser(model)
        )
    elif kind == "gaussian":
        from . import gaussian as gaussianmod

        out = gaussianmod.sample(GaussianProcess(steps), plan, endpoint, conds, model)
    else:
        raise DataError(f"unknown process kind {kind!r}")
    return as_intensity(out, reference_image)


def sample_pair(
    model: DenoiserModel,
    kind: str,
    steps: int,
    plan_steps: int,
    pair: phantom.PhantomPair,
    d_max: float,
    eta: float = 1.0,
    seed: int = 0,
) -> VoxelGrid:
    """Generate a volume for one phantom with an evenly spaced plan.

    The Gaussian ablation always runs its deterministic sampler (its
    randomness lives in the seeded start noise), so eta is forced to 0.
    """
    if kind == "gaussian":
        eta = 0.0
    plan = bridge.uniform_plan(
        bridge.build_schedule(steps), plan_steps, eta=eta, seed=seed
    )
    return sample_volume(
        model, kind, steps, plan, pair.s_cortex, pair.conditions, d_max, pair.image
    )


# ---------------------------------------------------------------------------
# Held-out evaluation


def evaluate_generated(
    pairs,
    volumes,
    ids=None,
    n_points: int = 20000,
    seed: int = 0,
) -> evaluate.MetricReport:
    """Surface + image metrics of generated volumes against their phantoms."""
    if len(pairs) != len(volumes):
        raise DataError(
            f"got {len(volumes)} generated volumes for {len(pairs)} references"
        )
    if ids is None:
        ids = [f"item-{i:04d}" for i in range(len(pairs))]
    records = []
    for item_id, pair, vol in zip(ids, pairs, volumes):
        record = {
            "item": item_id,
            "assd_white": math.nan,
            "assd_pial": math.nan,
            "psnr": evaluate.psnr(vol, pair.image),
            "ssim": evaluate.ssim3d(vol, pair.image),
        }
        try:
            # A degenerate volume may cross neither threshold; report the
            # image metrics anyway and leave the surface distances NaN.
            mesh_w, mesh_p = evaluate.reconstruct_surfaces(vol)
            record["assd_white"] = evaluate.assd(
                mesh_w, pair.mesh_white, n_points=n_points, seed=seed
            )
            record["assd_pial"] = evaluate.assd(
                mesh_p, pair.mesh_pial, n_points=n_points, seed=seed
            )
        except DataError:
            pass
        records.append(record)
    return evaluate.MetricReport(records=records)


# ---------------------------------------------------------------------------
# Variability and atrophy protocols


def variability_samples(
    model: DenoiserModel,
    kind: str,
    steps: int,
    plan_steps: int,
    pair: phantom.PhantomPair,
    d_max: float,
    seeds,
) -> list:
    """Stochastic (eta=1) samples of one phantom across sampling seeds."""
    return [
        sample_pair(model, kind, steps, plan_steps, pair, d_max, eta=1.0, seed=int(s))
        for s in seeds
    ]


def shell_ribbon_variance_ratio(
    maps: evaluate.VariabilityMaps, pair: phantom.PhantomPair
) -> float:
    """Mean sample variance inside the skull shell over that in the ribbon."""
    skull = pair.skull_mask.data > 0
    ribbon = pair.conditions.ribbon.data > 0
    if not skull.any() or not ribbon.any():
        raise DataError("phantom lacks skull or ribbon voxels")
    variance = maps.variance.data
    ribbon_var = float(variance[ribbon].mean())
    if ribbon_var == 0.0:
        return float("inf")
    return float(variance[skull].mean()) / ribbon_var


def atrophy_sample_fn(
    model: DenoiserModel,
    kind: str,
    steps: int,
    plan_steps: int,
    reference_image: VoxelGrid,
    d_max: float,
    eta: float = 1.0,
):
    """Sampling callback for the atrophy experiment.

    The atrophy driver rebuilds shape grids from deformed meshes and
    calls this with (s_cortex, conditions, seed); the reference image of
    the unmodified phantom fixes the de-normalization map so thickness
    changes are measured on a stable intensity scale.
    """

    def sample_fn(s_cortex, cset, seed):
        plan = bridge.uniform_plan(
            bridge.build_schedule(steps),
            plan_steps,
            eta=0.0 if kind == "gaussian" else eta,
            seed=int(seed),
        )
        return sample_volume(
            model, kind, steps, plan, s_cortex, cset, d_max, reference_image
        )

    return sample_fn
