"""Command-line entry point wiring the library into reproducible runs.

Subcommands: phantom | sdf | train | sample | eval | atrophy |
schedule-dump. Every run takes a declarative TOML config plus flag
overrides, emits the fully resolved config next to its outputs, and is
byte-reproducible for a fixed config and seed in single-threaded mode.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from .errors import DataError, ShapeBridgeError, UsageError

THREADS_ENV = "SHAPEBRIDGE_THREADS"


class _Parser(argparse.ArgumentParser):
    """argparse flavor whose usage failures follow our exit-code map."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="shapebridge", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get(THREADS_ENV, "1")),
        help="cap on intra-op threads; 1 (default) guarantees bit determinism",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset with manifests")
    p.add_argument("--config", help="experiment config TOML")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("sdf", help="fused cortex SDF + condition grids from two meshes")
    p.add_argument("--config", help="experiment config TOML (grid geometry)")
    p.add_argument("--pial", required=True, help="pial surface OFF file")
    p.add_argument("--white", required=True, help="white surface OFF file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--d-max", type=float, help="truncation distance in mm")
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("train", help="train a denoiser on a generated dataset")
    p.add_argument("--config", help="experiment config TOML")
    p.add_argument("--dataset", help="dataset directory (default: config paths)")
    p.add_argument("--out", required=True, help="run directory for checkpoints + log")
    p.add_argument("--resume", action="store_true", help="continue from latest checkpoint")
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("sample", help="generate volumes for manifest items")
    p.add_argument("--config", help="experiment config TOML")
    p.add_argument("--checkpoint", help="trained checkpoint (.sbk)")
    p.add_argument("--manifest", required=True, help="dataset split manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="samples per item (default: config)")
    p.add_argument("--plan-steps", type=int, help="sampling plan length")
    p.add_argument("--eta", type=float, help="stochasticity in [0, 1]")
    p.add_argument("--seed", type=int, help="base sampling seed")
    p.add_argument("--live", action="store_true", help="use live weights instead of EMA")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="replace the network with the exact denoiser built from each "
        "item's reference image (validates the sampling chain)",
    )
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("eval", help="score generated volumes against a manifest")
    p.add_argument("--config", help="experiment config TOML")
    p.add_argument("--pred", required=True, help="directory of generated item volumes")
    p.add_argument("--manifest", required=True, help="reference split manifest")
    p.add_argument("--out", required=True, help="output directory for the report")
    p.add_argument("--points", type=int, default=20000, help="surface samples per mesh")
    p.add_argument("--seed", type=int, default=0, help="surface sampling seed")
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("atrophy", help="introduced-vs-recovered thinning experiment")
    p.add_argument("--config", help="experiment config TOML")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.sbk)")
    p.add_argument("--manifest", required=True, help="dataset split manifest")
    p.add_argument("--item", type=int, default=0, help="manifest item index")
    p.add_argument(
        "--offsets",
        required=True,
        help="comma-separated inward pial offsets in mm (a 0 control is added if absent)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plan-steps", type=int, help="sampling plan length")
    p.add_argument("--eta", type=float, help="stochasticity in [0, 1]")
    p.add_argument("--seed", type=int, default=0, help="experiment seed")
    p.add_argument("--floor-runs", type=int, default=4, help="repeat runs for the noise floor")
    p.add_argument("--force", action="store_true", help="allow pre-existing output dir")

    p = sub.add_parser("schedule-dump", help="print the bridge coefficient table")
    p.add_argument("--steps", type=int, required=True, help="number of diffusion steps T")
    p.add_argument("--out", help="write the table to this file instead of stdout")

    return parser


def _load_config(args) -> configmod.ExperimentConfig:
    if getattr(args, "config", None):
        return configmod.load_config(args.config)
    return configmod.default_config()


def _prepare_out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(
            f"output directory {out} already exists; pass --force to reuse it"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_resolved(config: configmod.ExperimentConfig, out: Path) -> None:
    configmod.write_resolved(config, out / "resolved-config.toml")


def _sample_seed(base: int, item_index: int, sample_index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=(item_index, sample_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Command handlers


def cmd_phantom(args) -> int:
    from . import phantom

    config = _load_config(args)
    out = _prepare_out_dir(args)
    _emit_resolved(config, out)
    dataset = config["dataset"]
    splits = phantom.generate_dataset(
        config.phantom_spec(),
        dataset["n_items"],
        seed=dataset["seed"],
        out_dir=out,
        ratios=tuple(dataset["ratios"]),
    )
    for name in ("train", "val", "test"):
        print(f"{name}: {len(splits[name])} items")
    return 0


def cmd_sdf(args) -> int:
    from . import mesh as meshmod
    from . import shapes

    config = _load_config(args)
    out = _prepare_out_dir(args)
    _emit_resolved(config, out)
    mesh_pial = meshmod.load_off(args.pial)
    mesh_white = meshmod.load_off(args.white)
    for name, m in (("pial", mesh_pial), ("white", mesh_white)):
        if not meshmod.is_watertight(m):
            raise DataError(f"{name} mesh {getattr(args, name)} is not watertight")
    header = config.grid_header()
    d_max = args.d_max if args.d_max is not None else config.truncation()
    s_cortex, cset = shapes.build_condition_set(mesh_pial, mesh_white, header, d_max)
    shapes.save_condition_set(out, cset, s_cortex=s_cortex)
    names = ["s_cortex.cvg", "s_pial.cvg", "s_white.cvg", "edge.cvg", "ribbon.cvg"]
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    print(f"wrote {len(names)} grids to {out}")
    return 0


def cmd_train(args) -> int:
    from . import experiments, training

    config = _load_config(args)
    training_cfg = config["training"]
    steps = config["schedule"]["steps"]
    dataset_dir = Path(args.dataset or config["paths"]["dataset_dir"])
    train_manifest = dataset_dir / "manifest-train.txt"
    val_manifest = dataset_dir / "manifest-val.txt"

    out = Path(args.out)
    if args.resume:
        if not out.exists():
            raise DataError(f"cannot resume: run directory {out} does not exist")
        checkpoints = sorted(out.glob("epoch-*.sbk"))
        if not checkpoints:
            raise DataError(f"cannot resume: no checkpoints under {out}")
        trainer = training.load_checkpoint(
            checkpoints[-1], expected_config=config.model_config()
        )
    else:
        out = _prepare_out_dir(args)
        trainer = experiments.build_trainer(
            training_cfg["process"],
            steps,
            config.model_config(),
            config.trainer_config(),
            model_seed=training_cfg["model_seed"],
        )
    _emit_resolved(config, out)

    model_cfg = config.model_config()
    train_set = experiments.examples_from_manifest(model_cfg, train_manifest)
    val_set = experiments.examples_from_manifest(model_cfg, val_manifest)
    for epoch in range(trainer.epoch, training_cfg["epochs"]):
        history = trainer.train(
            train_set,
            val_set,
            epoch + 1,
            checkpoint_dir=out,
            log_path=out / "log.csv",
        )
        losses = [loss for _, loss, _ in history["train"]]
        val_loss = history["val"][-1][1]
        print(
            f"epoch {epoch + 1:3d}  train {float(np.mean(losses)):.6f}  "
            f"val {val_loss:.6f}  lr {trainer.learning_rate:g}"
        )
    return 0


def _oracle_denoiser(x0_normalized):
    def denoise(x_t, conditions, t):
        from . import volume

        return volume.grid_like(x_t, x_t.data - x0_normalized.data)

    return denoise


def cmd_sample(args) -> int:
    from . import bridge, experiments, phantom, training, volume

    config = _load_config(args)
    sampling = config["sampling"]
    steps = config["schedule"]["steps"]
    plan_steps = args.plan_steps if args.plan_steps is not None else sampling["plan_steps"]
    eta = args.eta if args.eta is not None else sampling["eta"]
    base_seed = args.seed if args.seed is not None else sampling["seed"]
    n = args.n if args.n is not None else sampling["samples_per_item"]
    if n < 1:
        raise UsageError("need at least one sample per item")

    spec, items = phantom.load_manifest(args.manifest)
    pairs = phantom.load_split(args.manifest)
    d_max = spec.truncation

    model = None
    kind = "bridge"
    if args.oracle:
        if args.checkpoint:
            header = training.read_checkpoint_header(args.checkpoint)
            if header["kind"] != "bridge":
                raise DataError("the oracle sampler only exists for the bridge process")
            steps = header["steps"]
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        model, header = training.load_denoiser(
            args.checkpoint,
            ema=not args.live,
            expected_config=config.model_config() if args.config else None,
        )
        kind = header["kind"]
        steps = header["steps"]

    out = _prepare_out_dir(args)
    _emit_resolved(config, out)
    schedule = bridge.build_schedule(steps)
    for i, ((item_id, _, _), pair) in enumerate(zip(items, pairs)):
        item_dir = out / item_id
        item_dir.mkdir(exist_ok=True)
        for k in range(n):
            seed = _sample_seed(base_seed, i, k)
            if args.oracle:
                plan = bridge.uniform_plan(schedule, plan_steps, eta=eta, seed=seed)
                endpoint = volume.normalize_fixed(pair.s_cortex, 0.0, d_max)
                conds = experiments.condition_grids(
                    config.model_config(), pair.s_cortex, pair.conditions, d_max
                )
                x0_norm = volume.normalize_minmax(pair.image)
                generated = bridge.sample(
                    schedule, plan, endpoint, conds, _oracle_denoiser(x0_norm)
                )
                generated = experiments.as_intensity(generated, pair.image)
            else:
                generated = experiments.sample_pair(
                    model, kind, steps, plan_steps, pair, d_max, eta=eta, seed=seed
                )
            volume.save_grid(generated, item_dir / f"sample-{k:02d}.cvg")
    print(f"wrote {n} sample(s) for {len(pairs)} item(s) to {out}")
    return 0


def _prediction_volumes(pred_dir: Path, item_ids):
    """One volume per manifest item, matched by item id.

    Each item directory holds either generated samples (the first
    ``sample-*.cvg`` is scored) or a stored reference ``image.cvg``, so a
    dataset's ``items/`` directory can be self-evaluated directly.
    """
    from . import volume

    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    available = {d.name for d in pred_dir.iterdir() if d.is_dir()}
    missing = [item_id for item_id in item_ids if item_id not in available]
    if missing:
        raise DataError(
            f"prediction count mismatch: {len(available)} item dirs under "
            f"{pred_dir} do not cover {len(item_ids)} references "
            f"(first missing: {missing[0]})"
        )
    volumes = []
    for item_id in item_ids:
        d = pred_dir / item_id
        candidates = sorted(d.glob("sample-*.cvg")) or [d / "image.cvg"]
        if not candidates[0].exists():
            raise DataError(f"no volume found under {d}")
        volumes.append(volume.load_grid(candidates[0]))
    return volumes


def cmd_eval(args) -> int:
    from . import experiments, phantom

    config = _load_config(args)
    _, items = phantom.load_manifest(args.manifest)
    ids = [item_id for item_id, _, _ in items]
    pairs = phantom.load_split(args.manifest)
    volumes = _prediction_volumes(Path(args.pred), ids)
    out = _prepare_out_dir(args)
    _emit_resolved(config, out)
    report = experiments.evaluate_generated(
        pairs, volumes, ids=ids, n_points=args.points, seed=args.seed
    )
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    aggregate = report.aggregate()
    for key, stats in aggregate.items():
        print(f"{key}: mean {stats['mean']:.4f} sd {stats['sd']:.4f}")
    return 0


def cmd_atrophy(args) -> int:
    from . import evaluate, experiments, phantom, training

    config = _load_config(args)
    sampling = config["sampling"]
    plan_steps = args.plan_steps if args.plan_steps is not None else sampling["plan_steps"]
    eta = args.eta if args.eta is not None else sampling["eta"]

    try:
        offsets = [float(v) for v in args.offsets.split(",") if v.strip()]
    except ValueError as err:
        raise UsageError(f"bad --offsets list: {err}") from err
    if not offsets:
        raise UsageError("--offsets must name at least one offset")
    if 0.0 not in offsets:
        offsets = [0.0] + offsets  # always keep the unmodified control row

    spec, _ = phantom.load_manifest(args.manifest)
    pairs = phantom.load_split(args.manifest)
    if not 0 <= args.item < len(pairs):
        raise DataError(f"item index {args.item} outside manifest of {len(pairs)}")
    pair = pairs[args.item]

    model, header = training.load_denoiser(
        args.checkpoint,
        expected_config=config.model_config() if args.config else None,
    )
    out = _prepare_out_dir(args)
    _emit_resolved(config, out)
    sample_fn = experiments.atrophy_sample_fn(
        model, header["kind"], header["steps"], plan_steps, pair.image, spec.truncation, eta=eta
    )
    result = evaluate.atrophy_experiment(
        sample_fn,
        pair.mesh_pial,
        pair.mesh_white,
        spec.header,
        offsets=sorted(offsets),
        d_max=spec.truncation,
        seed=args.seed,
        floor_runs=args.floor_runs,
    )
    result.to_csv(out / "atrophy.csv")
    print(f"baseline thickness {result.baseline_thickness:.4f} mm, "
          f"noise floor {result.noise_floor:.4f} mm")
    for row in result.rows:
        print(f"offset {row.offset:.3f}  introduced {row.introduced:.4f}  "
              f"recovered {row.recovered:.4f}")
    return 0


def cmd_schedule_dump(args) -> int:
    from . import bridge

    table = bridge.schedule_table(bridge.build_schedule(args.steps))
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


_HANDLERS = {
    "phantom": cmd_phantom,
    "sdf": cmd_sdf,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "atrophy": cmd_atrophy,
    "schedule-dump": cmd_schedule_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        import torch

        torch.set_num_threads(args.threads)
        return _HANDLERS[args.command](args)
    except ShapeBridgeError as err:
        print(f"shapebridge: error: {err}", file=sys.stderr)
        return err.exit_code


def entrypoint() -> None:
    sys.exit(main())
