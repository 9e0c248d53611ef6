"""Denoiser training: batching, optimization, EMA, checkpoints, logs.

All randomness (timestep draws, noise, shuffling) comes from numpy
generators seeded by the trainer config, so runs are reproducible and a
resumed run continues bit-for-bit where the interrupted one left off.
Checkpoints use a small versioned container: a magic line, one JSON
header line (config, counters, RNG state, tensor manifest), and a raw
little-endian payload holding model, EMA, and optimizer tensors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import bridge
from .denoiser import DenoiserConfig, DenoiserModel, gather_condition_arrays
from .errors import DataError, NumericError
from .volume import VoxelGrid

_CHECKPOINT_MAGIC = "SBK 1"
_CHECKPOINT_VERSION = 1
_VAL_KEY = 0x56414C


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2
    ema_decay: float = 0.995
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not (0 <= self.ema_decay < 1):
            raise DataError("learning rate must be >= 0 and EMA decay in [0, 1)")
        if self.batch_size < 1 or self.plateau_patience < 1:
            raise DataError("batch size and plateau patience must be positive")
        if not (0 < self.plateau_factor < 1):
            raise DataError("plateau factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "batch_size": self.batch_size,
            "ema_decay": self.ema_decay,
            "plateau_factor": self.plateau_factor,
            "plateau_patience": self.plateau_patience,
            "plateau_min_delta": self.plateau_min_delta,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        return cls(**{k: data[k] for k in cls().to_dict()})


@dataclass(frozen=True)
class TrainingExample:
    """One paired sample: clean volume, process endpoint, condition stack."""

    x0: np.ndarray
    endpoint: np.ndarray
    conditions: np.ndarray  # (k, nx, ny, nz) in the model's channel order

    def __post_init__(self):
        x0 = np.ascontiguousarray(self.x0, dtype=np.float32)
        endpoint = np.ascontiguousarray(self.endpoint, dtype=np.float32)
        cond = np.ascontiguousarray(self.conditions, dtype=np.float32)
        if x0.ndim != 3 or endpoint.shape != x0.shape:
            raise DataError("x0 and endpoint must be co-registered 3D arrays")
        if cond.ndim != 4 or cond.shape[1:] != x0.shape:
            raise DataError("conditions must be (k,) + grid dims")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "endpoint", endpoint)
        object.__setattr__(self, "conditions", cond)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.x0.shape


def example_from_grids(
    config: DenoiserConfig, x0: VoxelGrid, endpoint: VoxelGrid, conditions
) -> TrainingExample:
    """Stack the config's condition channels into a training example."""
    arrays = gather_condition_arrays(config, conditions)
    stack = np.stack(arrays) if arrays else np.zeros((0,) + x0.dims, np.float32)
    return TrainingExample(x0=x0.data, endpoint=endpoint.data, conditions=stack)


class BridgeProcess:
    """Corruption/target rule of the shape-anchored bridge."""

    kind = "bridge"

    def __init__(self, schedule: bridge.BridgeSchedule):
        self.schedule = schedule

    @property
    def steps(self) -> int:
        return self.schedule.steps

    def corrupt_and_target(self, x0, endpoint, t: int, eps):
        x_t = bridge.forward_sample_values(self.schedule, x0, endpoint, t, eps)
        target = bridge.training_target_values(self.schedule, x0, endpoint, t, eps)
        return x_t, target


class Trainer:
    """Adam + EMA + plateau LR halving over a diffusion process."""

    def __init__(self, model: DenoiserModel, process, config: TrainerConfig):
        self.model = model
        self.process = process
        self.config = config
        self.optimizer = torch.optim.Adam(
            model.parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
        )
        self.ema = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self.learning_rate = config.learning_rate
        self.step = 0
        self.epoch = 0
        self.best_val = math.inf
        self.epochs_since_improve = 0

    # -- single optimization step ------------------------------------------

    def _batch_tensors(self, examples, rng, fixed_t=None, fixed_eps=None):
        steps = self.process.steps
        inputs, targets, ts = [], [], []
        for ex in examples:
            if fixed_t is None:
                t = int(rng.integers(1, steps + 1))
            else:
                t = int(fixed_t)
            if not 1 <= t <= steps:
                raise DataError(f"timestep {t} outside [1, {steps}]")
            if fixed_eps is None:
                eps = rng.standard_normal(ex.dims, dtype=np.float32)
            else:
                eps = np.ascontiguousarray(fixed_eps, dtype=np.float32)
            x_t, target = self.process.corrupt_and_target(
                ex.x0, ex.endpoint, t, eps
            )
            inputs.append(np.concatenate([x_t[None], ex.conditions]))
            targets.append(target[None])
            ts.append(t)
        batch = torch.from_numpy(np.stack(inputs))
        target = torch.from_numpy(np.stack(targets))
        return batch, target, torch.tensor(ts)

    def backward_and_step(self, examples, fixed_t=None, fixed_eps=None) -> float:
        """One L1 step on a batch; timesteps drawn per item unless fixed.

        A non-finite loss raises NumericError before any state changes.
        """
        if not examples:
            raise DataError("empty batch")
        batch, target, ts = self._batch_tensors(
            examples, self.rng, fixed_t=fixed_t, fixed_eps=fixed_eps
        )
        pred = self.model(batch, ts)
        loss = (pred - target).abs().mean()
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        decay = self.config.ema_decay
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                self.ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)
        self.step += 1
        return float(loss.detach())

    # -- validation and the epoch loop -------------------------------------

    def validation_loss(self, examples, epoch: int | None = None) -> float:
        """Mean L1 loss over a held-out set with epoch-keyed noise draws."""
        if not examples:
            raise DataError("empty validation set")
        key = self.epoch if epoch is None else epoch
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.config.seed, spawn_key=(_VAL_KEY, key))
        )
        total = 0.0
        size = self.config.batch_size
        with torch.no_grad():
            for start in range(0, len(examples), size):
                chunk = examples[start : start + size]
                batch, target, ts = self._batch_tensors(chunk, rng)
                pred = self.model(batch, ts)
                total += float((pred - target).abs().mean(dim=(1, 2, 3, 4)).sum())
        return total / len(examples)

    def _plateau_update(self, val_loss: float):
        if val_loss < self.best_val - self.config.plateau_min_delta:
            self.best_val = val_loss
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
            if self.epochs_since_improve >= self.config.plateau_patience:
                self.learning_rate *= self.config.plateau_factor
                for group in self.optimizer.param_groups:
                    group["lr"] = self.learning_rate
                self.epochs_since_improve = 0

    def train(
        self,
        train_set,
        val_set,
        epochs: int,
        checkpoint_dir=None,
        log_path=None,
    ) -> dict:
        """Run epochs up to the target count, checkpointing after each.

        Returns {"train": [(step, loss, lr), ...], "val": [(epoch, loss), ...]}.
        """
        if not train_set:
            raise DataError("empty training set")
        dims = train_set[0].dims
        want = self.model.config.in_channels - 1
        for ex in list(train_set) + list(val_set):
            if ex.dims != dims:
                raise DataError(
                    f"dataset geometry inconsistency: {ex.dims} vs {dims}"
                )
            if ex.conditions.shape[0] != want:
                raise DataError(
                    f"example has {ex.conditions.shape[0]} condition channels, "
                    f"model expects {want}"
                )
        history = {"train": [], "val": []}
        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
        size = self.config.batch_size
        while self.epoch < epochs:
            order = self.rng.permutation(len(train_set))
            rows = []
            for start in range(0, len(order), size):
                chunk = [train_set[i] for i in order[start : start + size]]
                loss = self.backward_and_step(chunk)
                rows.append((self.step, loss, self.learning_rate))
            val_loss = self.validation_loss(val_set, epoch=self.epoch)
            self._plateau_update(val_loss)
            history["train"].extend(rows)
            history["val"].append((self.epoch, val_loss))
            self.epoch += 1
            if log_path is not None:
                _append_log(log_path, rows)
            if checkpoint_dir is not None:
                save_checkpoint(
                    checkpoint_dir / f"epoch-{self.epoch:03d}.sbk", self
                )
        return history

    def ema_model(self) -> DenoiserModel:
        """Copy of the model carrying the EMA weights (for sampling/eval)."""
        model = DenoiserModel(self.model.config)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.ema[name])
        model.eval()
        return model


def _append_log(path, rows):
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a") as fh:
        if new_file:
            fh.write("step,loss,lr\n")
        for step, loss, lr in rows:
            fh.write(f"{step},{loss!r},{lr!r}\n")


# ---------------------------------------------------------------------------
# Checkpoints


def _trainer_tensors(trainer: Trainer):
    """All persisted tensors as named numpy arrays, in a fixed order."""
    named = dict(trainer.model.named_parameters())
    out = []
    for name, p in named.items():
        out.append((name, p.detach().numpy()))
    for name in named:
        out.append((f"ema.{name}", trainer.ema[name].numpy()))
    for name, p in named.items():
        state = trainer.optimizer.state.get(p)
        if state:
            m = state["exp_avg"].numpy()
            v = state["exp_avg_sq"].numpy()
            step = np.asarray(state["step"].detach(), dtype=np.float32)
        else:
            m = np.zeros(tuple(p.shape), np.float32)
            v = np.zeros(tuple(p.shape), np.float32)
            step = np.zeros((), np.float32)
        out.append((f"adam.m.{name}", m))
        out.append((f"adam.v.{name}", v))
        out.append((f"adam.t.{name}", step))
    return out


def save_checkpoint(path, trainer: Trainer):
    tensors = _trainer_tensors(trainer)
    manifest = []
    payload = bytearray()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append([name, list(arr.shape), len(payload), arr.nbytes])
        payload += arr.tobytes()
    header = {
        "version": _CHECKPOINT_VERSION,
        "kind": trainer.process.kind,
        "steps": trainer.process.steps,
        "model_config": trainer.model.config.to_dict(),
        "trainer_config": trainer.config.to_dict(),
        "step": trainer.step,
        "epoch": trainer.epoch,
        "learning_rate": trainer.learning_rate,
        "best_val": None if math.isinf(trainer.best_val) else trainer.best_val,
        "epochs_since_improve": trainer.epochs_since_improve,
        "rng_state": trainer.rng.bit_generator.state,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(f"{_CHECKPOINT_MAGIC}\n".encode())
        fh.write(blob.encode())
        fh.write(b"\n\n")
        fh.write(bytes(payload))


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").rstrip("\n")
        if magic != _CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file (magic {magic!r})")
        header = json.loads(fh.readline().decode())
    if header.get("version") != _CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {header.get('version')!r}"
        )
    return header


def _read_payload(path, header) -> dict:
    with open(path, "rb") as fh:
        fh.readline()
        fh.readline()
        fh.readline()  # blank separator
        payload = fh.read()
    expected = sum(entry[3] for entry in header["tensors"])
    if len(payload) != expected:
        raise DataError(
            f"checkpoint payload is {len(payload)} bytes, expected {expected}"
        )
    arrays = {}
    for name, shape, offset, nbytes in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
    return arrays


def _process_from_header(header):
    kind = header["kind"]
    steps = int(header["steps"])
    if kind == "bridge":
        return BridgeProcess(bridge.build_schedule(steps))
    if kind == "gaussian":
        from .gaussian import GaussianProcess

        return GaussianProcess(steps)
    raise DataError(f"unknown diffusion process kind {kind!r}")


def _check_expected_config(header, expected_config):
    if expected_config is not None:
        stored = DenoiserConfig.from_dict(header["model_config"])
        if stored != expected_config:
            raise DataError(
                "checkpoint config mismatch: "
                f"stored {stored} vs expected {expected_config}"
            )


def load_checkpoint(path, expected_config: DenoiserConfig | None = None) -> Trainer:
    """Rebuild a trainer (model, EMA, optimizer, RNG) from a checkpoint."""
    header = read_checkpoint_header(path)
    _check_expected_config(header, expected_config)
    arrays = _read_payload(path, header)
    config = DenoiserConfig.from_dict(header["model_config"])
    tconfig = TrainerConfig.from_dict(header["trainer_config"])
    model = DenoiserModel(config)
    trainer = Trainer(model, _process_from_header(header), tconfig)
    with torch.no_grad():
        for name, p in model.named_parameters():
            saved = arrays.get(name)
            if saved is None or tuple(saved.shape) != tuple(p.shape):
                raise DataError(
                    f"checkpoint does not match model configuration ({name})"
                )
            p.copy_(torch.from_numpy(saved))
            trainer.ema[name].copy_(torch.from_numpy(arrays[f"ema.{name}"]))
            state = {
                "step": torch.from_numpy(arrays[f"adam.t.{name}"].copy()).reshape(()),
                "exp_avg": torch.from_numpy(arrays[f"adam.m.{name}"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam.v.{name}"]),
            }
            trainer.optimizer.state[p] = state
    trainer.step = int(header["step"])
    trainer.epoch = int(header["epoch"])
    trainer.learning_rate = float(header["learning_rate"])
    for group in trainer.optimizer.param_groups:
        group["lr"] = trainer.learning_rate
    best = header["best_val"]
    trainer.best_val = math.inf if best is None else float(best)
    trainer.epochs_since_improve = int(header["epochs_since_improve"])
    trainer.rng.bit_generator.state = header["rng_state"]
    return trainer


def load_denoiser(path, ema: bool = True, expected_config: DenoiserConfig | None = None):
    """Load just the network from a checkpoint; EMA weights by default."""
    header = read_checkpoint_header(path)
    _check_expected_config(header, expected_config)
    arrays = _read_payload(path, header)
    config = DenoiserConfig.from_dict(header["model_config"])
    model = DenoiserModel(config)
    prefix = "ema." if ema else ""
    with torch.no_grad():
        for name, p in model.named_parameters():
            saved = arrays.get(prefix + name)
            if saved is None or tuple(saved.shape) != tuple(p.shape):
                raise DataError(
                    f"checkpoint does not match model configuration ({name})"
                )
            p.copy_(torch.from_numpy(saved))
    model.eval()
    return model, header
