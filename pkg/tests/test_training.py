"""Trainer: optimization, EMA, determinism, checkpoints, logs."""

import math

import numpy as np
import pytest
import torch

from shapebridge import bridge, denoiser, training, volume
from shapebridge.denoiser import DenoiserConfig
from shapebridge.errors import DataError, NumericError
from shapebridge.training import Trainer, TrainerConfig, TrainingExample

TINY = DenoiserConfig(
    base_channels=4,
    channel_mults=(1, 2),
    condition_channels=("s_pial",),
    time_width=8,
    groups=2,
)
STEPS = 10


def make_examples(count, dims=(4, 4, 4), channels=1, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        out.append(
            TrainingExample(
                x0=np.tanh(rng.normal(size=dims)),
                endpoint=np.tanh(rng.normal(size=dims)),
                conditions=rng.normal(size=(channels,) + dims),
            )
        )
    return out


def make_trainer(seed=1, lr=1e-4, config=TINY, steps=STEPS, **kw):
    model = denoiser.build_model(config, seed=seed)
    process = training.BridgeProcess(bridge.build_schedule(steps))
    tconfig = TrainerConfig(learning_rate=lr, batch_size=2, seed=seed, **kw)
    return Trainer(model, process, tconfig)


def params_snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def params_equal(a, b):
    return all(torch.equal(a[n], b[n]) for n in a)


# ---------------------------------------------------------------------------
# Single steps


def test_step_returns_finite_loss_and_moves_parameters():
    trainer = make_trainer()
    data = make_examples(2)
    before = params_snapshot(trainer.model)
    loss = trainer.backward_and_step(data)
    assert math.isfinite(loss) and loss > 0
    assert trainer.step == 1
    assert not params_equal(before, params_snapshot(trainer.model))


def test_steps_are_seed_deterministic():
    data = make_examples(4)
    a, b = make_trainer(seed=3), make_trainer(seed=3)
    losses_a = [a.backward_and_step(data[:2]) for _ in range(5)]
    losses_b = [b.backward_and_step(data[:2]) for _ in range(5)]
    assert losses_a == losses_b
    assert params_equal(params_snapshot(a.model), params_snapshot(b.model))


def test_different_seed_gives_different_draws():
    data = make_examples(2)
    a, b = make_trainer(seed=3), make_trainer(seed=4)
    assert a.backward_and_step(data) != b.backward_and_step(data)


def test_zero_learning_rate_keeps_parameters_bit_exact():
    trainer = make_trainer(lr=0.0)
    data = make_examples(2)
    before = params_snapshot(trainer.model)
    for _ in range(3):
        trainer.backward_and_step(data)
    assert params_equal(before, params_snapshot(trainer.model))


def test_nonfinite_loss_aborts_without_mutation():
    trainer = make_trainer()
    bad = TrainingExample(
        x0=np.full((4, 4, 4), np.inf),
        endpoint=np.zeros((4, 4, 4)),
        conditions=np.zeros((1, 4, 4, 4)),
    )
    before = params_snapshot(trainer.model)
    with pytest.raises(NumericError):
        trainer.backward_and_step([bad])
    assert trainer.step == 0
    assert params_equal(before, params_snapshot(trainer.model))
    assert not trainer.optimizer.state  # Adam never initialized


def test_empty_batch_rejected():
    with pytest.raises(DataError):
        make_trainer().backward_and_step([])


def test_fixed_timestep_out_of_range_rejected():
    trainer = make_trainer()
    data = make_examples(1)
    with pytest.raises(DataError):
        trainer.backward_and_step(data, fixed_t=0)
    with pytest.raises(DataError):
        trainer.backward_and_step(data, fixed_t=STEPS + 1)


# ---------------------------------------------------------------------------
# Overfit smoke test and condition sensitivity


@pytest.fixture(scope="module")
def overfit_run():
    """200 fixed-(t, eps) steps on one pair; shared by two tests."""
    config = DenoiserConfig(
        base_channels=8,
        channel_mults=(1, 2),
        condition_channels=("s_pial", "s_white", "edge", "ribbon"),
        time_width=16,
        groups=4,
    )
    rng = np.random.default_rng(42)
    dims = (8, 8, 8)
    example = TrainingExample(
        x0=np.tanh(rng.normal(size=dims)),
        endpoint=np.tanh(rng.normal(size=dims)),
        conditions=rng.normal(size=(4,) + dims),
    )
    eps = rng.standard_normal(dims).astype(np.float32)
    trainer = make_trainer(seed=7, lr=1e-3, config=config)
    losses = [
        trainer.backward_and_step([example], fixed_t=STEPS // 2, fixed_eps=eps)
        for _ in range(200)
    ]
    return trainer, example, eps, losses


def test_overfit_smoke(overfit_run):
    _, _, _, losses = overfit_run
    assert losses[-1] < 0.1 * losses[0], (losses[0], losses[-1])


def test_condition_sensitivity_after_overfit(overfit_run):
    trainer, example, eps, _ = overfit_run
    t = STEPS // 2
    x_t, _ = trainer.process.corrupt_and_target(example.x0, example.endpoint, t, eps)
    with_cond = np.concatenate([x_t[None], example.conditions])
    without = np.concatenate([x_t[None], np.zeros_like(example.conditions)])
    with torch.no_grad():
        a = trainer.model(torch.from_numpy(with_cond[None]), torch.tensor([t]))
        b = trainer.model(torch.from_numpy(without[None]), torch.tensor([t]))
    assert float((a - b).abs().mean()) > 1e-3


# ---------------------------------------------------------------------------
# EMA


def test_ema_starts_at_live_parameters():
    trainer = make_trainer()
    for name, p in trainer.model.named_parameters():
        assert torch.equal(trainer.ema[name], p)


def test_ema_decay_law_under_frozen_parameters():
    trainer = make_trainer(lr=1e-3)
    data = make_examples(2)
    for _ in range(5):  # open a gap between EMA and live weights
        trainer.backward_and_step(data)
    for group in trainer.optimizer.param_groups:  # freeze the parameters
        group["lr"] = 0.0
    gap0 = np.concatenate(
        [
            (trainer.ema[n] - p.detach()).numpy().ravel()
            for n, p in trainer.model.named_parameters()
        ]
    )
    assert np.abs(gap0).max() > 0
    n_steps = 7
    for _ in range(n_steps):
        trainer.backward_and_step(data)
    gap = np.concatenate(
        [
            (trainer.ema[n] - p.detach()).numpy().ravel()
            for n, p in trainer.model.named_parameters()
        ]
    )
    expected = gap0 * 0.995**n_steps
    # float32 shadow updates accumulate ~1e-7 * |param| per step, so small
    # gap entries need an absolute allowance on top of the relative one
    assert np.allclose(gap, expected, rtol=1e-3, atol=2e-6)
    ratio = np.linalg.norm(gap) / np.linalg.norm(gap0)
    assert abs(ratio - 0.995**n_steps) < 1e-4


def test_ema_model_carries_shadow_weights():
    trainer = make_trainer(lr=1e-3)
    data = make_examples(2)
    for _ in range(3):
        trainer.backward_and_step(data)
    shadow = trainer.ema_model()
    live = params_snapshot(trainer.model)
    for name, p in shadow.named_parameters():
        assert torch.equal(p, trainer.ema[name])
        assert not torch.equal(p, live[name])


# ---------------------------------------------------------------------------
# Validation loss and the plateau scheduler


def test_validation_loss_deterministic_per_epoch():
    trainer = make_trainer()
    val = make_examples(3, seed=5)
    a = trainer.validation_loss(val, epoch=2)
    b = trainer.validation_loss(val, epoch=2)
    c = trainer.validation_loss(val, epoch=3)
    assert a == b
    assert a != c


def test_plateau_halves_after_patience():
    trainer = make_trainer(lr=1e-4, plateau_patience=3, plateau_min_delta=1e-4)
    trainer._plateau_update(1.0)  # first value becomes best
    assert trainer.learning_rate == 1e-4
    trainer._plateau_update(0.5)  # clear improvement
    # improvement below min_delta does not count
    trainer._plateau_update(0.5 - 5e-5)
    trainer._plateau_update(0.51)
    assert trainer.learning_rate == 1e-4
    trainer._plateau_update(0.52)  # third stale epoch triggers the halving
    assert trainer.learning_rate == 5e-5
    assert trainer.epochs_since_improve == 0
    assert all(g["lr"] == 5e-5 for g in trainer.optimizer.param_groups)


# ---------------------------------------------------------------------------
# Epoch loop, logs, resume


def test_train_writes_checkpoints_and_log(tmp_path):
    trainer = make_trainer(seed=11)
    data = make_examples(4, seed=11)
    val = make_examples(2, seed=12)
    log = tmp_path / "train.csv"
    history = trainer.train(data, val, epochs=2, checkpoint_dir=tmp_path, log_path=log)
    assert (tmp_path / "epoch-001.sbk").exists()
    assert (tmp_path / "epoch-002.sbk").exists()
    lines = log.read_text().splitlines()
    assert lines[0] == "step,loss,lr"
    assert len(lines) - 1 == len(history["train"]) == trainer.step
    step, loss, lr = lines[1].split(",")
    assert int(step) == 1 and float(loss) > 0 and float(lr) == 1e-4
    assert [epoch for epoch, _ in history["val"]] == [0, 1]


def test_train_validates_dataset_geometry():
    trainer = make_trainer()
    good = make_examples(2)
    odd_dims = make_examples(1, dims=(8, 4, 4))
    odd_channels = make_examples(1, channels=2)
    with pytest.raises(DataError):
        trainer.train(good + odd_dims, good, epochs=1)
    with pytest.raises(DataError):
        trainer.train(good + odd_channels, good, epochs=1)
    with pytest.raises(DataError):
        trainer.train([], good, epochs=1)


def test_resume_equals_uninterrupted_run(tmp_path):
    data = make_examples(4, seed=21)
    val = make_examples(2, seed=22)

    dir_a = tmp_path / "a"
    full = make_trainer(seed=13)
    full.train(data, val, epochs=4, checkpoint_dir=dir_a, log_path=dir_a / "log.csv")

    dir_b = tmp_path / "b"
    part = make_trainer(seed=13)
    part.train(data, val, epochs=2, checkpoint_dir=dir_b, log_path=dir_b / "log.csv")
    resumed = training.load_checkpoint(dir_b / "epoch-002.sbk")
    resumed.train(data, val, epochs=4, checkpoint_dir=dir_b, log_path=dir_b / "log.csv")

    assert resumed.step == full.step and resumed.epoch == full.epoch
    assert params_equal(params_snapshot(full.model), params_snapshot(resumed.model))
    assert all(torch.equal(full.ema[n], resumed.ema[n]) for n in full.ema)
    assert (dir_a / "log.csv").read_text() == (dir_b / "log.csv").read_text()


# ---------------------------------------------------------------------------
# Checkpoint container


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    trainer = make_trainer(seed=17, lr=1e-3)
    data = make_examples(3, seed=17)
    for _ in range(3):
        trainer.backward_and_step(data[:2])
    path = tmp_path / "ck.sbk"
    training.save_checkpoint(path, trainer)
    loaded = training.load_checkpoint(path)

    assert params_equal(params_snapshot(trainer.model), params_snapshot(loaded.model))
    assert all(torch.equal(trainer.ema[n], loaded.ema[n]) for n in trainer.ema)
    for (pa, sa), (pb, sb) in zip(
        trainer.optimizer.state.items(), loaded.optimizer.state.items()
    ):
        assert torch.equal(sa["exp_avg"], sb["exp_avg"])
        assert torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])
        assert float(sa["step"]) == float(sb["step"])
    assert loaded.step == trainer.step
    assert loaded.rng.bit_generator.state == trainer.rng.bit_generator.state

    # forward pass identical before/after the round trip
    x = torch.from_numpy(
        np.random.default_rng(1).normal(size=(1, TINY.in_channels, 4, 4, 4)).astype(np.float32)
    )
    with torch.no_grad():
        assert torch.equal(trainer.model(x, torch.tensor([2])), loaded.model(x, torch.tensor([2])))

    # and the next optimization step agrees bit-for-bit
    la = trainer.backward_and_step(data[2:])
    lb = loaded.backward_and_step(data[2:])
    assert la == lb
    assert params_equal(params_snapshot(trainer.model), params_snapshot(loaded.model))


def test_checkpoint_before_any_step_roundtrips(tmp_path):
    trainer = make_trainer(seed=19)
    path = tmp_path / "fresh.sbk"
    training.save_checkpoint(path, trainer)
    loaded = training.load_checkpoint(path)
    data = make_examples(2, seed=19)
    assert trainer.backward_and_step(data) == loaded.backward_and_step(data)
    assert params_equal(params_snapshot(trainer.model), params_snapshot(loaded.model))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.sbk"
    path.write_bytes(b"NOPE 9\n{}\n\n")
    with pytest.raises(DataError):
        training.load_checkpoint(path)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    trainer = make_trainer()
    path = tmp_path / "ck.sbk"
    training.save_checkpoint(path, trainer)
    blob = path.read_bytes().replace(b'"version":1', b'"version":2', 1)
    path.write_bytes(blob)
    with pytest.raises(DataError):
        training.load_checkpoint(path)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    trainer = make_trainer()
    path = tmp_path / "ck.sbk"
    training.save_checkpoint(path, trainer)
    other = DenoiserConfig(
        base_channels=8,
        channel_mults=(1, 2),
        condition_channels=("s_pial",),
        time_width=8,
        groups=2,
    )
    with pytest.raises(DataError):
        training.load_checkpoint(path, expected_config=other)
    with pytest.raises(DataError):
        training.load_denoiser(path, expected_config=other)
    # matching config loads fine
    training.load_checkpoint(path, expected_config=TINY)


def test_checkpoint_truncated_payload_rejected(tmp_path):
    trainer = make_trainer()
    path = tmp_path / "ck.sbk"
    training.save_checkpoint(path, trainer)
    blob = path.read_bytes()
    path.write_bytes(blob[:-64])
    with pytest.raises(DataError):
        training.load_checkpoint(path)


def test_load_denoiser_selects_ema_or_live(tmp_path):
    trainer = make_trainer(seed=23, lr=1e-3)
    data = make_examples(2, seed=23)
    for _ in range(4):
        trainer.backward_and_step(data)
    path = tmp_path / "ck.sbk"
    training.save_checkpoint(path, trainer)
    shadow, header = training.load_denoiser(path, ema=True)
    live, _ = training.load_denoiser(path, ema=False)
    assert header["kind"] == "bridge" and header["steps"] == STEPS
    for name, p in shadow.named_parameters():
        assert torch.equal(p, trainer.ema[name])
    assert params_equal(params_snapshot(live), params_snapshot(trainer.model))


# ---------------------------------------------------------------------------
# Example container


def test_training_example_validation():
    with pytest.raises(DataError):
        TrainingExample(
            x0=np.zeros((4, 4)), endpoint=np.zeros((4, 4)), conditions=np.zeros((1, 4, 4))
        )
    with pytest.raises(DataError):
        TrainingExample(
            x0=np.zeros((4, 4, 4)),
            endpoint=np.zeros((4, 4, 2)),
            conditions=np.zeros((1, 4, 4, 4)),
        )
    with pytest.raises(DataError):
        TrainingExample(
            x0=np.zeros((4, 4, 4)),
            endpoint=np.zeros((4, 4, 4)),
            conditions=np.zeros((1, 4, 4, 2)),
        )


def test_example_from_grids_stacks_config_order():
    header = volume.GridHeader(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
    cfg = DenoiserConfig(
        base_channels=4,
        channel_mults=(1, 2),
        condition_channels=("edge", "ribbon"),
        time_width=8,
        groups=2,
    )
    edge = volume.make_grid(header, np.full((4, 4, 4), 1.0))
    ribbon = volume.make_grid(header, np.full((4, 4, 4), 2.0))
    x0 = volume.zeros(header)
    example = training.example_from_grids(
        cfg, x0, x0, {"edge": edge, "ribbon": ribbon}
    )
    assert example.conditions.shape == (2, 4, 4, 4)
    assert example.conditions[0].max() == 1.0
    assert example.conditions[1].min() == 2.0
