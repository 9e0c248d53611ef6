"""Brownian-bridge diffusion between a data volume and its shape condition.

The forward process interpolates x_t = (1 - a_t) x_0 + a_t x_T + sqrt(d_t) e
with a_t = t/T and variance d_t = 2(a_t - a_t^2), so both endpoints are hit
exactly. The network is trained to predict the displaced part
a_t (x_T - x_0) + sqrt(d_t) e, and sampling runs the reverse chain (or an
accelerated sub-sequence of it) from x_T down to x_0.

Core arithmetic uses scalar schedule coefficients against whole arrays, so
the same functions serve numpy grids and torch batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import volume
from .errors import DataError, GeometryMismatchError
from .volume import VoxelGrid


@dataclass(frozen=True)
class BridgeSchedule:
    """Per-step coefficient tables for a T-step bridge, indexed t = 0..T.

    ``alpha[t] = t/T`` and ``delta[t] = 2 (alpha - alpha^2)`` define the
    marginal; ``delta_step[t]`` is the t-1 -> t transition variance;
    ``coef_x/coef_s/coef_f`` weight x_t, the condition, and the network
    output in the reverse mean; ``tilde_delta[t]`` is the reverse-step
    variance. Entries at t = T, where the defining quotients hit 0/0
    (delta[T] = 0), carry the analytic limits of the same formulas; the
    t = 0 entries of the reverse tables are unused and stay 0.
    """

    steps: int
    alpha: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    delta_step: np.ndarray = field(repr=False)
    coef_x: np.ndarray = field(repr=False)
    coef_s: np.ndarray = field(repr=False)
    coef_f: np.ndarray = field(repr=False)
    tilde_delta: np.ndarray = field(repr=False)


def build_schedule(T: int) -> BridgeSchedule:
    """Populate all schedule tables for a T-step bridge."""
    T = int(T)
    if T < 2:
        raise DataError(f"step count must be at least 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha = t / T
    delta = 2.0 * (alpha - alpha**2)

    delta_step = np.zeros(T + 1)
    shrink = (1.0 - alpha[1:]) / (1.0 - alpha[:-1])  # (1-a_t)/(1-a_{t-1}), t=1..T
    delta_step[1:] = delta[1:] - delta[:-1] * shrink**2

    coef_x = np.zeros(T + 1)
    coef_s = np.zeros(T + 1)
    coef_f = np.zeros(T + 1)
    tilde_delta = np.zeros(T + 1)
    cur = slice(1, T)  # delta[t] > 0 here; t = T is filled with limits below
    prev = slice(0, T - 1)
    shr = shrink[: T - 1]
    ratio_prev = delta[prev] / delta[cur]  # delta_{t-1}/delta_t
    coef_x[cur] = ratio_prev * shr + (delta_step[cur] / delta[cur]) * (1.0 - alpha[prev])
    coef_s[cur] = alpha[prev] - alpha[cur] * shr * ratio_prev
    coef_f[cur] = (1.0 - alpha[prev]) * delta_step[cur] / delta[cur]
    tilde_delta[cur] = delta_step[cur] * delta[prev] / delta[cur]

    coef_x[T] = 1.0
    coef_s[T] = 0.0
    coef_f[T] = 1.0 / T
    tilde_delta[T] = 2.0 * (T - 1) / T**2

    for table in (alpha, delta, delta_step, coef_x, coef_s, coef_f, tilde_delta):
        table.setflags(write=False)
    return BridgeSchedule(
        steps=T,
        alpha=alpha,
        delta=delta,
        delta_step=delta_step,
        coef_x=coef_x,
        coef_s=coef_s,
        coef_f=coef_f,
        tilde_delta=tilde_delta,
    )


def schedule_table(schedule: BridgeSchedule) -> str:
    """Plain-text dump of all tables, one row per step."""
    lines = ["t alpha delta c_x c_s c_f tilde_delta"]
    for t in range(schedule.steps + 1):
        lines.append(
            " ".join(
                repr(float(column[t]))
                for column in (
                    schedule.alpha,
                    schedule.delta,
                    schedule.coef_x,
                    schedule.coef_s,
                    schedule.coef_f,
                    schedule.tilde_delta,
                )
            )
        )
        lines[-1] = f"{t} " + lines[-1]
    return "\n".join(lines) + "\n"


def noise_for(seed: int, t: int, dims) -> np.ndarray:
    """Standard-normal noise that depends only on (seed, t, shape).

    Each step gets an independent child stream of the seed, so noise at one
    step can be regenerated without drawing the others.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(t),)))
    return rng.standard_normal(size=tuple(dims))


def _check_step(schedule: BridgeSchedule, t: int, lowest: int) -> int:
    t = int(t)
    if not lowest <= t <= schedule.steps:
        raise DataError(
            f"step {t} out of range [{lowest}, {schedule.steps}]"
        )
    return t


# ---------------------------------------------------------------------------
# Array-level operations (numpy arrays or torch tensors)


def forward_sample_values(schedule: BridgeSchedule, x0, xT, t: int, eps):
    """x_t = (1 - a_t) x_0 + a_t x_T + sqrt(d_t) eps."""
    t = _check_step(schedule, t, lowest=0)
    a = float(schedule.alpha[t])
    s = math.sqrt(float(schedule.delta[t]))
    return (1.0 - a) * x0 + a * xT + s * eps


def training_target_values(schedule: BridgeSchedule, x0, xT, t: int, eps):
    """Network regression target a_t (x_T - x_0) + sqrt(d_t) eps."""
    t = _check_step(schedule, t, lowest=0)
    a = float(schedule.alpha[t])
    s = math.sqrt(float(schedule.delta[t]))
    return a * (xT - x0) + s * eps


def reverse_step_values(schedule: BridgeSchedule, x_t, s_c, f_out, t: int, eps):
    """One reverse transition x_t -> x_{t-1}.

    Mean is c_x x_t + c_s s_c - c_f f_out; the added noise scale
    sqrt(tilde_delta) is exactly zero at t = 1, so the passed eps is inert
    there.
    """
    t = _check_step(schedule, t, lowest=1)
    c_x = float(schedule.coef_x[t])
    c_s = float(schedule.coef_s[t])
    c_f = float(schedule.coef_f[t])
    s = math.sqrt(float(schedule.tilde_delta[t]))
    return c_x * x_t + c_s * s_c - c_f * f_out + s * eps


def bridge_loss_values(f_out, target) -> float:
    """Mean absolute per-voxel deviation from the target."""
    diff = abs(f_out - target)
    return float(diff.mean())


# ---------------------------------------------------------------------------
# Sampling plans and the accelerated sampler


@dataclass(frozen=True)
class SamplingPlan:
    """Strictly decreasing timestep subset ending the chain, with noise knobs.

    ``taus`` runs from T down to the last denoised step (>= 1); ``eta``
    scales the stochastic part (1 mirrors the full reverse chain, 0 is
    deterministic); ``seed`` keys the per-step noise streams.
    """

    taus: tuple[int, ...]
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        if not taus:
            raise DataError("sampling plan is empty")
        if any(b >= a for a, b in zip(taus, taus[1:])):
            raise DataError(f"plan steps must be strictly decreasing, got {taus}")
        if taus[-1] < 1:
            raise DataError("plan steps must stay >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise DataError(f"eta must lie in [0, 1], got {self.eta}")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "seed", int(self.seed))


def uniform_plan(schedule: BridgeSchedule, n_steps: int, eta: float = 1.0, seed: int = 0) -> SamplingPlan:
    """Evenly spaced plan of ``n_steps`` steps from T down to 1."""
    T = schedule.steps
    if not 1 <= n_steps <= T:
        raise DataError(f"plan length must lie in [1, {T}], got {n_steps}")
    taus = np.unique(np.rint(np.linspace(T, 1, int(n_steps))).astype(int))[::-1]
    return SamplingPlan(taus=tuple(int(t) for t in taus), eta=eta, seed=seed)


def check_plan(schedule: BridgeSchedule, plan: SamplingPlan):
    if plan.taus[0] != schedule.steps:
        raise DataError(
            f"plan must start at T = {schedule.steps}, got {plan.taus[0]}"
        )


def sample_values(
    schedule: BridgeSchedule,
    plan: SamplingPlan,
    s_c: np.ndarray,
    denoise_fn,
    noise_fn=None,
):
    """Run the accelerated reverse chain from x_T = s_c down to x_0.

    ``denoise_fn(x, t)`` returns the network output at step t. Each hop
    tau -> tau_prev re-expresses the state through the predicted clean
    volume x0_hat = x - f and projects it onto the bridge marginal at
    tau_prev, keeping a stochastic share eta of the transition variance.
    With the full plan and eta = 1 this reproduces the step-by-step reverse
    chain exactly; with eta = 0 it is deterministic. ``noise_fn(t, shape)``
    overrides the seeded noise source (noise is keyed by the source step t).
    """
    check_plan(schedule, plan)
    if noise_fn is None:
        def noise_fn(t, shape):
            return noise_for(plan.seed, t, shape)

    alpha = schedule.alpha
    delta = schedule.delta
    x = s_c + 0.0  # force a copy in both numpy and torch
    hops = list(zip(plan.taus, list(plan.taus[1:]) + [0]))
    for tau, prev in hops:
        f = denoise_fn(x, tau)
        x0_hat = x - f
        a_cur, d_cur = float(alpha[tau]), float(delta[tau])
        a_prev, d_prev = float(alpha[prev]), float(delta[prev])
        sigma2 = 0.0
        if plan.eta > 0.0 and d_prev > 0.0:
            # at tau = T the ratio is 0/0 with limit 0 (both delta and
            # (1-alpha)^2 vanish), leaving the full transition variance
            ratio = 0.0
            if d_cur > 0.0:
                ratio = d_prev * (1.0 - a_cur) ** 2 / (d_cur * (1.0 - a_prev) ** 2)
            sigma2 = min(max(plan.eta**2 * d_prev * (1.0 - ratio), 0.0), d_prev)
        mean = (1.0 - a_prev) * x0_hat + a_prev * s_c
        if d_cur > 0.0:
            direction = (x - (1.0 - a_cur) * x0_hat - a_cur * s_c) / math.sqrt(d_cur)
            mean = mean + math.sqrt(max(d_prev - sigma2, 0.0)) * direction
        if sigma2 > 0.0:
            x = mean + math.sqrt(sigma2) * noise_fn(tau, np.shape(x))
        else:
            x = mean
    return x


# ---------------------------------------------------------------------------
# Grid-level wrappers


def _as_noise(schedule: BridgeSchedule, eps, t: int, reference: VoxelGrid) -> np.ndarray:
    if eps is None:
        return np.zeros(reference.dims)
    if isinstance(eps, (int, np.integer)):
        return noise_for(int(eps), t, reference.dims)
    if isinstance(eps, VoxelGrid):
        if not eps.header.same_geometry(reference.header):
            raise GeometryMismatchError("noise grid geometry mismatch")
        return eps.data.astype(np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != reference.dims:
        raise GeometryMismatchError(
            f"noise shape {eps.shape} does not match grid dims {reference.dims}"
        )
    return eps


def _require_same_geometry(*grids: VoxelGrid):
    base = grids[0]
    for grid in grids[1:]:
        if not base.header.same_geometry(grid.header):
            raise GeometryMismatchError(
                f"grid geometry mismatch: {base.dims}/{base.spacing}/{base.origin} "
                f"vs {grid.dims}/{grid.spacing}/{grid.origin}"
            )


def forward_sample(schedule: BridgeSchedule, x0: VoxelGrid, xT: VoxelGrid, t: int, eps=None) -> VoxelGrid:
    """Grid-level forward_sample_values; ``eps`` is a grid, array, or seed."""
    _require_same_geometry(x0, xT)
    values = forward_sample_values(
        schedule, x0.data.astype(np.float64), xT.data.astype(np.float64), t,
        _as_noise(schedule, eps, t, x0),
    )
    return volume.grid_like(x0, values.astype(np.float32))


def training_target(schedule: BridgeSchedule, x0: VoxelGrid, xT: VoxelGrid, t: int, eps=None) -> VoxelGrid:
    """Grid-level training_target_values; ``eps`` is a grid, array, or seed."""
    _require_same_geometry(x0, xT)
    values = training_target_values(
        schedule, x0.data.astype(np.float64), xT.data.astype(np.float64), t,
        _as_noise(schedule, eps, t, x0),
    )
    return volume.grid_like(x0, values.astype(np.float32))


def reverse_step(schedule: BridgeSchedule, x_t: VoxelGrid, s_c: VoxelGrid, f_out: VoxelGrid, t: int, eps=None) -> VoxelGrid:
    """Grid-level reverse_step_values; ``eps`` is a grid, array, or seed."""
    _require_same_geometry(x_t, s_c, f_out)
    values = reverse_step_values(
        schedule,
        x_t.data.astype(np.float64),
        s_c.data.astype(np.float64),
        f_out.data.astype(np.float64),
        t,
        _as_noise(schedule, eps, t, x_t),
    )
    return volume.grid_like(x_t, values.astype(np.float32))


def bridge_loss(f_out: VoxelGrid, target: VoxelGrid) -> float:
    _require_same_geometry(f_out, target)
    return bridge_loss_values(
        f_out.data.astype(np.float64), target.data.astype(np.float64)
    )


def sample(schedule: BridgeSchedule, plan: SamplingPlan, s_c: VoxelGrid, cset, denoiser) -> VoxelGrid:
    """Grid-level sampler; ``denoiser(x_t_grid, cset, t)`` returns a grid."""

    def denoise_fn(x, t):
        x_grid = volume.grid_like(s_c, x.astype(np.float32))
        out = denoiser(x_grid, cset, t)
        if not isinstance(out, VoxelGrid) or not out.header.same_geometry(s_c.header):
            raise DataError("denoiser violated the output geometry contract")
        return out.data.astype(np.float64)

    values = sample_values(schedule, plan, s_c.data.astype(np.float64), denoise_fn)
    return volume.grid_like(s_c, values.astype(np.float32))
