"""Standard Gaussian-endpoint diffusion, used as a non-bridge ablation.

Instead of pinning the process at the fused cortex SDF, this corrupts
volumes toward pure noise with the usual variance-preserving forward
process and an epsilon-prediction target. The shape information that the
bridge carries through its endpoint is supplied here as an extra
condition channel, so the same network and trainer run unchanged.

Sampling is plain deterministic DDIM over a descending timestep plan,
with the clean-volume estimate clipped to the normalized value range.
"""

from __future__ import annotations

import numpy as np

from . import bridge, volume
from .errors import DataError, GeometryMismatchError
from .volume import VoxelGrid

_BETA_START = 1e-4
_BETA_END = 0.02
_BETA_REFERENCE_STEPS = 1000
_BETA_MAX = 0.999
_CLIP = 1.0


def noise_schedule(steps: int):
    """Linear betas scaled by 1000/T, and cumulative signal fractions.

    Returns (betas, alpha_bar) as length T+1 arrays indexed by t with
    beta[0] = 0 and alpha_bar[0] = 1.
    """
    if steps < 2:
        raise DataError(f"need at least 2 steps, got {steps}")
    scale = _BETA_REFERENCE_STEPS / steps
    betas = np.linspace(_BETA_START * scale, _BETA_END * scale, steps)
    betas = np.minimum(betas, _BETA_MAX)
    betas = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bar.setflags(write=False)
    return betas, alpha_bar


class GaussianProcess:
    """Forward corruption and training target of the ablation process."""

    kind = "gaussian"

    def __init__(self, steps: int):
        self.steps = steps
        self.betas, self.alpha_bar = noise_schedule(steps)

    def corrupt_and_target(self, x0, endpoint, t: int, eps):
        """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps; target is eps.

        The endpoint argument exists for interface parity with the bridge
        process and is ignored: this process ends in pure noise.
        """
        if not 1 <= t <= self.steps:
            raise DataError(f"timestep {t} outside [1, {self.steps}]")
        abar = self.alpha_bar[t]
        signal = np.float32(np.sqrt(abar))
        noise = np.float32(np.sqrt(1.0 - abar))
        x_t = signal * x0 + noise * eps
        return x_t, eps


def sample_values(
    process: GaussianProcess,
    plan: bridge.SamplingPlan,
    dims,
    denoise_fn,
    noise_fn=None,
):
    """Deterministic DDIM from pure noise along the plan's timesteps.

    ``denoise_fn(x, t)`` predicts the noise content of ``x`` at step t.
    The initial draw comes from ``noise_fn(t)`` (default: the seeded
    stream keyed by the plan's first step).
    """
    if plan.taus[0] != process.steps:
        raise DataError(
            f"plan must start at T = {process.steps}, got {plan.taus[0]}"
        )
    if plan.eta != 0.0:
        raise DataError("the ablation sampler is deterministic (eta must be 0)")
    if noise_fn is None:
        def noise_fn(t):
            return bridge.noise_for(plan.seed, t, dims)

    taus = list(plan.taus) + [0]
    x = noise_fn(taus[0]).astype(np.float32)
    for cur, prev in zip(taus[:-1], taus[1:]):
        eps_hat = np.asarray(denoise_fn(x, cur), dtype=np.float32)
        if eps_hat.shape != x.shape:
            raise GeometryMismatchError(
                f"denoiser returned shape {eps_hat.shape}, expected {x.shape}"
            )
        abar_cur = process.alpha_bar[cur]
        x0_hat = (x - np.float32(np.sqrt(1.0 - abar_cur)) * eps_hat) / np.float32(
            np.sqrt(abar_cur)
        )
        x0_hat = np.clip(x0_hat, -_CLIP, _CLIP)
        abar_prev = process.alpha_bar[prev]
        x = (
            np.float32(np.sqrt(abar_prev)) * x0_hat
            + np.float32(np.sqrt(1.0 - abar_prev)) * eps_hat
        )
    return x.astype(np.float32)


def sample(
    process: GaussianProcess,
    plan: bridge.SamplingPlan,
    reference: VoxelGrid,
    conditions,
    model,
) -> VoxelGrid:
    """Grid-level ablation sampling with conditions as input channels.

    ``reference`` supplies the output geometry (any co-registered grid).
    """
    import torch

    from .denoiser import gather_condition_arrays

    cond = gather_condition_arrays(model.config, conditions)
    for arr in cond:
        if arr.shape != reference.dims:
            raise GeometryMismatchError(
                f"condition shape {arr.shape} does not match {reference.dims}"
            )
    cond_stack = np.stack([a.astype(np.float32) for a in cond]) if cond else None

    def denoise_fn(x, t):
        channels = [x[None]] if cond_stack is None else [x[None], cond_stack]
        batch = torch.from_numpy(np.concatenate(channels)[None])
        with torch.no_grad():
            out = model(batch, torch.tensor([t]))
        return out[0, 0].numpy()

    data = sample_values(process, plan, reference.dims, denoise_fn)
    return volume.grid_like(reference, data, kind="intensity")
