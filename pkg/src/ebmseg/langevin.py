"""Langevin-dynamics MCMC over the latent space.

Prior chains follow z <- z - delta * dE/dz + sqrt(2 delta) * eps.
Posterior chains add the data term, i.e. they descend the gradient of
E(z) + ||y - g(x,z)||^2 / (2 sigma_eps^2).

Chains are re-initialized from the Gaussian reference N(0, sigma_z^2 I)
every time; there is no persistence between training steps.  All chains in
a batch step in lockstep, each with its own noise substream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .energy import EnergyPriorParams, grad_z_energy_fast
from .tensor import Tensor, Tape, tsum

DIVERGENCE_NORM = 1.0e6


class ChainDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LangevinConfig:
    steps: int
    step_size: float
    noiseless_test_mode: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


def _init_chain(gens: Sequence[np.random.Generator], d_z: int,
                sigma_z_sq: float) -> np.ndarray:
    scale = np.sqrt(sigma_z_sq)
    return np.stack([g.standard_normal(d_z) * scale for g in gens])


def _check_divergence(z: np.ndarray, step: int) -> None:
    norms = np.linalg.norm(z, axis=-1)
    if np.any(norms > DIVERGENCE_NORM):
        raise ChainDivergenceError(
            f"Langevin chain diverged at step {step} (|z| = {norms.max():.3g})")


def run_chain(z0: np.ndarray,
              grad_fn: Callable[[np.ndarray], np.ndarray],
              cfg: LangevinConfig,
              gens: Sequence[np.random.Generator]) -> np.ndarray:
    """Generic batched Langevin loop; z0 is [B, d_z]."""
    z = np.array(z0, dtype=np.float64)
    b, d_z = z.shape
    root = np.sqrt(2.0 * cfg.step_size)
    # per-chain noise is pre-drawn in blocks; each generator's value order is
    # identical to step-by-step draws, so chains stay substream-deterministic
    block = max(1, min(cfg.steps, 8_000_000 // max(1, b * d_z)))
    k = 0
    while k < cfg.steps:
        n = min(block, cfg.steps - k)
        noise = None
        if not cfg.noiseless_test_mode:
            noise = np.stack([g.standard_normal((n, d_z)) for g in gens])
        for j in range(n):
            z = z - cfg.step_size * grad_fn(z)
            if noise is not None:
                z = z + root * noise[:, j]
            _check_divergence(z, k + j)
        k += n
    return z


def sample_prior_batch(prior: EnergyPriorParams, cfg: LangevinConfig,
                       gens: Sequence[np.random.Generator]) -> np.ndarray:
    """One prior latent per generator; returns [B, d_z]."""
    z0 = _init_chain(gens, prior.d_z, prior.sigma_z_sq)
    return run_chain(z0, lambda z: grad_z_energy_fast(prior, z), cfg, gens)


def sample_prior(prior: EnergyPriorParams, cfg: LangevinConfig,
                 gen: np.random.Generator) -> np.ndarray:
    return sample_prior_batch(prior, cfg, [gen])[0]


def sample_posterior_batch(prior: EnergyPriorParams,
                           generator_params,
                           xs: np.ndarray, ys: np.ndarray,
                           cfg: LangevinConfig,
                           gens: Sequence[np.random.Generator]) -> np.ndarray:
    """Posterior latents for a batch of (image, target mask) pairs.

    The data term is the z-gradient of ||y - g(x,z)||^2 / (2 sigma_eps^2),
    taken through the pre-threshold sigmoid output of the generator.  The
    encoder features depend only on x, so they are computed once per batch
    and reused across Langevin steps.
    """
    from .generator import encode, decode

    feats = encode(generator_params, Tensor(xs))
    target = Tensor(ys)
    inv_var = 1.0 / generator_params.sigma_eps_sq

    def grad_fn(z: np.ndarray) -> np.ndarray:
        zt = Tensor(z)
        tape = Tape()
        tape.watch(zt)
        with tape:
            pred = decode(generator_params, feats, zt)
            resid = pred - target
            obj = tsum(resid * resid) * (0.5 * inv_var)
        tape.backward(obj)
        g = tape.grad(zt)
        data_grad = np.zeros_like(z) if g is None else g
        return grad_z_energy_fast(prior, z) + data_grad

    z0 = _init_chain(gens, prior.d_z, prior.sigma_z_sq)
    return run_chain(z0, grad_fn, cfg, gens)


def sample_posterior(prior: EnergyPriorParams, generator_params,
                     x: np.ndarray, y: np.ndarray, cfg: LangevinConfig,
                     gen: np.random.Generator) -> np.ndarray:
    return sample_posterior_batch(prior, generator_params,
                                  x[None], y[None], cfg, [gen])[0]
