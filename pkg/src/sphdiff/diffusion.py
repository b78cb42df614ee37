"""Forward noising, the noise-prediction training loss, and reverse samplers.

The reverse update follows

    A^{k-1} = alpha_k * (A^k - gamma_k * eps_theta(C, A^k, k) + z),
    z ~ N(0, sigma_k^2 I)

with alpha_k = 1/sqrt(1 - beta_k) and gamma_k = beta_k / sqrt(1 - abar_k).
sigma_k is chosen so the realized noise after the alpha_k scaling equals the
standard posterior std, and sigma_1 = 0 so the final step is deterministic.

Noise is drawn isotropically over all 13 embedding channels per arm per
step (positions, rotation columns, aperture alike); decoded rotations are
re-orthonormalized only at execution time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import CoeffsNode


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine beta schedule; arrays are indexed by step k = 1..K (index 0 pads
    abar_0 = 1).  alpha_step/gamma/sigma are the per-step reverse coefficients."""

    steps: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_step: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray

    def to_dict(self) -> dict:
        return {"steps": self.steps, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["steps"]), d.get("kind", "cosine"))


def make_schedule(steps: int = 100, kind: str = "cosine") -> NoiseSchedule:
    if steps < 1:
        raise ValueError("need at least one diffusion step")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    s = 0.008
    ts = np.arange(steps + 1) / steps
    f = np.cos((ts + s) / (1 + s) * math.pi / 2.0) ** 2
    abar = f / f[0]
    betas = np.zeros(steps + 1)
    betas[1:] = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    alphas = 1.0 - betas
    abar = np.concatenate([[1.0], np.cumprod(alphas[1:])])
    alpha_step = np.zeros(steps + 1)
    gamma = np.zeros(steps + 1)
    sigma = np.zeros(steps + 1)
    for k in range(1, steps + 1):
        alpha_step[k] = 1.0 / math.sqrt(alphas[k])
        gamma[k] = betas[k] / math.sqrt(1.0 - abar[k])
        beta_tilde = (1.0 - abar[k - 1]) / (1.0 - abar[k]) * betas[k]
        sigma[k] = math.sqrt(alphas[k] * beta_tilde)
    return NoiseSchedule(steps, kind, betas, alphas, abar, alpha_step, gamma, sigma)


def _coef(values: np.ndarray, k, like: np.ndarray) -> np.ndarray:
    """Per-sample coefficients broadcast against [B?, T, D] arrays."""
    c = np.asarray(values)[np.asarray(k)]
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim))


def add_noise(a0: np.ndarray, eps: np.ndarray, k, sched: NoiseSchedule) -> np.ndarray:
    """A^k = sqrt(abar_k) A^0 + sqrt(1 - abar_k) eps."""
    a0 = np.asarray(a0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != a0.shape:
        raise ValueError(f"noise shape {eps.shape} != action shape {a0.shape}")
    abar = _coef(sched.alpha_bars, k, a0)
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def training_loss(
    model,
    cond: CoeffsNode,
    a0: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    noise_transform=None,
) -> ad.Node:
    """Mean per-sample squared error of the noise estimate at a uniformly
    drawn step; differentiable through the model (and the condition graph)."""
    a0 = np.asarray(a0, dtype=float)
    batched = a0.ndim == 3
    k = rng.integers(1, sched.steps + 1, size=a0.shape[0] if batched else None)
    eps = rng.standard_normal(a0.shape)
    if noise_transform is not None:
        eps = noise_transform(eps)
    noisy = add_noise(a0, eps, k, sched)
    pred = model.forward(cond, noisy, k)
    diff = ad.sub(pred, ad.Node(eps))
    total = ad.reduce_sum(ad.mul(diff, diff))
    return ad.scale(total, 1.0 / a0.shape[0]) if batched else total


def _norm_clip(a: np.ndarray, max_rms: float | None) -> np.ndarray:
    """Rescale each sample so its per-coefficient RMS stays below max_rms.

    A safety rail against divergence of badly trained denoisers; it rescales
    whole samples, so unlike per-coordinate clipping it commutes exactly with
    rotations.  Inactive for well-behaved trajectories.
    """
    if max_rms is None:
        return a
    rms = np.sqrt(np.mean(a * a, axis=(-2, -1), keepdims=True))
    return a * np.minimum(1.0, max_rms / np.maximum(rms, 1e-30))


def ddpm_sample(
    model,
    cond: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    shape: tuple[int, ...] | None = None,
    a_init: np.ndarray | None = None,
    noise_transform=None,
    sigma_scale: float = 1.0,
    max_rms: float | None = 5.0,
) -> np.ndarray:
    """Iterate the stochastic reverse update from A^K down to A^0.

    One Gaussian draw is consumed per step (plus the initial draw when
    ``a_init`` is not given), so two runs with paired rngs stay aligned;
    ``noise_transform`` is applied to every draw.
    """
    if a_init is None:
        if shape is None:
            raise ValueError("need either a_init or shape")
        a_init = rng.standard_normal(shape)
        if noise_transform is not None:
            a_init = noise_transform(a_init)
    a = np.asarray(a_init, dtype=float)
    for k in range(sched.steps, 0, -1):
        eps_hat = model(cond, a, k)
        z = rng.standard_normal(a.shape)
        if noise_transform is not None:
            z = noise_transform(z)
        a = sched.alpha_step[k] * (a - sched.gamma[k] * eps_hat + sigma_scale * sched.sigma[k] * z)
        a = _norm_clip(a, max_rms)
    return a


def ddim_steps(total: int, steps: int) -> np.ndarray:
    """Descending subset of step indices used by the accelerated sampler."""
    if not 1 <= steps <= total:
        raise ValueError(f"steps must be in 1..{total}, got {steps}")
    return np.unique(np.round(np.linspace(1, total, steps)).astype(int))[::-1]


def ddim_sample(
    model,
    cond: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    steps: int = 8,
    shape: tuple[int, ...] | None = None,
    a_init: np.ndarray | None = None,
    noise_transform=None,
    max_rms: float | None = 5.0,
) -> np.ndarray:
    """Deterministic accelerated sampler (no noise injection) over a
    stride-subsampled step set; only the initial A^K is random."""
    if a_init is None:
        if shape is None or rng is None:
            raise ValueError("need a_init, or shape plus an rng for the initial draw")
        a_init = rng.standard_normal(shape)
        if noise_transform is not None:
            a_init = noise_transform(a_init)
    a = np.asarray(a_init, dtype=float)
    ks = ddim_steps(sched.steps, steps)
    for i, k in enumerate(ks):
        k_next = ks[i + 1] if i + 1 < len(ks) else 0
        abar_k = sched.alpha_bars[k]
        abar_n = sched.alpha_bars[k_next]
        eps_hat = model(cond, a, int(k))
        a0_hat = (a - math.sqrt(1.0 - abar_k) * eps_hat) / math.sqrt(abar_k)
        a0_hat = _norm_clip(a0_hat, max_rms)
        a = math.sqrt(abar_n) * a0_hat + math.sqrt(1.0 - abar_n) * eps_hat
    return a
