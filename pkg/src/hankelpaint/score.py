"""Variance-exploding noise schedule, perturbation kernel, and score oracles.

A score function is any callable ``f(x, sigma) -> array`` returning an
estimate of the gradient of the log density of the noise-perturbed data,
with the same shape as ``x``.  The analytic :class:`GaussianOracle` follows
the same contract and serves as an exact test double for the sampler.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise scales sigma_min .. sigma_max over N levels."""

    sigma_min: float = 0.01
    sigma_max: float = 378.0
    count: int = 1000

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.count < 2:
            raise ValueError("schedule needs at least 2 levels")

    def sigma_at(self, i: int) -> float:
        if not 0 <= i < self.count:
            raise IndexError(f"noise index {i} out of range [0, {self.count})")
        ratio = self.sigma_max / self.sigma_min
        return self.sigma_min * ratio ** (i / (self.count - 1))

    @property
    def sigmas(self) -> np.ndarray:
        ratio = self.sigma_max / self.sigma_min
        return self.sigma_min * ratio ** (np.arange(self.count) / (self.count - 1))


def perturb(x0: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Sample from the VE kernel N(x0, sigma^2 I)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x0.copy()
    return x0 + sigma * rng.standard_normal(x0.shape)


def kernel_score(x: np.ndarray, x0: np.ndarray, sigma: float) -> np.ndarray:
    """Exact score of the perturbation kernel: -(x - x0) / sigma^2."""
    if sigma <= 0:
        raise ValueError("kernel score requires sigma > 0")
    return -(x - x0) / (sigma * sigma)


@dataclass
class GaussianOracle:
    """Exact score of a diagonal Gaussian under VE perturbation.

    For data ~ N(mean, var) the density perturbed at scale sigma is
    N(mean, var + sigma^2), so the score is -(x - mean) / (var + sigma^2).
    """

    mean: np.ndarray
    var: np.ndarray | float = field(default=1.0)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if np.any(np.asarray(self.var) <= 0):
            raise ValueError("oracle variance must be > 0")

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        return -(x - self.mean) / (self.var + sigma * sigma)


def zero_score(x: np.ndarray, sigma: float) -> np.ndarray:
    """Degenerate model used in loss baselines and plumbing tests."""
    return np.zeros_like(x)


def dsm_loss(model, batch, schedule: NoiseSchedule,
             rng: np.random.Generator) -> float:
    """Denoising-score-matching loss over a batch of clean tensors.

    For each item one noise index is drawn uniformly, the item is perturbed,
    and the weighted squared score error gamma(sigma) * ||s(x_t) - k(x_t)||^2
    is accumulated, where k is the kernel score and gamma(sigma) = sigma^2.
    Returns the batch mean.
    """
    items = list(batch)
    if not items:
        raise ValueError("dsm_loss needs a nonempty batch")
    total = 0.0
    for x0 in items:
        i = int(rng.integers(schedule.count))
        sigma = schedule.sigma_at(i)
        x_t = perturb(x0, sigma, rng)
        target = kernel_score(x_t, x0, sigma)
        err = model(x_t, sigma) - target
        total += (sigma * sigma) * float(np.sum(err * err))
    return total / len(items)
