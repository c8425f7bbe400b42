"""Discretized reverse-time VE-SDE predictor and annealed Langevin corrector.

Both steps are stateless pure functions over arrays of any shape; callers own
the rng streams (one per chain) and the outer iteration.
"""

from dataclasses import dataclass

import numpy as np

from .score import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000        # outer (predictor) discretization levels
    corrector_steps: int = 1   # Langevin refinements per outer step
    snr: float = 0.21

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.corrector_steps < 0:
            raise ValueError("corrector_steps must be >= 0")
        if self.snr <= 0:
            raise ValueError("snr must be > 0")


def init_sample(schedule: NoiseSchedule, shape,
                rng: np.random.Generator) -> np.ndarray:
    """Draw the chain start from the VE prior N(0, sigma_max^2 I)."""
    return schedule.sigma_at(schedule.count - 1) * rng.standard_normal(shape)


def predictor_step(x: np.ndarray, i: int, score, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """Reverse-diffusion step from noise level i+1 down to level i.

    x <- x + (s_{i+1}^2 - s_i^2) * score(x, s_{i+1}) + sqrt(s_{i+1}^2 - s_i^2) * z
    """
    if not 0 <= i < schedule.count - 1:
        raise IndexError(f"predictor index {i} out of range [0, {schedule.count - 1})")
    s_hi = schedule.sigma_at(i + 1)
    s_lo = schedule.sigma_at(i)
    gap = s_hi * s_hi - s_lo * s_lo
    z = rng.standard_normal(x.shape)
    out = x + gap * score(x, s_hi) + np.sqrt(gap) * z
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"predictor produced non-finite state at level {i}")
    return out


def corrector_step(x: np.ndarray, i: int, score, cfg: SamplerConfig,
                   schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One annealed Langevin refinement at noise level i.

    The step size eps = 2 * (snr * ||z|| / ||g||)^2 keeps a fixed
    signal-to-noise ratio; a zero gradient leaves the state unchanged.
    """
    if not 0 <= i < schedule.count:
        raise IndexError(f"corrector index {i} out of range [0, {schedule.count})")
    g = score(x, schedule.sigma_at(i))
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        return x
    z = rng.standard_normal(x.shape)
    z_norm = float(np.linalg.norm(z))
    eps = 2.0 * (cfg.snr * z_norm / g_norm) ** 2
    out = x + eps * g + np.sqrt(2.0 * eps) * z
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"corrector produced non-finite state at level {i}")
    return out
