"""Factored low-rank projection of Hankel matrices via ADMM.

The updates (applied in order, once per sweep) are

    U <- mu (M + Lam) V (I + mu V^T V)^-1
    V <- mu (M + Lam)^T U (I + mu U^T U)^-1
    Lam <- M - U V^T + Lam
    X_LR <- U V^T - Lam

with real factors U (L x r), V (K x r) and multiplier Lam (L x K).  The
factors are initialized SVD-free: U is an orthonormalized random matrix and
V the least-squares fit V = M^T U.  State persists across sampler iterations
within one patch chain.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .hankel import FoldedTensor, HankelMatrix, unfold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmConfig:
    rank: int = 48
    mu: float = 1.0
    sweeps: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0")


@dataclass
class AdmmState:
    u: np.ndarray     # (L, r)
    v: np.ndarray     # (K, r)
    lam: np.ndarray   # (L, K)
    config: AdmmConfig


def init_state(matrix: HankelMatrix, cfg: AdmmConfig,
               rng: np.random.Generator) -> AdmmState:
    """LMAFit-style SVD-free factor initialization with a zero multiplier."""
    L, K = matrix.data.shape
    if cfg.rank > min(L, K):
        raise ValueError(f"rank {cfg.rank} exceeds min dimension {min(L, K)}")
    gauss = rng.standard_normal((L, cfg.rank))
    u, _ = np.linalg.qr(gauss)
    v = matrix.data.T @ u
    return AdmmState(u=u, v=v, lam=np.zeros((L, K)), config=cfg)


def _solve_gram(rhs: np.ndarray, gram: np.ndarray, mu: float) -> np.ndarray:
    """Solve X (I + mu G) = rhs for X, regularizing a singular system."""
    r = gram.shape[0]
    system = np.eye(r) + mu * gram
    try:
        return np.linalg.solve(system.T, rhs.T).T
    except np.linalg.LinAlgError:
        log.warning("singular %dx%d ADMM solve, adding 1e-12 ridge", r, r)
        return np.linalg.solve(system.T + 1e-12 * np.eye(r), rhs.T).T


def admm_sweep(state: AdmmState, m: np.ndarray):
    """Run cfg.sweeps update rounds against the target matrix m.

    Returns (state, x_lr) where x_lr = U V^T - Lam after the final round
    (with sweeps = 0 it is formed from the incoming state unchanged).
    """
    if m.shape != state.lam.shape:
        raise ValueError(f"matrix shape {m.shape} != state {state.lam.shape}")
    cfg = state.config
    u, v, lam = state.u, state.v, state.lam
    for _ in range(cfg.sweeps):
        anchor = m + lam
        u = cfg.mu * _solve_gram(anchor @ v, v.T @ v, cfg.mu)
        v = cfg.mu * _solve_gram(anchor.T @ u, u.T @ u, cfg.mu)
        lam = m - u @ v.T + lam
    x_lr = u @ v.T - lam
    state = AdmmState(u=u, v=v, lam=lam, config=cfg)
    return state, x_lr


def project(tensor: FoldedTensor, state: AdmmState):
    """Unfold the sampler tensor and apply the low-rank ADMM update.

    Returns (x_lr as a HankelMatrix, carried state).
    """
    matrix = unfold(tensor)
    state, x_lr = admm_sweep(state, matrix.data)
    return HankelMatrix(matrix.layout, x_lr), state
