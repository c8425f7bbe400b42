"""PSNR and SSIM restoration-quality metrics for [0, 1] RGB images."""

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """20 log10(1 / RMSE) in dB, capped at 100 for (near-)identical inputs."""
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    t = np.arange(size) - half
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed(channel: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local sums of a 2-D channel."""
    from numpy.lib.stride_tricks import sliding_window_view
    view = sliding_window_view(channel, win.shape)
    return np.tensordot(view, win, axes=((2, 3), (0, 1)))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean structural similarity over channels and valid window positions.

    Statistics use an 11x11 Gaussian window (sigma 1.5) with the standard
    stabilizers c1 = 1e-4 and c2 = 9e-4 for unit dynamic range.
    """
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        ref = ref[:, :, None]
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    vals = []
    for c in range(x.shape[2]):
        a = x[:, :, c]
        b = ref[:, :, c]
        mu_a = _windowed(a, win)
        mu_b = _windowed(b, win)
        var_a = _windowed(a * a, win) - mu_a * mu_a
        var_b = _windowed(b * b, win) - mu_b * mu_b
        cov = _windowed(a * b, win) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        vals.append(num / den)
    return float(np.mean(vals))
