"""Reconstruction quality metrics: MSE, PSNR, and a windowed SSIM.

All three accept numpy arrays of matching shape with values in [0, R]
(R = data_range). SSIM expects a spatial layout (H, W) or (H, W, C) and uses
uniform square windows sized to fit small grids; MSE/PSNR are layout-free.
"""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 100.0


def mse(x: np.ndarray, xhat: np.ndarray) -> float:
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {xhat.shape}")
    return float(np.mean((x.astype(np.float64) - xhat.astype(np.float64)) ** 2))


def psnr(x: np.ndarray, xhat: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(R^2 / mse), capped at 100 dB for (near-)exact reconstructions."""
    err = mse(x, xhat)
    if err < data_range**2 * 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range**2 / err))


def ssim(x: np.ndarray, xhat: np.ndarray, data_range: float = 1.0,
         window: int = 5) -> float:
    """Mean structural similarity over uniform windows and channels.

    Window shrinks to fit images smaller than ``window``; variances use the
    population convention. Result lies in [-1, 1] and equals 1 only for an
    exact reconstruction.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {xhat.shape}")
    if x.ndim == 2:
        x = x[..., None]
        xhat = xhat[..., None]
    if x.ndim != 3:
        raise ValueError(f"ssim expects (H, W) or (H, W, C); got {x.shape}")
    h, w, _ = x.shape
    win = max(1, min(window, h, w))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    vals = []
    for ch in range(x.shape[2]):
        a = np.lib.stride_tricks.sliding_window_view(x[:, :, ch], (win, win))
        b = np.lib.stride_tricks.sliding_window_view(xhat[:, :, ch], (win, win))
        mu_a = a.mean(axis=(-2, -1))
        mu_b = b.mean(axis=(-2, -1))
        var_a = (a**2).mean(axis=(-2, -1)) - mu_a**2
        var_b = (b**2).mean(axis=(-2, -1)) - mu_b**2
        cov = (a * b).mean(axis=(-2, -1)) - mu_a * mu_b
        score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        vals.append(score.mean())
    return float(np.mean(vals))


def metric_triple(x: np.ndarray, xhat: np.ndarray, spatial_shape: tuple,
                  data_range: float = 1.0) -> tuple[float, float, float]:
    """(mse, psnr, ssim) for a flat observation vector.

    MSE/PSNR cover the full vector; SSIM covers the spatial prefix reshaped
    to ``spatial_shape`` (any trailing non-spatial extras are excluded).
    """
    n = int(np.prod(spatial_shape))
    return (
        mse(x, xhat),
        psnr(x, xhat, data_range),
        ssim(x[:n].reshape(spatial_shape), xhat[:n].reshape(spatial_shape), data_range),
    )
