"""Reconstruction quality measures: relative error and structural similarity."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .phantoms import ImageSequence


@dataclass
class QualityScore:
    rre: float
    ssim: float
    rre_per_frame: list | None = None
    ssim_per_frame: list | None = None


def rre(u, u_true) -> float:
    """Relative reconstruction error ||u - u_true|| / ||u_true||."""
    u = np.asarray(u, dtype=np.float64).ravel()
    u_true = np.asarray(u_true, dtype=np.float64).ravel()
    if u.size != u_true.size:
        raise ValueError(f"length mismatch: {u.size} vs {u_true.size}")
    denom = float(np.linalg.norm(u_true))
    if denom == 0.0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(u - u_true)) / denom


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = (kernel.size - 1) // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half] if half else out


def ssim_frame(a: np.ndarray, b: np.ndarray, data_range: float,
               win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean Gaussian-windowed structural similarity of one frame pair.

    Standard constants C1 = (0.01 R)^2, C2 = (0.03 R)^2; statistics use full
    windows only (borders cropped).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    win = min(win_size, min(a.shape))
    if win % 2 == 0:
        win -= 1
    kernel = _gaussian_window(win, sigma)
    r = data_range if data_range > 0 else 1.0
    c1 = (0.01 * r) ** 2
    c2 = (0.03 * r) ** 2
    mu_a = _window_mean(a, kernel)
    mu_b = _window_mean(b, kernel)
    var_a = _window_mean(a * a, kernel) - mu_a * mu_a
    var_b = _window_mean(b * b, kernel) - mu_b * mu_b
    cov = _window_mean(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(u: ImageSequence, u_true: ImageSequence) -> float:
    """Mean over frames of the windowed SSIM.

    The dynamic range is taken over the union of both sequences, which keeps
    the measure symmetric in its arguments.
    """
    if u.shape != u_true.shape:
        raise ValueError(f"sequence shapes differ: {u.shape} vs {u_true.shape}")
    data_range = float(
        max(u.data.max(), u_true.data.max()) - min(u.data.min(), u_true.data.min())
    )
    vals = [
        ssim_frame(u.frame(t), u_true.frame(t), data_range) for t in range(u.n_t)
    ]
    return float(np.mean(vals))


def score_sequences(u: ImageSequence, u_true: ImageSequence) -> QualityScore:
    """Per-frame RRE/SSIM plus their means (the summary-table quantities)."""
    if u.shape != u_true.shape:
        raise ValueError(f"sequence shapes differ: {u.shape} vs {u_true.shape}")
    data_range = float(
        max(u.data.max(), u_true.data.max()) - min(u.data.min(), u_true.data.min())
    )
    rre_pf, ssim_pf = [], []
    for t in range(u.n_t):
        a, b = u.frame(t), u_true.frame(t)
        denom = float(np.linalg.norm(b))
        rre_pf.append(float(np.linalg.norm(a - b)) / denom if denom > 0 else np.nan)
        ssim_pf.append(ssim_frame(a, b, data_range))
    return QualityScore(
        rre=float(np.nanmean(rre_pf)),
        ssim=float(np.mean(ssim_pf)),
        rre_per_frame=rre_pf,
        ssim_per_frame=ssim_pf,
    )
