"""Image quality metrics on float images in [0, 1]."""

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for data range 1, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b, sigma: float = 1.5, win_size: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window.

    Local statistics use population (biased) moments; the border where the
    window does not fit is cropped before averaging.  Channels are scored
    independently and averaged.  Windows larger than the image shrink to the
    largest odd size that fits.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    win = min(win_size, h if h % 2 else h - 1, w if w % 2 else w - 1)
    if win < 1:
        raise ValueError("image too small for SSIM")
    truncate = ((win - 1) / 2) / sigma
    pad = (win - 1) // 2
    c1, c2 = k1**2, k2**2

    def filt(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate, mode="reflect")

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        smap = num / den
        scores.append(smap[pad : h - pad, pad : w - pad].mean())
    return float(np.mean(scores))
