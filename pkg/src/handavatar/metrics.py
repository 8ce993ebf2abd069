"""Image and mask metrics: IoU, L1, PSNR, MS-SSIM."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SIGMA = 1.5
TRUNCATE = 3.5  # 11-tap window at sigma 1.5
K1, K2 = 0.01, 0.03


def _check(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    a, b = _check(a, b)
    a, b = a.astype(bool), b.astype(bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


def l1(a, b) -> float:
    a, b = _check(a, b)
    return float(np.abs(a.astype(float) - b.astype(float)).mean())


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _check(a, b)
    mse = float(((a.astype(float) - b.astype(float)) ** 2).mean())
    return float("inf") if mse == 0 else float(10 * np.log10(data_range ** 2 / mse))


def _blur(x):
    return ndimage.gaussian_filter(x, SIGMA, truncate=TRUNCATE, mode="reflect")


def _ssim_cs(x, y, data_range):
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float((lum * cs).mean()), float(cs.mean())


def _down(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_channel(x, y, data_range: float = 1.0) -> float:
    vals = []
    for k in range(len(MS_SSIM_WEIGHTS)):
        ssim, cs = _ssim_cs(x, y, data_range)
        vals.append(ssim if k == len(MS_SSIM_WEIGHTS) - 1 else cs)
        if k < len(MS_SSIM_WEIGHTS) - 1:
            x, y = _down(x), _down(y)
    vals = np.maximum(np.array(vals), 0.0)
    return float(np.prod(vals ** MS_SSIM_WEIGHTS))


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Five-scale MS-SSIM (Gaussian window sigma 1.5), averaged over channels."""
    a, b = _check(a, b)
    a, b = a.astype(float), b.astype(float)
    if a.ndim == 2:
        return ms_ssim_channel(a, b, data_range)
    return float(np.mean([ms_ssim_channel(a[..., c], b[..., c], data_range) for c in range(a.shape[-1])]))


def composite_white(image, mask):
    """Input image with everything outside ``mask`` set to white."""
    return np.where(np.asarray(mask, bool)[..., None], image, 1.0)
