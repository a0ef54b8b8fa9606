"""Image quality metrics used for all evaluation: PSNR with channel-pooled
MSE and Gaussian-window SSIM, plus the segmentation scores the eval command
reports."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_LUMA = np.array([0.299, 0.587, 0.114])

PSNR_BANDS = (
    (40.0, "excellent: hardly distinguishable from the original"),
    (30.0, "acceptable: distortion within tolerable range"),
    (20.0, "poor image quality"),
    (-np.inf, "severe image distortion"),
)


def psnr(gt, pred, max_value=1.0):
    """10*log10(max^2 / MSE) with the MSE pooled over all pixels and channels.

    Identical images return +inf.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"image shapes differ: {gt.shape} vs {pred.shape}")
    mse = np.mean((gt - pred) ** 2)
    if mse == 0:
        return np.inf
    return 10.0 * np.log10(max_value * max_value / mse)


def psnr_band(value):
    """Qualitative band for a PSNR value in dB."""
    for threshold, text in PSNR_BANDS:
        if value >= threshold:
            return text
    return PSNR_BANDS[-1][1]


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    max_value: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window_size % 2 != 1:
            raise ValueError("window size must be odd")


def rgb_to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ _LUMA
    return img


def _gaussian_kernel(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _window_means(img, kernel):
    # separable valid-mode filtering
    out = sliding_window_view(img, len(kernel), axis=0) @ kernel
    return sliding_window_view(out, len(kernel), axis=1) @ kernel


def ssim(x, y, cfg=SsimConfig()):
    """Mean structural similarity over Gaussian-weighted sliding windows.

    RGB images are converted to luma first.  With the default unit exponents
    the contrast and structure terms collapse into the familiar two-factor
    expression (their stabilizer being half the contrast one).
    """
    x = rgb_to_luma(x)
    y = rgb_to_luma(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.window_size:
        raise ValueError("window larger than image")
    c1 = (cfg.k1 * cfg.max_value) ** 2
    c2 = (cfg.k2 * cfg.max_value) ** 2
    k = _gaussian_kernel(cfg.window_size, cfg.window_sigma)
    mu_x = _window_means(x, k)
    mu_y = _window_means(y, k)
    var_x = _window_means(x * x, k) - mu_x * mu_x
    var_y = _window_means(y * y, k) - mu_y * mu_y
    cov = _window_means(x * y, k) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    if cfg.alpha == cfg.beta == cfg.gamma == 1.0:
        cs = (2.0 * cov + c2) / (var_x + var_y + c2)
        return float(np.mean(lum * cs))
    c3 = c2 / 2.0
    sd_x = np.sqrt(np.maximum(var_x, 0.0))
    sd_y = np.sqrt(np.maximum(var_y, 0.0))
    con = (2.0 * sd_x * sd_y + c2) / (var_x + var_y + c2)
    struct = (cov + c3) / (sd_x * sd_y + c3)
    return float(np.mean(lum ** cfg.alpha * con ** cfg.beta * struct ** cfg.gamma))


def pixel_accuracy(gt_labels, pred_labels):
    gt_labels = np.asarray(gt_labels)
    pred_labels = np.asarray(pred_labels)
    if gt_labels.shape != pred_labels.shape:
        raise ValueError("label shapes differ")
    return float(np.mean(gt_labels == pred_labels))


def class_iou(gt_labels, pred_labels, class_count):
    """Per-class intersection over union; NaN for classes absent everywhere."""
    gt_labels = np.asarray(gt_labels)
    pred_labels = np.asarray(pred_labels)
    out = np.full(class_count, np.nan)
    for c in range(class_count):
        g = gt_labels == c
        p = pred_labels == c
        union = np.count_nonzero(g | p)
        if union:
            out[c] = np.count_nonzero(g & p) / union
    return out


def binary_iou(gt_mask, pred_mask):
    union = np.count_nonzero(gt_mask | pred_mask)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(gt_mask & pred_mask) / union)


def target_region_ssim(gt, pred, gt_labels, target_classes, pad=4, cfg=SsimConfig()):
    """SSIM restricted to the padded bounding box of the target classes.

    Measures target fidelity independently of the (possibly recolored)
    background; falls back to whole-image SSIM when no target pixel exists.
    """
    gt_labels = np.asarray(gt_labels)
    mask = np.isin(gt_labels, list(target_classes))
    if not mask.any():
        return ssim(gt, pred, cfg)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    r0 = max(0, rows[0] - pad)
    r1 = min(gt_labels.shape[0], rows[-1] + 1 + pad)
    c0 = max(0, cols[0] - pad)
    c1 = min(gt_labels.shape[1], cols[-1] + 1 + pad)
    # grow the crop if the target is smaller than one SSIM window
    while r1 - r0 < cfg.window_size:
        r0 = max(0, r0 - 1)
        r1 = min(gt_labels.shape[0], r1 + 1)
        if r0 == 0 and r1 == gt_labels.shape[0]:
            break
    while c1 - c0 < cfg.window_size:
        c0 = max(0, c0 - 1)
        c1 = min(gt_labels.shape[1], c1 + 1)
        if c0 == 0 and c1 == gt_labels.shape[1]:
            break
    return ssim(np.asarray(gt)[r0:r1, c0:c1], np.asarray(pred)[r0:r1, c0:c1], cfg)
