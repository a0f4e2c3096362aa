"""Evaluation metrics for reflectance sequences and label sequences.

Reflectance: PSNR, RMSE, MAE, SSIM (11x11 Gaussian window, sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, dynamic range 1), and the mean spectral angle
in degrees. Labels: per-class IoU / mIoU and a documented convention for
change scores over label sequences (see ``CHANGE_SCORE_CONVENTION``).
"""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP_DB = 100.0
SAM_EPS = 1e-8

# The change-score formulas are a versioned artifact convention:
#   BC  = IoU of the between-consecutive-frames binary change masks
#   SC  = mean IoU over (from, to) transition categories on changed pixels
#   SCS = (BC + SC) / 2
# A no-change/no-positive situation scores 1 by convention.
CHANGE_SCORE_CONVENTION = "change-scores-v1"


def _check_shapes(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def mse(pred, gt, peak: float = 1.0) -> float:
    pred, gt = _check_shapes(pred, gt, "mse")
    pred = np.clip(pred, 0.0, peak)
    gt = np.clip(gt, 0.0, peak)
    return float(np.mean((pred - gt) ** 2))


def psnr(pred, gt, peak: float = 1.0) -> float:
    m = mse(pred, gt, peak)
    if m == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / m))


def rmse(pred, gt, peak: float = 1.0) -> float:
    return math.sqrt(mse(pred, gt, peak))


def mae(pred, gt, peak: float = 1.0) -> float:
    pred, gt = _check_shapes(pred, gt, "mae")
    pred = np.clip(pred, 0.0, peak)
    gt = np.clip(gt, 0.0, peak)
    return float(np.mean(np.abs(pred - gt)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode 2D correlation with the window."""
    k = window.shape[0]
    h, w = img.shape
    out = np.empty((h - k + 1, w - k + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = float(np.sum(img[i:i + k, j:j + k] * window))
    return out


def ssim(pred, gt, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Single-band SSIM; multi-band inputs (C, H, W) are averaged per band.

    Inputs smaller than 11x11 fall back to a window covering the full image.
    """
    pred, gt = _check_shapes(pred, gt, "ssim")
    if pred.ndim == 3:
        return float(np.mean([ssim(p, g, c1, c2) for p, g in zip(pred, gt)]))
    if pred.ndim != 2:
        raise ValueError(f"ssim expects 2D or 3D input, got {pred.ndim}D")
    size = min(11, pred.shape[0], pred.shape[1])
    window = _gaussian_window(size)
    mu_p = _window_filter(pred, window)
    mu_g = _window_filter(gt, window)
    var_p = _window_filter(pred * pred, window) - mu_p ** 2
    var_g = _window_filter(gt * gt, window) - mu_g ** 2
    cov = _window_filter(pred * gt, window) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def sam(pred, gt) -> tuple[float, int]:
    """Mean per-pixel spectral angle in degrees; (C, ...) spectra.

    Returns (mean angle, skipped pixel count); pixels where either norm is
    below SAM_EPS are skipped. Raises when every pixel is skipped.
    """
    pred, gt = _check_shapes(pred, gt, "sam")
    if pred.shape[0] < 2:
        raise ValueError("spectral angle needs at least 2 channels")
    p = pred.reshape(pred.shape[0], -1)
    g = gt.reshape(gt.shape[0], -1)
    np_norm = np.linalg.norm(p, axis=0)
    ng_norm = np.linalg.norm(g, axis=0)
    valid = (np_norm >= SAM_EPS) & (ng_norm >= SAM_EPS)
    skipped = int((~valid).sum())
    if not valid.any():
        raise ValueError(f"spectral angle undefined: all {skipped} pixels skipped")
    # norms are validated above, so the division needs no epsilon; adding
    # one would bias identical spectra away from exactly zero degrees
    cosine = (p[:, valid] * g[:, valid]).sum(axis=0) / (
        np_norm[valid] * ng_norm[valid])
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(angles.mean()), skipped


def miou(pred_labels, gt_labels, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean; classes absent from both sides excluded."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError(f"label outside [0, {num_classes})")
    ious = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        g = gt == k
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious[k] = np.logical_and(p, g).sum() / union
    present = ~np.isnan(ious)
    return ious, float(np.nanmean(ious)) if present.any() else 0.0


def _mask_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    union = np.logical_or(pred_mask, gt_mask).sum()
    if union == 0:
        return 1.0  # no positives anywhere: perfect by convention
    return float(np.logical_and(pred_mask, gt_mask).sum() / union)


def change_scores(pred_seq, gt_seq) -> dict:
    """Binary/semantic change quality over aligned label sequences (T, H, W)."""
    pred = np.asarray(pred_seq)
    gt = np.asarray(gt_seq)
    if pred.shape != gt.shape:
        raise ValueError(f"change_scores: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 2:
        return {"convention": CHANGE_SCORE_CONVENTION,
                "bc": None, "sc": None, "scs": None,
                "note": "change scores undefined for single-frame sequences"}

    pred_change = pred[1:] != pred[:-1]
    gt_change = gt[1:] != gt[:-1]
    bc = _mask_iou(pred_change, gt_change)

    changed = np.logical_or(pred_change, gt_change)
    cats = set()
    if changed.any():
        a, b = pred[:-1][changed], pred[1:][changed]
        cats.update(zip(a.tolist(), b.tolist()))
        a, b = gt[:-1][changed], gt[1:][changed]
        cats.update(zip(a.tolist(), b.tolist()))
        cats = {c for c in cats if c[0] != c[1]}
    if not cats:
        sc = 1.0
    else:
        ious = []
        for frm, to in sorted(cats):
            p = (pred[:-1] == frm) & (pred[1:] == to) & changed
            g = (gt[:-1] == frm) & (gt[1:] == to) & changed
            ious.append(_mask_iou(p, g))
        sc = float(np.mean(ious))
    return {"convention": CHANGE_SCORE_CONVENTION,
            "bc": bc, "sc": sc, "scs": (bc + sc) / 2.0}


def sequence_report(pred, gt, peak: float = 1.0) -> dict:
    """Per-frame and aggregated reflectance metrics for (T, C, H, W) pairs.

    Aggregates are uniform means of the per-frame values; band-level PSNR
    breakdown is included for heatmap export.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"sequence_report: shape mismatch {pred.shape} vs {gt.shape}")
    frames = []
    for t in range(pred.shape[0]):
        row = {"frame": t,
               "psnr": psnr(pred[t], gt[t], peak),
               "ssim": ssim(pred[t], gt[t]),
               "rmse": rmse(pred[t], gt[t], peak),
               "mae": mae(pred[t], gt[t], peak)}
        if pred.shape[1] >= 2:
            row["sam"] = sam(pred[t], gt[t])[0]
        frames.append(row)
    keys = [k for k in frames[0] if k != "frame"]
    summary = {k: float(np.mean([f[k] for f in frames])) for k in keys}
    bands = {f"band{c}_psnr": psnr(pred[:, c], gt[:, c], peak)
             for c in range(pred.shape[1])}
    return {"frames": frames, "summary": summary, "bands": bands}
