"""Segmentation and restoration quality metrics.

Pixel metrics (mIoU, mAcc, allAcc) are derived from an explicit confusion
matrix so partial results can be merged associatively across workers.
Restoration metrics are PSNR and windowed SSIM on images in [0, 1].
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

# Label value excluded from every pixel metric.
IGNORE_ID = 255

# PSNR reported for a zero-MSE pair (keeps reports finite).
PSNR_CAP_DB = 100.0


class ConfusionMatrix:
    """Square count matrix; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts shape {counts.shape} does not match num_classes={num_classes}")
            if (counts < 0).any():
                raise ValueError("confusion counts must be nonnegative")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and other.num_classes == self.num_classes
            and np.array_equal(other.counts, self.counts)
        )

    def __repr__(self) -> str:
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray, ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    """Add the per-pixel joint histogram of (gt, pred) to ``cm`` in place.

    Pixels whose ground-truth value equals ``ignore_id`` are skipped.
    Raises on any class id outside [0, num_classes).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt != ignore_id
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    k = cm.num_classes
    if p.size:
        if p.min() < 0 or p.max() >= k:
            raise ValueError(f"prediction contains class id outside [0, {k})")
        if g.min() < 0 or g.max() >= k:
            raise ValueError(f"ground truth contains class id outside [0, {k})")
        hist = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        cm.counts += hist
    return cm


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty (no evaluated pixels)")


def per_class_iou(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU and a presence mask.

    A class is "present" when it occurs in the ground truth or the prediction
    (union-present convention); absent classes get IoU NaN and are excluded
    from the mIoU mean.
    """
    _require_nonempty(cm)
    tp = np.diag(cm.counts).astype(np.float64)
    gt_count = cm.counts.sum(axis=1).astype(np.float64)
    pred_count = cm.counts.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return iou, present


def per_class_acc(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-class accuracy tp/(tp+fn) and a gt-presence mask."""
    _require_nonempty(cm)
    tp = np.diag(cm.counts).astype(np.float64)
    gt_count = cm.counts.sum(axis=1).astype(np.float64)
    present = gt_count > 0
    acc = np.full(cm.num_classes, np.nan)
    acc[present] = tp[present] / gt_count[present]
    return acc, present


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in gt or pred."""
    iou, present = per_class_iou(cm)
    return float(np.mean(iou[present]))


def macc(cm: ConfusionMatrix) -> float:
    """Mean per-class accuracy over classes present in the ground truth."""
    acc, present = per_class_acc(cm)
    return float(np.mean(acc[present]))


def allacc(cm: ConfusionMatrix) -> float:
    """Overall pixel accuracy: trace / total."""
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report the cap value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
) -> float:
    """Windowed SSIM with a Gaussian window, computed per channel then averaged.

    Inputs are HxW or HxWxC arrays sharing a shape; statistics use the window
    weights directly (no sample-covariance correction) and the map is averaged
    over the interior where the window fits entirely.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC image, got shape {a.shape}")
    h, w = a.shape[:2]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window}")

    kern = _gaussian_window(window, sigma)
    pad = (window - 1) // 2
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        y = correlate1d(x, kern, axis=0, mode="reflect")
        y = correlate1d(y, kern, axis=1, mode="reflect")
        return y[pad:-pad, pad:-pad]

    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
