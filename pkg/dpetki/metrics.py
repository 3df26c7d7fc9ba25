# Segmentation and curve-regression metrics
import math

import numpy as np

from .errors import LengthMismatch

BCE_CLAMP = 1e-7


def _pair(g, p):
    g = np.asarray(g, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if g.size != p.size:
        raise LengthMismatch(f"length {g.size} vs {p.size}")
    return g, p


def _curves(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    if y.size == 0:
        raise LengthMismatch("curves are empty")
    return y, y_hat


def dice_coefficient(g, p, smooth=1e-6):
    """Soft Dice: (2*sum(g*p) + smooth) / (sum(g) + sum(p) + smooth)."""
    g, p = _pair(g, p)
    return float((2.0 * (g * p).sum() + smooth) / (g.sum() + p.sum() + smooth))


def dice_loss(g, p, smooth=1e-6):
    return 1.0 - dice_coefficient(g, p, smooth)


def bce(g, p):
    """Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    g, p = _pair(g, p)
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-(g * np.log(p) + (1.0 - g) * np.log(1.0 - p)).mean())


def combined_loss(g, p, smooth=1e-6):
    return bce(g, p) + dice_loss(g, p, smooth)


def _binary(g, p):
    g, p = _pair(g, p)
    return g >= 0.5, p >= 0.5


def iou(g, p):
    """Intersection over union after binarizing at 0.5; empty union gives 1."""
    g, p = _binary(g, p)
    union = np.logical_or(g, p).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(g, p).sum() / union)


def precision(g, p):
    g, p = _binary(g, p)
    predicted = p.sum()
    return float((g & p).sum() / predicted) if predicted else 1.0


def recall(g, p):
    g, p = _binary(g, p)
    actual = g.sum()
    return float((g & p).sum() / actual) if actual else 1.0


def specificity(g, p):
    g, p = _binary(g, p)
    negatives = (~g).sum()
    return float((~g & ~p).sum() / negatives) if negatives else 1.0


def mse(y, y_hat):
    y, y_hat = _curves(y, y_hat)
    return float(((y - y_hat) ** 2).mean())


def mae(y, y_hat):
    y, y_hat = _curves(y, y_hat)
    return float(np.abs(y - y_hat).mean())


def rmse(y, y_hat):
    return math.sqrt(mse(y, y_hat))


def regression_metrics(y, y_hat):
    """(mse, mae, rmse) of a predicted curve."""
    value = mse(y, y_hat)
    return value, mae(y, y_hat), math.sqrt(value)


def normalized_rmse(y, y_hat):
    """RMSE divided by the peak magnitude of the reference curve y."""
    y, y_hat = _curves(y, y_hat)
    peak = np.abs(y).max()
    return rmse(y, y_hat) / peak if peak > 0 else math.inf


def mask_report(g, p):
    """Segmentation metrics in the fold-table layout."""
    return {
        "loss": combined_loss(g, p),
        "dice": dice_coefficient(g, p),
        "iou": iou(g, p),
        "precision": precision(g, p),
        "recall": recall(g, p),
    }


def tac_report(y, y_hat):
    """Curve metrics; loss is the MSE."""
    value = mse(y, y_hat)
    return {
        "loss": value,
        "mse": value,
        "mae": mae(y, y_hat),
        "rmse": math.sqrt(value),
        "nrmse": normalized_rmse(y, y_hat),
    }


def summarize_folds(values):
    """Mean and population standard deviation of per-fold values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to summarize")
    return float(values.mean()), float(values.std())
