"""Masked material metrics: albedo PSNR/SSIM (raw and scale-aligned) and roughness MSE."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0


class EmptyMaskError(ValueError):
    pass


def _mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match map shape {shape}")
    if not m.any():
        raise EmptyMaskError("metric mask selects no pixels")
    return m


def masked_mse(pred, gt, mask) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, pred.shape[:2])
    return float(np.mean((pred[m] - gt[m]) ** 2))


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def masked_psnr(pred, gt, mask) -> float:
    return psnr_from_mse(masked_mse(pred, gt, mask))


def masked_ssim(pred, gt, mask) -> float:
    """Mean of the full SSIM map (Gaussian window, sigma 1.5) over masked pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, pred.shape[:2])
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, full=True)
    if pred.ndim == 3:
        _, smap = structural_similarity(pred, gt, channel_axis=-1, **kw)
        smap = smap.mean(-1)
    else:
        _, smap = structural_similarity(pred, gt, **kw)
    return float(smap[m].mean())


def scale_align(preds, gts, masks) -> np.ndarray:
    """Per-channel least-squares scale over all views: ``s_c = sum(gt*pred) / sum(pred^2)``."""
    num = np.zeros(3)
    den = np.zeros(3)
    for p, g, m in zip(preds, gts, masks):
        mm = np.asarray(m) > 0.5
        p = np.asarray(p, dtype=np.float64)[mm]
        g = np.asarray(g, dtype=np.float64)[mm]
        num += (g * p).sum(0)
        den += (p * p).sum(0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


@dataclass
class ViewMetrics:
    name: str
    albedo_psnr: float
    albedo_ssim: float
    albedo_psnr_aligned: float
    albedo_ssim_aligned: float
    roughness_mse: float


@dataclass
class MetricsReport:
    views: list[ViewMetrics] = field(default_factory=list)
    scale: tuple = (1.0, 1.0, 1.0)

    FIELDS = ("albedo_psnr", "albedo_ssim", "albedo_psnr_aligned", "albedo_ssim_aligned", "roughness_mse")

    def aggregate(self) -> dict[str, float]:
        """Mean of per-view values."""
        return {f: float(np.mean([getattr(v, f) for v in self.views])) for f in self.FIELDS}

    def write_csv(self, path) -> None:
        """Per-view rows plus a ``mean`` row; values written with full precision."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", *self.FIELDS])
            for v in self.views:
                d = asdict(v)
                w.writerow([v.name] + [repr(float(d[f])) for f in self.FIELDS])
            agg = self.aggregate()
            w.writerow(["mean"] + [repr(agg[f]) for f in self.FIELDS])


def compute_metrics(pred_albedo, gt_albedo, pred_rough, gt_rough, masks, names=None) -> MetricsReport:
    """Metrics over lists of per-view maps restricted to each view's mask."""
    if not len(masks):
        raise EmptyMaskError("no views to evaluate")
    names = names or [f"view_{i:03d}" for i in range(len(masks))]
    s = scale_align(pred_albedo, gt_albedo, masks)
    views = []
    for name, pa, ga, pr, gr, m in zip(names, pred_albedo, gt_albedo, pred_rough, gt_rough, masks):
        pa = np.asarray(pa, dtype=np.float64)
        aligned = np.clip(pa * s, 0.0, 1.0)
        views.append(ViewMetrics(name, masked_psnr(pa, ga, m), masked_ssim(pa, ga, m), masked_psnr(aligned, ga, m),
                                 masked_ssim(aligned, ga, m), masked_mse(pr, gr, m)))
    return MetricsReport(views, tuple(float(x) for x in s))


def region_mask(points: np.ndarray, lo, hi) -> np.ndarray:
    """Pixels whose surface point lies in the axis-aligned box ``[lo, hi]``."""
    p = np.asarray(points)
    return np.all((p >= np.asarray(lo)) & (p <= np.asarray(hi)), axis=-1)
