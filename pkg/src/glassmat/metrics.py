"""Image, direction and geometry metrics."""

from __future__ import annotations

import json

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


class ZeroPixelMask(MetricError):
    pass


class ImageTooSmall(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


class EmptySet(MetricError):
    pass


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref, mask=None) -> float:
    pred, ref = _pair(pred, ref)
    err = (pred - ref) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ZeroPixelMask("evaluation mask selects no pixels")
        err = err[mask]
    mse = float(np.mean(err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, ref):
    pred, ref = _pair(pred, ref)
    if pred.ndim == 3:
        pred = pred.mean(axis=-1)
        ref = ref.mean(axis=-1)
    if min(pred.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW} pixels per side")
    w = gaussian_window()

    def filt(a):
        return convolve2d(a, w, mode="valid")

    c1 = K1**2
    c2 = K2**2
    mu_x = filt(pred)
    mu_y = filt(ref)
    sxx = filt(pred * pred) - mu_x**2
    syy = filt(ref * ref) - mu_y**2
    sxy = filt(pred * ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, ref, mask=None) -> float:
    """Mean SSIM over valid windows (optionally windows centred in ``mask``)."""
    smap = ssim_map(pred, ref)
    if mask is None:
        return float(smap.mean())
    h = SSIM_WINDOW // 2
    m = np.asarray(mask, dtype=bool)[h : h + smap.shape[0], h : h + smap.shape[1]]
    if not m.any():
        raise ZeroPixelMask("evaluation mask selects no SSIM windows")
    return float(smap[m].mean())


def angular_error(dirs_a, dirs_b):
    """Mean and median angle (degrees) between paired unit vectors."""
    a = np.atleast_2d(np.asarray(dirs_a, dtype=float))
    b = np.atleast_2d(np.asarray(dirs_b, dtype=float))
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    ang = np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)))
    return float(ang.mean()), float(np.median(ang))


def chamfer_l1(points_a, points_b) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance."""
    a = np.atleast_2d(np.asarray(points_a, dtype=float))
    b = np.atleast_2d(np.asarray(points_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise EmptySet("chamfer distance of an empty point set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def mask_iou(pred, ref) -> float:
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {ref.shape}")
    union = np.logical_or(pred, ref).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, ref).sum() / union)


def write_report(rows, path_json=None, path_tsv=None):
    """Write per-view rows plus their mean as JSON and/or TSV."""
    keys = [k for k in rows[0] if k != "view"] if rows else []
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    report = {"per_view": rows, "aggregate": aggregate}
    if path_json is not None:
        with open(path_json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if path_tsv is not None:
        with open(path_tsv, "w") as fh:
            fh.write("\t".join(["view"] + keys) + "\n")
            for r in rows:
                fh.write("\t".join([str(r["view"])] + [f"{r[k]:.6f}" for k in keys]) + "\n")
            fh.write("\t".join(["mean"] + [f"{aggregate[k]:.6f}" for k in keys]) + "\n")
    return report
