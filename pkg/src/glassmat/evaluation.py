"""Held-out evaluation of a trained model against the analytic oracle."""

from __future__ import annotations

import numpy as np

from . import metrics
from .envmap import tonemap
from .oracle import SyntheticScene, trace_dielectric
from .sdf import SurfaceHit, field_from_dict, sphere_trace


def oracle_exit_directions(field, ior_object, ior_air, origins, dirs):
    """Oracle hit mask and exit directions for rays (zeros on misses)."""
    h = sphere_trace(field, origins, dirs)
    out = np.zeros_like(dirs)
    escaped = np.zeros(len(dirs), dtype=bool)
    if h.hit.any():
        sel = h.hit
        sub = SurfaceHit(h.hit[sel], h.t[sel], h.x[sel], h.n[sel])
        scene = SyntheticScene(field, None, ior_object, ior_air)
        path = trace_dielectric(scene, sub, -dirs[sel])
        out[sel] = path.exit_direction
        escaped[sel] = path.escaped
    return h.hit, out, escaped


def evaluate_views(model, dataset, split="test", env=None, masked=False, directions=True):
    """Per-view image metrics, mask IoU and (if the shape is known) angular error.

    Returns ``(rows, extras)``; ``extras`` pools the angular errors and the
    predicted indices over all views.
    """
    env = dataset.env if env is None else env
    shape = dataset.meta.get("shape")
    field = field_from_dict(shape) if (shape and directions) else None
    rows = []
    angles, etas = [], []
    for view in dataset.split(split):
        cam = view.camera
        rgb, mask, out = model.render_view(cam, env)
        pred = tonemap(rgb)
        ref = tonemap(view.image)
        eval_mask = view.mask if masked else None
        row = {
            "view": view.index,
            "psnr": metrics.psnr(pred, ref, eval_mask),
            "ssim": metrics.ssim(pred, ref, eval_mask),
            "mask_iou": metrics.mask_iou(mask, view.mask),
        }
        etas.append(out["eta_t"][out["mask"]])
        if field is not None:
            o, d = cam.rays()
            hit, exit_dir, escaped = oracle_exit_directions(
                field, dataset.ior_object, dataset.ior_air, o, d
            )
            both = hit & out["mask"] & escaped
            if both.any():
                a = np.degrees(np.arccos(np.clip(np.sum(out["omega_t"][both] * exit_dir[both], -1), -1, 1)))
                angles.append(a)
                row["angular_error"] = float(a.mean())
        rows.append(row)
    angles = np.concatenate(angles) if angles else np.zeros(0)
    etas = np.concatenate(etas) if etas else np.zeros(0)
    extras = {
        "angular_mean": float(angles.mean()) if angles.size else float("nan"),
        "angular_median": float(np.median(angles)) if angles.size else float("nan"),
        "eta_median": float(np.median(etas)) if etas.size else float("nan"),
    }
    return rows, extras


def summarize(rows) -> dict:
    keys = {k for r in rows for k in r if k != "view"}
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in sorted(keys)}
