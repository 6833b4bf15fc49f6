"""Training objective terms and their gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
quantity the loss is differentiated with respect to.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import _sigmoid, softplus


@dataclass
class LossWeights:
    pix: float = 1.0
    eik: float = 0.1
    sil: float = 100.0
    rg_initial: float = 1.0
    rg_floor: float = 0.01
    rg_tau: float | None = None  # defaults to a quarter of the iterations
    rs: float = 0.01

    def rg(self, step: int, iterations: int) -> float:
        tau = self.rg_tau if self.rg_tau else max(iterations, 1) / 4.0
        return max(self.rg_floor, self.rg_initial * np.exp(-step / tau))

    def to_dict(self):
        return asdict(self)


def alpha_schedule(step, iterations, start=50.0, factor=2.0, intervals=4):
    """Silhouette sharpness: ``start``, multiplied by ``factor`` every 1/intervals of training."""
    if iterations <= 0:
        return float(start)
    k = min(int(intervals * step / iterations), intervals - 1)
    return float(start * factor**k)


def loss_pix(rendered, target):
    """Mean over rays of the per-ray L1 norm of the colour error."""
    rendered = np.asarray(rendered, dtype=float)
    if len(rendered) == 0:
        return 0.0, np.zeros_like(rendered)
    diff = rendered - np.asarray(target, dtype=float)
    n = len(rendered)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def loss_rg(omega_t, omega_a, eps=1e-8):
    """Mean of ``1 - cos`` between predicted and analytic refraction directions."""
    omega_t = np.asarray(omega_t, dtype=float)
    omega_a = np.asarray(omega_a, dtype=float)
    if len(omega_t) == 0:
        return 0.0, np.zeros_like(omega_t)
    nt = np.linalg.norm(omega_t, axis=-1)
    na = np.linalg.norm(omega_a, axis=-1)
    denom = np.maximum(nt * na, eps)
    d = np.sum(omega_t * omega_a, axis=-1)
    cos = d / denom
    n = len(omega_t)
    # d(denom)/d(omega_t) only where the guard is inactive
    active = (nt * na) > eps
    ddenom = np.where(active, na / np.maximum(nt, 1e-300), 0.0)[:, None] * omega_t
    grad = -(omega_a / denom[:, None] - (d / denom**2)[:, None] * ddenom) / n
    return float(np.mean(1.0 - cos)), grad


def loss_rs(omega_t_patches, valid):
    """Mean per-coordinate variance of directions inside all-hit patches.

    ``omega_t_patches`` is ``(P, m*m, 3)``; ``valid`` marks qualifying patches.
    """
    omega = np.asarray(omega_t_patches, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    grad = np.zeros_like(omega)
    if not valid.any():
        return 0.0, grad
    sel = omega[valid]
    k = sel.shape[1]
    centred = sel - sel.mean(axis=1, keepdims=True)
    var = (centred**2).mean(axis=1)  # (P, 3)
    q = len(sel)
    value = float(var.mean())
    grad[valid] = 2.0 * centred / (k * 3 * q)
    return value, grad


def silhouette_samples(origins, dirs, box, k, rng):
    """``k`` stratified points per ray on its segment inside ``box``.

    Returns ``(points (N, k, 3), valid (N,))``; rays missing the box are
    flagged invalid.
    """
    t_near, t_far, valid = box.clip(origins, dirs)
    t_far = np.where(valid, t_far, t_near)
    u = (np.arange(k)[None, :] + rng.random((len(origins), k))) / k
    t = t_near[:, None] + u * (t_far - t_near)[:, None]
    return origins[:, None, :] + t[..., None] * dirs[:, None, :], valid


def loss_sil(z_min, alpha, target=None, valid=None):
    """Cross-entropy on the minimum SDF value along each ray.

    With target 0 (background) the penalty is ``softplus(-alpha z) / alpha``;
    with target 1 (object) it is ``softplus(alpha z) / alpha``. Rays marked
    invalid (not crossing the box) contribute zero but count in the mean.
    """
    z = np.asarray(z_min, dtype=float)
    n = len(z)
    if n == 0:
        return 0.0, np.zeros_like(z)
    target = np.zeros(n, dtype=bool) if target is None else np.asarray(target, dtype=bool)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    sign = np.where(target, 1.0, -1.0)
    vals = np.where(valid, softplus(sign * alpha * z) / alpha, 0.0)
    grad = np.where(valid, sign * _sigmoid(sign * alpha * z), 0.0) / n
    return float(vals.sum() / n), grad


def loss_eik(gradients):
    """Mean of ``(|grad f| - 1)^2``; gradient w.r.t. the SDF input gradients."""
    g = np.asarray(gradients, dtype=float)
    if len(g) == 0:
        return 0.0, np.zeros_like(g)
    norm = np.linalg.norm(g, axis=-1)
    r = norm - 1.0
    n = len(g)
    grad = (2.0 * r / np.maximum(norm, 1e-12))[:, None] * g / n
    return float(np.mean(r * r)), grad


COMPONENTS = ("pix", "sil", "eik", "rg", "rs")


def total_loss(components: dict, weights: LossWeights, step: int, iterations: int) -> float:
    return (
        weights.pix * components["pix"]
        + weights.eik * components["eik"]
        + weights.sil * components["sil"]
        + weights.rg(step, iterations) * components["rg"]
        + weights.rs * components["rs"]
    )
