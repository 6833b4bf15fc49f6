"""Closed-form reflection, refraction and Fresnel math for smooth dielectrics.

Conventions used everywhere in the package:

* ``omega_i`` points *away* from the surface, toward where the ray came from
  (``omega_i = -ray.direction`` at a hit).
* ``n`` is the unit normal on the side of the incident medium, so
  ``dot(omega_i, n) >= 0`` for a valid front-facing hit.

All functions broadcast over leading axes; vectors live in the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AIR_IOR = 1.00028


class TotalInternalReflection(ArithmeticError):
    """No transmitted direction exists for (some of) the given rays."""

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)
        super().__init__(f"total internal reflection for {int(self.mask.sum())} ray(s)")


@dataclass(frozen=True)
class IorPair:
    """Indices of refraction on the incident and transmitting side."""

    eta_i: float
    eta_t: float

    def swapped(self) -> IorPair:
        return IorPair(self.eta_t, self.eta_i)

    @property
    def ratio(self) -> float:
        return self.eta_i / self.eta_t


def dot(a, b):
    return np.sum(a * b, axis=-1)


def normalize(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def reflect(omega_i, n):
    """Mirror direction ``2 (n . w) n - w``."""
    omega_i = np.asarray(omega_i, dtype=float)
    n = np.asarray(n, dtype=float)
    return 2.0 * dot(n, omega_i)[..., None] * n - omega_i


def refract_masked(omega_i, n, eta_i, eta_t):
    """Vectorised refraction returning ``(direction, tir)``.

    Rows flagged in the boolean ``tir`` mask have no transmitted direction and
    their entries in ``direction`` are zero.
    """
    omega_i = np.asarray(omega_i, dtype=float)
    n = np.asarray(n, dtype=float)
    k = np.asarray(eta_i, dtype=float) / np.asarray(eta_t, dtype=float)
    cos_i = dot(omega_i, n)
    # (1 - k^2) + k^2 c^2 rather than 1 - k^2 (1 - c^2): exact for matched indices
    radicand = (1.0 - k * k) + k * k * cos_i * cos_i
    tir = radicand < 0.0
    root = np.sqrt(np.where(tir, 0.0, radicand))
    k = np.asarray(k)[..., None] if np.ndim(k) else k
    out = -k * (omega_i - cos_i[..., None] * n) - root[..., None] * n
    out = np.where(tir[..., None], 0.0, out)
    return out, tir


def refract(omega_i, n, ior: IorPair):
    """Transmitted direction across an interface (pointing into the far medium).

    Raises :class:`TotalInternalReflection` when any ray cannot transmit.
    """
    out, tir = refract_masked(omega_i, n, ior.eta_i, ior.eta_t)
    if np.any(tir):
        raise TotalInternalReflection(tir)
    return out


def _cos_transmitted(cos_i, eta_i, eta_t):
    k2 = (eta_i / eta_t) ** 2
    sin2_t = k2 * np.maximum(0.0, 1.0 - cos_i * cos_i)
    cos2_t = (1.0 - k2) + k2 * cos_i * cos_i
    tir = cos2_t < 0.0
    cos_t = np.sqrt(np.maximum(0.0, cos2_t))
    return cos_t, sin2_t, tir


def fresnel_masked(cos_i, eta_i, eta_t):
    """Unpolarised Fresnel reflectance, TIR rows reported as ``f_r = 1``.

    Returns ``(f_r, f_t, tir)`` with ``f_t = 1 - f_r``.
    """
    cos_i = np.asarray(cos_i, dtype=float)
    eta_i = np.asarray(eta_i, dtype=float)
    eta_t = np.asarray(eta_t, dtype=float)
    cos_t, _, tir = _cos_transmitted(cos_i, eta_i, eta_t)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_par = (eta_t * cos_i - eta_i * cos_t) / (eta_t * cos_i + eta_i * cos_t)
        r_perp = (eta_i * cos_i - eta_t * cos_t) / (eta_i * cos_i + eta_t * cos_t)
    f_r = 0.5 * (r_par * r_par + r_perp * r_perp)
    # exactly grazing with matched indices is 0/0; take the matched-index limit
    f_r = np.where(np.isnan(f_r), np.where(eta_i == eta_t, 0.0, 1.0), f_r)
    f_r = np.where(tir, 1.0, np.clip(f_r, 0.0, 1.0))
    return f_r, 1.0 - f_r, tir


def fresnel_reflectance(cos_beta_i, ior: IorPair):
    """Return ``(f_r, f_t)``; raises :class:`TotalInternalReflection`."""
    f_r, f_t, tir = fresnel_masked(cos_beta_i, ior.eta_i, ior.eta_t)
    if np.any(tir):
        raise TotalInternalReflection(tir)
    return f_r, f_t


def fresnel_with_grad(cos_i, eta_i, eta_t):
    """Fresnel reflectance and its partials w.r.t. ``cos_i`` and ``eta_t``.

    Used by the learned renderer, where both the incidence cosine (through the
    SDF normal) and the predicted index carry gradient. TIR rows return
    ``f_r = 1`` with zero partials.
    """
    cos_i = np.asarray(cos_i, dtype=float)
    eta_t = np.asarray(eta_t, dtype=float)
    eta_i = np.broadcast_to(np.asarray(eta_i, dtype=float), eta_t.shape)
    c = cos_i
    cos_t, sin2_t, tir = _cos_transmitted(c, eta_i, eta_t)
    ct = np.maximum(cos_t, 1e-12)
    dct_dc = (eta_i / eta_t) ** 2 * c / ct
    dct_deta = sin2_t / (eta_t * ct)

    num_p = eta_t * c - eta_i * cos_t
    den_p = eta_t * c + eta_i * cos_t
    num_s = eta_i * c - eta_t * cos_t
    den_s = eta_i * c + eta_t * cos_t
    r_p = num_p / den_p
    r_s = num_s / den_s

    drp_dc = ((eta_t - eta_i * dct_dc) * den_p - num_p * (eta_t + eta_i * dct_dc)) / den_p**2
    drs_dc = ((eta_i - eta_t * dct_dc) * den_s - num_s * (eta_i + eta_t * dct_dc)) / den_s**2
    drp_de = ((c - eta_i * dct_deta) * den_p - num_p * (c + eta_i * dct_deta)) / den_p**2
    drs_de = (
        (-cos_t - eta_t * dct_deta) * den_s - num_s * (cos_t + eta_t * dct_deta)
    ) / den_s**2

    f_r = 0.5 * (r_p * r_p + r_s * r_s)
    df_dc = r_p * drp_dc + r_s * drs_dc
    df_de = r_p * drp_de + r_s * drs_de
    f_r = np.where(tir, 1.0, f_r)
    df_dc = np.where(tir, 0.0, df_dc)
    df_de = np.where(tir, 0.0, df_de)
    return f_r, df_dc, df_de


def blend_radiance(f_r, ior: IorPair, e_reflect, e_transmit):
    """Fresnel-weighted mix of reflected and transmitted environment radiance.

    The transmitted term is scaled by ``(eta_i / eta_t)**2`` to account for the
    change in solid angle across the interface.
    """
    f_r = np.asarray(f_r, dtype=float)[..., None]
    scale = (np.asarray(ior.eta_i, dtype=float) / np.asarray(ior.eta_t, dtype=float)) ** 2
    scale = np.asarray(scale)[..., None] if np.ndim(scale) else scale
    return f_r * np.asarray(e_reflect) + scale * (1.0 - f_r) * np.asarray(e_transmit)
