"""Learned transparent-object model: SDF geometry plus ray bending network.

Shading of a hit combines the analytic mirror direction with the predicted
exit direction through a Fresnel split driven by the predicted index::

    C = F_r(cos, eta_t) E(omega_r) + (eta_air / eta_t)^2 (1 - F_r) E(omega_t)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import RayBendingNetwork, RbnOutput, SdfNetwork
from .optics import AIR_IOR, fresnel_with_grad, reflect
from .sdf import LearnedField, SdfField, SurfaceHit, sphere_trace

COS_FLOOR = 1e-6
CHUNK = 1 << 14


@dataclass
class ShadeCache:
    omega_i: np.ndarray
    n: np.ndarray
    rbn_out: RbnOutput
    f_r: np.ndarray
    df_dc: np.ndarray
    df_de: np.ndarray
    clipped: np.ndarray
    e_r: np.ndarray
    e_t: np.ndarray
    j_r: np.ndarray
    j_t: np.ndarray
    scale: np.ndarray


class MattingModel:
    """Geometry (learned SDF network or fixed analytic field) + ray bending net."""

    def __init__(self, rbn: RayBendingNetwork, sdf_net: SdfNetwork | None = None,
                 analytic: SdfField | None = None, half_extent=1.5, ior_air=AIR_IOR):
        if (sdf_net is None) == (analytic is None):
            raise ValueError("provide exactly one of sdf_net / analytic")
        self.rbn = rbn
        self.sdf_net = sdf_net
        self.analytic = analytic
        self.ior_air = float(ior_air)
        self.field = analytic if analytic is not None else LearnedField(sdf_net, half_extent)

    @property
    def learned_geometry(self) -> bool:
        return self.sdf_net is not None

    def trace(self, origins, dirs) -> SurfaceHit:
        return sphere_trace(self.field, origins, dirs)

    # -- shading -------------------------------------------------------------

    def shade(self, omega_i, x, n, env, record=False):
        """Radiance for hits. Returns ``(rgb, cache)``; ``cache`` is None unless ``record``."""
        out = self.rbn(omega_i, x, n, record=record)
        omega_r = reflect(omega_i, n)
        cos_raw = np.sum(omega_i * n, axis=-1)
        clipped = cos_raw < COS_FLOOR
        cos_i = np.clip(cos_raw, COS_FLOOR, 1.0)
        f_r, df_dc, df_de = fresnel_with_grad(cos_i, self.ior_air, out.eta_t)
        scale = (self.ior_air / out.eta_t) ** 2
        if record:
            e_r, j_r = env.sample_with_grad(omega_r)
            e_t, j_t = env.sample_with_grad(out.omega_t)
        else:
            e_r, e_t, j_r, j_t = env.sample(omega_r), env.sample(out.omega_t), None, None
        rgb = f_r[:, None] * e_r + (scale * (1.0 - f_r))[:, None] * e_t
        if not record:
            return rgb, out
        cache = ShadeCache(omega_i, n, out, f_r, df_dc, df_de, clipped, e_r, e_t, j_r, j_t, scale)
        return rgb, cache

    def shade_backward(self, cache: ShadeCache, g_rgb, g_omega_t=None, detach_rbn_inputs=True):
        """Back-propagate colour cotangents.

        Returns ``(g_n, rbn_grads)``: the cotangent on the (unit) normals and
        the ray bending network weight gradients. ``g_omega_t`` adds direct
        cotangents on the predicted directions (guidance/smoothness terms).
        Unless ``detach_rbn_inputs``, ``g_n`` also includes the path through
        the normal fed to the ray bending network.
        """
        c = cache
        eta_t = c.rbn_out.eta_t
        g_f = np.sum(g_rgb * (c.e_r - c.scale[:, None] * c.e_t), axis=-1)
        g_er = c.f_r[:, None] * g_rgb
        g_et = (c.scale * (1.0 - c.f_r))[:, None] * g_rgb
        g_scale = np.sum(g_rgb * (1.0 - c.f_r)[:, None] * c.e_t, axis=-1)
        g_eta = g_f * c.df_de + g_scale * (-2.0 * self.ior_air**2 / eta_t**3)
        g_wt = np.einsum("nck,nc->nk", c.j_t, g_et)
        if g_omega_t is not None:
            g_wt = g_wt + g_omega_t
        if detach_rbn_inputs:
            rbn_grads, g_n_in = self.rbn.backward(c.rbn_out, g_wt, g_eta), 0.0
        else:
            rbn_grads, g_n_in = self.rbn.backward(c.rbn_out, g_wt, g_eta, input_grad=True)
        g_wr = np.einsum("nck,nc->nk", c.j_r, g_er)
        g_cos = np.where(c.clipped, 0.0, g_f * c.df_dc)
        n, w = c.n, c.omega_i
        ndw = np.sum(n * w, axis=-1, keepdims=True)
        g_n = 2.0 * (np.sum(g_wr * n, axis=-1, keepdims=True) * w + ndw * g_wr)
        g_n = g_n + g_cos[:, None] * w + g_n_in
        return g_n, rbn_grads

    # -- inference -----------------------------------------------------------

    def render_rays(self, origins, dirs, env):
        """Render rays. Returns a dict with ``rgb``, ``mask`` and per-hit outputs."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(origins)
        rgb = np.zeros((n, 3))
        omega_t = np.zeros((n, 3))
        eta_t = np.zeros(n)
        f_r = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        normals = np.zeros((n, 3))
        points = np.zeros((n, 3))
        for s in range(0, n, CHUNK):
            sl = slice(s, s + CHUNK)
            h = self.trace(origins[sl], dirs[sl])
            idx = np.flatnonzero(h.hit) + s
            mask[idx] = True
            if idx.size == 0:
                continue
            w_i = -dirs[idx]
            x = h.x[h.hit]
            nn_ = h.n[h.hit]
            out_rgb, out = self.shade(w_i, x, nn_, env)
            rgb[idx] = out_rgb
            omega_t[idx] = out.omega_t
            eta_t[idx] = out.eta_t
            cos_i = np.clip(np.sum(w_i * nn_, axis=-1), COS_FLOOR, 1.0)
            f_r[idx] = fresnel_with_grad(cos_i, self.ior_air, out.eta_t)[0]
            normals[idx] = nn_
            points[idx] = x
        return {
            "rgb": rgb,
            "mask": mask,
            "omega_t": omega_t,
            "eta_t": eta_t,
            "f_r": f_r,
            "n": normals,
            "x": points,
        }

    def render_view(self, camera, env):
        o, d = camera.rays()
        out = self.render_rays(o, d, env)
        h, w = camera.height, camera.width
        return out["rgb"].reshape(h, w, 3), out["mask"].reshape(h, w), out
