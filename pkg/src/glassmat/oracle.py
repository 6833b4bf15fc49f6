"""Analytic smooth-dielectric renderer and synthetic dataset generation.

The oracle follows the exact Snell path through the object (any number of
interior interfaces, total internal reflection included) and composites one
Fresnel split at the entry point: reflected environment radiance plus the
radiance seen along the final exit direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envmap as envmod
from .envmap import EnvironmentMap
from .optics import AIR_IOR, IorPair, blend_radiance, fresnel_masked, normalize, reflect, refract_masked
from .sdf import SdfField, SurfaceHit, inside_trace, sphere_trace
from .dataset import save_mask

DEFAULT_B_MAX = 8
GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0
CHUNK = 1 << 15


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.look_at = np.asarray(self.look_at, dtype=float)
        self.up = np.asarray(self.up, dtype=float)
        axis = self.look_at - self.position
        if np.linalg.norm(axis) == 0:
            raise ValueError("camera position coincides with look_at")
        if np.linalg.norm(np.cross(normalize(axis), normalize(self.up))) < 1e-9:
            raise ValueError("camera up vector is parallel to the view axis")

    def basis(self):
        forward = normalize(self.look_at - self.position)
        right = normalize(np.cross(forward, self.up))
        up = np.cross(right, forward)
        return forward, right, up

    def pixel_rays(self, rows, cols):
        """Rays through pixel centres ``(rows, cols)`` (row 0 is the top)."""
        forward, right, up = self.basis()
        tan_half = np.tan(np.radians(self.vertical_fov) / 2.0)
        aspect = self.width / self.height
        sx = (2.0 * (np.asarray(cols) + 0.5) / self.width - 1.0) * tan_half * aspect
        sy = (1.0 - 2.0 * (np.asarray(rows) + 0.5) / self.height) * tan_half
        d = forward + sx[..., None] * right + sy[..., None] * up
        d = normalize(d)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def rays(self):
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        o, d = self.pixel_rays(rows.ravel(), cols.ravel())
        return o, d

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_deg": float(self.vertical_fov),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(d["position"], d["look_at"], d["up"], d["fov_deg"], d["width"], d["height"])


@dataclass
class SyntheticScene:
    field: SdfField
    env: EnvironmentMap
    ior_object: float
    ior_air: float = AIR_IOR

    def __post_init__(self):
        if self.ior_object <= 0 or self.ior_air <= 0:
            raise ValueError("indices of refraction must be positive")

    @property
    def entry_ior(self) -> IorPair:
        return IorPair(self.ior_air, self.ior_object)


@dataclass
class DielectricPath:
    exit_direction: np.ndarray
    bounce_count: np.ndarray
    tir_count: np.ndarray
    escaped: np.ndarray


def guidance_direction(omega_i, n, eta_i, eta_t):
    """Single-interface refraction at the entry point (zero rows on TIR)."""
    d, _ = refract_masked(omega_i, n, eta_i, eta_t)
    return d


def trace_dielectric(scene: SyntheticScene, entry: SurfaceHit, omega_i, b_max=DEFAULT_B_MAX):
    """Follow the refracted ray through the object until it leaves.

    ``entry`` and ``omega_i`` describe hits only (``entry.hit`` all true).
    At every interior interface the ray either refracts out or, under total
    internal reflection, mirrors back inside; at most ``b_max`` interior
    interfaces are visited.
    """
    omega_i = np.atleast_2d(np.asarray(omega_i, dtype=float))
    n = len(omega_i)
    direction, _ = refract_masked(omega_i, entry.n, scene.ior_air, scene.ior_object)
    pos = entry.x.copy()
    exit_dir = direction.copy()
    bounces = np.ones(n, dtype=np.int64)
    tirs = np.zeros(n, dtype=np.int64)
    escaped = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(b_max):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h = inside_trace(scene.field, pos[idx], direction[idx])
        stuck = ~h.hit
        active[idx[stuck]] = False
        idx, hx, hn = idx[~stuck], h.x[~stuck], h.n[~stuck]
        w_in = -direction[idx]
        n_in = -hn
        out, tir = refract_masked(w_in, n_in, scene.ior_object, scene.ior_air)
        bounces[idx] += 1
        leave = idx[~tir]
        exit_dir[leave] = out[~tir]
        escaped[leave] = True
        active[leave] = False
        stay = idx[tir]
        direction[stay] = reflect(w_in[tir], n_in[tir])
        pos[stay] = hx[tir]
        tirs[stay] += 1
    exit_dir[~escaped] = direction[~escaped]
    return DielectricPath(normalize(exit_dir), bounces, tirs, escaped)


def shade_hits(scene: SyntheticScene, hits: SurfaceHit, dirs, b_max=DEFAULT_B_MAX):
    """Radiance for rays that hit the object (all rows of ``hits`` are hits)."""
    omega_i = -dirs
    omega_r = reflect(omega_i, hits.n)
    cos_i = np.clip(np.sum(omega_i * hits.n, axis=-1), 1e-12, 1.0)
    f_r, _, _ = fresnel_masked(cos_i, scene.ior_air, scene.ior_object)
    path = trace_dielectric(scene, hits, omega_i, b_max)
    e_r = scene.env.sample(omega_r)
    e_t = scene.env.sample(path.exit_direction)
    rgb = blend_radiance(f_r, scene.entry_ior, e_r, e_t)
    return np.where(path.escaped[:, None], rgb, e_r), path


def render_rays(scene: SyntheticScene, origins, dirs, b_max=DEFAULT_B_MAX):
    """Render a batch of rays. Returns ``(rgb, mask)``; misses are black."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    rgb = np.zeros(origins.shape)
    mask = np.zeros(len(origins), dtype=bool)
    for s in range(0, len(origins), CHUNK):
        o, d = origins[s : s + CHUNK], dirs[s : s + CHUNK]
        h = sphere_trace(scene.field, o, d)
        mask[s : s + CHUNK] = h.hit
        if h.hit.any():
            sel = h.hit
            sub = SurfaceHit(h.hit[sel], h.t[sel], h.x[sel], h.n[sel])
            out, _ = shade_hits(scene, sub, d[sel], b_max)
            block = np.zeros(d.shape)
            block[sel] = out
            rgb[s : s + CHUNK] = block
    return rgb, mask


def render_pixel(scene: SyntheticScene, origin, direction):
    rgb, _ = render_rays(scene, origin, direction)
    return rgb[0]


def render_image(scene: SyntheticScene, camera: Camera, b_max=DEFAULT_B_MAX):
    o, d = camera.rays()
    rgb, mask = render_rays(scene, o, d, b_max)
    return rgb.reshape(camera.height, camera.width, 3), mask.reshape(camera.height, camera.width)


def fibonacci_directions(n: int):
    """Fibonacci lattice on the upper hemisphere (``y`` from 1 down toward 0)."""
    i = np.arange(n)
    y = 1.0 - i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * 2.0 * np.pi * (1.0 - 1.0 / GOLDEN)
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)


def fibonacci_cameras(n, radius, look_at=(0.0, 0.0, 0.0), fov=40.0, width=64, height=64):
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 0:
        raise ValueError("radius must be positive")
    look_at = np.asarray(look_at, dtype=float)
    cams = []
    for p in fibonacci_directions(n):
        up = np.array([0.0, 1.0, 0.0])
        if abs(p[1]) > 1.0 - 1e-6:
            up = np.array([0.0, 0.0, 1.0])
        cams.append(Camera(look_at + radius * p, look_at, up, fov, width, height))
    return cams


def split_views(n_views: int, seed: int):
    """Seeded 50/50 train/test assignment; returns a list of split labels."""
    order = np.random.default_rng(seed).permutation(n_views)
    labels = ["test"] * n_views
    for i in order[: n_views // 2]:
        labels[int(i)] = "train"
    return labels


def generate_dataset(
    scene: SyntheticScene,
    n_views: int,
    out_dir,
    resolution: int = 64,
    seed: int = 0,
    radius: float = 4.0,
    fov: float = 40.0,
    b_max: int = DEFAULT_B_MAX,
):
    """Render ``n_views`` oracle images and masks and write the dataset layout."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cams = fibonacci_cameras(n_views, radius, (0.0, 0.0, 0.0), fov, resolution, resolution)
    labels = split_views(n_views, seed)
    records = []
    for i, (cam, label) in enumerate(zip(cams, labels)):
        img, mask = render_image(scene, cam, b_max)
        envmod.write_pfm(out / "images" / f"view_{i:04d}.pfm", img)
        envmod.save_png(out / "images" / f"view_{i:04d}.png", img)
        save_mask(out / "masks" / f"view_{i:04d}.png", mask)
        records.append({**cam.to_dict(), "split": label})
    (out / "cameras.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    envmod.save_pfm(scene.env, out / "env.pfm")
    meta = {
        "ior_object": scene.ior_object,
        "ior_air": scene.ior_air,
        "seed": seed,
        "n_views": n_views,
        "shape": scene.field.describe(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
